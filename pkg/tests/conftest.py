"""Shared fixtures: tiny model configs and synthetic calibrated scenes."""

import numpy as np
import pytest

from crossmpi import CrossMPI, ModelConfig, sample_depth_planes
from crossmpi import synthetic as syn


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def tiny_config(**overrides):
    base = dict(h=8, w=8, c=3, d=3, beta=4, c_e=6, attention_scale=1,
                guided_levels=2, guided_channels=6, guided_blocks=1,
                fusenet_blocks=2, fusenet_channels=6, near=2.0, far=10.0,
                dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return CrossMPI(tiny_config(), seed=7)


def plane_scene_tuple(h=8, w=8, beta=4, d=3, plane_index=1, baseline=0.03,
                      near=2.0, far=10.0, f_lr=10.0, seed=7):
    """Single-plane scene whose depth coincides with one sampled plane."""
    planes = sample_depth_planes(near, far, d)
    f_hr = beta * f_lr
    scene = syn.make_single_plane_scene(planes.depths[plane_index], f_hr, seed=seed)
    c_lr = syn.look_from_x(syn.centered_intrinsics(h, w, f_lr), 0.0)
    c_ref = syn.look_from_x(syn.centered_intrinsics(beta * h, beta * w, f_hr), baseline)
    tup = syn.make_tuple_from_scene(scene, c_lr, c_ref, h, w, beta)
    return tup, planes, scene


def write_zoom_scene(parent_dir, beta=2, h=16, w=16, f_wide=20.0, seed=5,
                     scene_name="scene00"):
    """Write one optical-zoom scene dir (wide/tele pair + calibration)."""
    import os

    from crossmpi import write_png

    scene_dir = os.path.join(str(parent_dir), scene_name)
    os.makedirs(os.path.join(scene_dir, "wide"), exist_ok=True)
    os.makedirs(os.path.join(scene_dir, "tele"), exist_ok=True)
    depth = 5.0
    scene = syn.make_single_plane_scene(depth, beta * f_wide, seed=seed)
    k_wide = syn.centered_intrinsics(beta * h, beta * w, beta * f_wide)
    k_tele = syn.centered_intrinsics(beta * h, beta * w, beta * beta * f_wide)
    wide = syn.render(scene, syn.look_from_x(k_wide, 0.0), beta * h, beta * w)
    tele = syn.render(scene, syn.look_from_x(k_tele, 0.0), beta * h, beta * w)
    write_png(os.path.join(scene_dir, "wide", "0000.png"), wide, bit_depth=16)
    write_png(os.path.join(scene_dir, "tele", "0000.png"), tele, bit_depth=16)
    pose = "1 0 0 0 0 1 0 0 0 0 1 0"
    with open(os.path.join(scene_dir, "calibration.txt"), "w") as fh:
        fh.write(f"beta {beta}\n")
        fh.write("pair 0\n")
        fh.write(f"wide_intrinsics {k_wide[0, 0]} {k_wide[1, 1]} "
                 f"{k_wide[0, 2]} {k_wide[1, 2]}\n")
        fh.write(f"wide_pose {pose}\n")
        fh.write(f"tele_intrinsics {k_tele[0, 0]} {k_tele[1, 1]} "
                 f"{k_tele[0, 2]} {k_tele[1, 2]}\n")
        fh.write(f"tele_pose {pose}\n")
    return scene_dir, depth
