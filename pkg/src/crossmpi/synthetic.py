"""Analytic planar scenes for oracles, demos and hermetic datasets.

A scene is a front-to-back list of fronto-parallel planes (constant world z)
carrying smooth procedural textures.  Because the textures are closed-form,
any view can be rendered exactly at any resolution, which gives the tests an
independent reference for warping, plane-sweep construction, depth recovery
and end-to-end super-resolution quality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TrainingTuple, write_png
from .geometry import CameraCalibration
from .imaging import resample_bicubic

__all__ = [
    "ScenePlane",
    "PlanarScene",
    "sinusoid_texture",
    "render",
    "render_with_indices",
    "look_from_x",
    "centered_intrinsics",
    "make_single_plane_scene",
    "make_two_plane_scene",
    "make_tuple_from_scene",
    "StaticTupleSource",
    "write_sequence_dataset",
]


@dataclass(frozen=True, eq=False)
class ScenePlane:
    """A textured plane z = depth; ``extent`` = (x0, x1, y0, y1) or None (infinite)."""

    depth: float
    texture: object  # callable (x, y) -> (..., 3) colors in [0, 1]
    extent: tuple | None = None


@dataclass(frozen=True, eq=False)
class PlanarScene:
    planes: tuple

    def __post_init__(self):
        depths = [p.depth for p in self.planes]
        if any(b <= a for a, b in zip(depths, depths[1:])):
            raise ValueError("scene planes must be ordered front to back")


def sinusoid_texture(waves, base=0.5, channel_phase=2.0943951):
    """Smooth texture: base + sum of sinusoids, phase-shifted per channel.

    ``waves`` is a list of (amplitude, fx, fy, phase) with frequencies in
    cycles per world unit.  Amplitudes should sum to < 0.5 so values stay in
    (0, 1) without clipping.
    """
    waves = [tuple(map(float, w)) for w in waves]

    def tex(x, y):
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros(x.shape + (3,))
        for ch in range(3):
            acc = np.full_like(x, base)
            for amp, fx, fy, phase in waves:
                acc = acc + amp * np.sin(2 * np.pi * (fx * x + fy * y) + phase + ch * channel_phase)
            out[..., ch] = acc
        return out

    return tex


def centered_intrinsics(height, width, focal_px):
    """Intrinsics with the principal point at the image center."""
    return np.array([
        [focal_px, 0.0, (width - 1) / 2.0],
        [0.0, focal_px, (height - 1) / 2.0],
        [0.0, 0.0, 1.0],
    ])


def look_from_x(intrinsics, x_offset):
    """Axis-aligned camera whose center sits at (x_offset, 0, 0) looking down +z."""
    return CameraCalibration(
        intrinsics=intrinsics,
        rotation=np.eye(3),
        translation=np.array([-x_offset, 0.0, 0.0]),
    )


def _pixel_rays(calib, out_h, out_w):
    k_inv = np.linalg.inv(calib.intrinsics)
    u, v = np.meshgrid(np.arange(out_w, dtype=np.float64),
                       np.arange(out_h, dtype=np.float64))
    ones = np.ones_like(u)
    dirs_cam = np.stack([u, v, ones], axis=-1) @ k_inv.T
    dirs_world = dirs_cam @ calib.rotation  # (R^T @ d) per pixel
    center = calib.center()
    return center, dirs_world


def render_with_indices(scene: PlanarScene, calib: CameraCalibration, out_h, out_w):
    """Exact pinhole render; also returns the index of the visible scene plane
    per pixel (-1 where no plane is hit)."""
    center, dirs = _pixel_rays(calib, out_h, out_w)
    img = np.zeros((out_h, out_w, 3))
    idx = np.full((out_h, out_w), -1, dtype=np.int64)
    done = np.zeros((out_h, out_w), dtype=bool)
    for i, plane in enumerate(scene.planes):
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hit = (plane.depth - center[2]) / dz
        px = center[0] + t_hit * dirs[..., 0]
        py = center[1] + t_hit * dirs[..., 1]
        hit = (t_hit > 0) & np.isfinite(t_hit)
        if plane.extent is not None:
            x0, x1, y0, y1 = plane.extent
            hit &= (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
        take = hit & ~done
        if np.any(take):
            colors = plane.texture(px[take], py[take])
            img[take] = colors
            idx[take] = i
            done |= take
    return np.clip(img, 0.0, 1.0), idx


def render(scene, calib, out_h, out_w):
    return render_with_indices(scene, calib, out_h, out_w)[0]


def _waves(periods_px, amps, focal_px, depth, rng):
    """Sinusoids whose pixel period at ``depth`` under ``focal_px`` is as given."""
    waves = []
    for period, amp in zip(periods_px, amps):
        freq = focal_px / (period * depth)  # cycles per world unit
        angle = rng.uniform(0, np.pi)
        waves.append((amp, freq * np.cos(angle), freq * np.sin(angle), rng.uniform(0, 2 * np.pi)))
    return waves


def make_single_plane_scene(depth, focal_px, periods_px=(24.0, 14.0), amps=(0.25, 0.15), seed=7):
    """One infinite smooth plane; textures band-limited enough that bilinear
    warping of a discretely sampled view stays above 40 dB."""
    rng = np.random.default_rng(seed)
    tex = sinusoid_texture(_waves(periods_px, amps, focal_px, depth, rng))
    return PlanarScene(planes=(ScenePlane(depth=depth, texture=tex, extent=None),))


def make_two_plane_scene(fg_depth, bg_depth, focal_px, fg_halfwidth_px, seed=11,
                         fg_periods=(20.0, 7.0), fg_amps=(0.22, 0.16),
                         bg_periods=(26.0, 8.0), bg_amps=(0.22, 0.16)):
    """Textured foreground square over an infinite background plane.

    ``focal_px`` is the focal length of the high-resolution view the pixel
    periods refer to; ``fg_halfwidth_px`` is the half-size of the square in
    those pixels at the foreground depth.
    """
    rng = np.random.default_rng(seed)
    fg_tex = sinusoid_texture(_waves(fg_periods, fg_amps, focal_px, fg_depth, rng))
    bg_tex = sinusoid_texture(_waves(bg_periods, bg_amps, focal_px, bg_depth, rng))
    half = fg_halfwidth_px * fg_depth / focal_px
    fg = ScenePlane(depth=fg_depth, texture=fg_tex, extent=(-half, half, -half, half))
    bg = ScenePlane(depth=bg_depth, texture=bg_tex, extent=None)
    return PlanarScene(planes=(fg, bg))


def make_tuple_from_scene(scene, lr_calib, ref_calib, h, w, beta):
    """Render a TrainingTuple: GT from the LR camera at (beta*h, beta*w),
    reference from the reference camera, LR via bicubic 1/beta."""
    gt = render(scene, lr_calib.scaled(beta), beta * h, beta * w)
    ref = render(scene, ref_calib, beta * h, beta * w)
    lr = resample_bicubic(gt, 1.0 / beta)
    return TrainingTuple(
        i_lr=lr, i_ref=ref, c_lr=lr_calib, c_ref=ref_calib,
        i_gt=gt, frame_difference=0,
    )


class StaticTupleSource:
    """Data source that replays a fixed tuple (overfit experiments)."""

    def __init__(self, tuple_, holdout_tuple=None):
        self._tuple = tuple_
        self._holdout = holdout_tuple if holdout_tuple is not None else tuple_

    def sample(self, rng):
        return self._tuple

    def holdout(self):
        return self._holdout


def write_sequence_dataset(root, scene, n_frames, height, width, focal_px,
                           baseline_step, sequence_id="seq0000", bit_depth=8):
    """Render a small camera-trajectory dataset in the sequence-file layout.

    Cameras slide along x in steps of ``baseline_step`` world units; frames
    land in ``root/frames/<sequence_id>/`` and the trajectory in
    ``root/sequences/<sequence_id>.txt``.
    """
    import os

    frames_dir = os.path.join(root, "frames", sequence_id)
    seq_dir = os.path.join(root, "sequences")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(seq_dir, exist_ok=True)
    k = centered_intrinsics(height, width, focal_px)
    lines = [sequence_id]
    for i in range(n_frames):
        calib = look_from_x(k, i * baseline_step)
        img = render(scene, calib, height, width)
        frame_id = 1000 + i
        write_png(os.path.join(frames_dir, f"{frame_id}.png"), img, bit_depth=bit_depth)
        fx, fy = k[0, 0] / width, k[1, 1] / height
        cx, cy = (k[0, 2] + 0.5) / width, (k[1, 2] + 0.5) / height
        pose = np.hstack([calib.rotation, calib.translation[:, None]])
        fields = [str(frame_id), f"{fx:.9f}", f"{fy:.9f}", f"{cx:.9f}", f"{cy:.9f}", "0", "0"]
        fields += [f"{v:.9f}" for v in pose.reshape(-1)]
        lines.append(" ".join(fields))
    path = os.path.join(seq_dir, f"{sequence_id}.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
