"""Camera models, depth-plane sampling, plane-induced homographies and warping.

Conventions used throughout the package:

* pixel centers sit at integer coordinates, ``u`` indexes columns (x) and
  ``v`` indexes rows (y);
* extrinsics are world-to-camera, ``x_cam = R @ X_world + t``;
* intrinsics are expressed in pixels of the image they describe, so a
  calibration must be rescaled (`CameraCalibration.scaled`) before warping
  into a grid of a different resolution;
* depth planes are fronto-parallel to the *target* camera (the view being
  synthesized) and are positioned at positive depths along its optical axis.

All functions are pure; none mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "CameraCalibration",
    "DepthPlaneSet",
    "Homography",
    "PlaneSweepVolume",
    "sample_depth_planes",
    "plane_homography",
    "warp_image",
    "warp_image_tensor",
    "homography_grid",
    "build_plane_sweep_volume",
    "build_plane_sweep_tensor",
]

_ROTATION_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class CameraCalibration:
    """Pinhole camera: intrinsics plus world-to-camera rotation/translation."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if k.shape != (3, 3) or r.shape != (3, 3):
            raise ValueError("intrinsics and rotation must be 3x3")
        if not np.allclose(k, np.triu(k)) or np.any(np.diag(k) <= 0):
            raise ValueError("intrinsics must be upper-triangular with positive diagonal")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ROTATION_TOL:
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def scaled(self, sx, sy=None):
        """Calibration for the same camera after resampling the image by (sx, sy).

        Pixel centers at integers imply ``u_new = sx * u_old + (sx - 1) / 2``.
        """
        if sy is None:
            sy = sx
        s = np.array([
            [sx, 0.0, (sx - 1.0) / 2.0],
            [0.0, sy, (sy - 1.0) / 2.0],
            [0.0, 0.0, 1.0],
        ])
        return CameraCalibration(s @ self.intrinsics, self.rotation, self.translation)

    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True, eq=False)
class DepthPlaneSet:
    """Strictly increasing depths, front to back; endpoints are near and far."""

    depths: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float64)
        if d.ndim != 1 or d.size < 2:
            raise ValueError("need at least 2 depth planes")
        if np.any(d <= 0) or np.any(np.diff(d) <= 0):
            raise ValueError("depths must be positive and strictly increasing")
        if not (np.isclose(d[0], self.near) and np.isclose(d[-1], self.far)):
            raise ValueError("depths must start at near and end at far")
        object.__setattr__(self, "depths", d)

    def __len__(self):
        return self.depths.size

    def __iter__(self):
        return iter(self.depths)


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map from target-view pixels to source-view pixels."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography must be invertible")
        if m[2, 2] != 0:
            m = m / m[2, 2]
        object.__setattr__(self, "matrix", m)

    def inverse(self):
        return Homography(np.linalg.inv(self.matrix))


@dataclass(frozen=True, eq=False)
class PlaneSweepVolume:
    """d source-view images warped onto the target's depth planes, front to back."""

    images: np.ndarray  # (d, H, W, C)
    tag: str = "HR"  # one of {"HR", "LR", "attention"}

    def __post_init__(self):
        imgs = np.asarray(self.images)
        if imgs.ndim != 4:
            raise ValueError("plane sweep volume must be (d, H, W, C)")
        if imgs.min() < -1e-6 or imgs.max() > 1 + 1e-6:
            raise ValueError("plane sweep pixel values must lie in [0, 1]")
        object.__setattr__(self, "images", imgs)

    @property
    def num_planes(self):
        return self.images.shape[0]


def sample_depth_planes(near, far, d):
    """Sample ``d`` depths uniformly in inverse depth between near and far."""
    if not (0 < near < far):
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    if d < 2:
        raise ValueError(f"need at least 2 planes, got {d}")
    inv = np.linspace(1.0 / near, 1.0 / far, int(d))
    depths = 1.0 / inv
    depths[0], depths[-1] = near, far
    return DepthPlaneSet(depths=depths, near=float(near), far=float(far))


def plane_homography(source: CameraCalibration, target: CameraCalibration, depth):
    """Homography induced by the target's fronto-parallel plane at ``depth``.

    Returns H with ``x_source ~ H @ x_target`` for pixels on the plane
    ``z_target = depth``.  Derivation: with relative pose
    ``X_s = R_rel X_t + t_rel`` and plane normal n = (0, 0, 1) in target
    coordinates, points on the plane satisfy ``n^T X_t / depth = 1``, so
    ``H = K_s (R_rel + t_rel n^T / depth) K_t^{-1}``.
    """
    if depth <= 0:
        raise ValueError(f"plane depth must be positive, got {depth}")
    if abs(np.linalg.det(source.intrinsics)) < 1e-12 or abs(np.linalg.det(target.intrinsics)) < 1e-12:
        raise ValueError("singular intrinsics")
    r_rel = source.rotation @ target.rotation.T
    t_rel = source.translation - r_rel @ target.translation
    m = r_rel.copy()
    m[:, 2] += t_rel / depth
    h = source.intrinsics @ m @ np.linalg.inv(target.intrinsics)
    return Homography(h)


def homography_grid(h: Homography, out_height, out_width):
    """Source-view sample coordinates for every pixel of an (out_h, out_w) grid."""
    m = h.matrix
    u, v = np.meshgrid(np.arange(out_width, dtype=np.float64),
                       np.arange(out_height, dtype=np.float64))
    px = m[0, 0] * u + m[0, 1] * v + m[0, 2]
    py = m[1, 0] * u + m[1, 1] * v + m[1, 2]
    pz = m[2, 0] * u + m[2, 1] * v + m[2, 2]
    bad = np.abs(pz) < 1e-12
    pz = np.where(bad, 1.0, pz)
    sx = np.where(bad, -1e9, px / pz)
    sy = np.where(bad, -1e9, py / pz)
    return sx, sy


def warp_image_tensor(image: ad.Tensor, h: Homography, out_height, out_width):
    """Differentiable homography warp of an (N, C, H, W) tensor."""
    sx, sy = homography_grid(h, out_height, out_width)
    return ad.grid_sample_bilinear(image, sx, sy)


def warp_image(image, h: Homography, out_width, out_height):
    """Warp an (H, W, C) or (H, W) image so output pixel p samples the input
    at ``H @ (u, v, 1)``; out-of-bounds samples are zero."""
    img = np.asarray(image)
    if img.size == 0:
        raise ValueError("cannot warp an empty image")
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    t = ad.Tensor(np.ascontiguousarray(img.transpose(2, 0, 1))[None])
    out = warp_image_tensor(t, h, out_height, out_width).data[0].transpose(1, 2, 0)
    return out[:, :, 0] if squeeze else out


def build_plane_sweep_tensor(reference: ad.Tensor, target_calib, ref_calib,
                             planes: DepthPlaneSet, out_size):
    """Differentiable plane sweep: warp ``reference`` (1, C, H, W) onto every
    depth plane of the target view.  Returns a (d, C, out_h, out_w) tensor.

    ``target_calib`` must be expressed at ``out_size`` resolution and
    ``ref_calib`` at the resolution of ``reference``.
    """
    out_h, out_w = out_size
    slices = [
        warp_image_tensor(reference, plane_homography(ref_calib, target_calib, z), out_h, out_w)
        for z in planes
    ]
    return ad.concat(slices, axis=0)


def build_plane_sweep_volume(reference, c_lr: CameraCalibration, c_ref: CameraCalibration,
                             planes: DepthPlaneSet, out_size, tag="HR"):
    """Plane sweep volume of the reference view as seen from the LR view.

    Parameters
    ----------
    reference : (H, W, C) array in [0, 1]
        The high-resolution reference image.
    c_lr : CameraCalibration
        Calibration of the view being synthesized, with intrinsics expressed
        at ``out_size`` resolution (use ``scaled`` to move between scales).
    c_ref : CameraCalibration
        Calibration of ``reference`` at its own resolution.
    planes : DepthPlaneSet
    out_size : (out_height, out_width)
    """
    ref = np.asarray(reference)
    if ref.ndim != 3:
        raise ValueError("reference must be (H, W, C)")
    t = ad.Tensor(np.ascontiguousarray(ref.transpose(2, 0, 1))[None])
    vol = build_plane_sweep_tensor(t, c_lr, c_ref, planes, out_size)
    return PlaneSweepVolume(images=vol.data.transpose(0, 2, 3, 1), tag=tag)
