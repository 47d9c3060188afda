"""The learnable super-resolution pipeline.

The network turns a calibrated low-resolution view plus a high-resolution
reference into a super-resolved multiplane image: a shared feature
extractor embeds the LR image and every plane-sweep slice, a per-pixel
plane attention scores each depth hypothesis, the resulting initial alpha
maps are upsampled under multiscale guidance from the reference, and the
alpha-composited reference detail is fused with the bicubically upsampled
input.  A depth map falls out of the final alphas by argmax.

Two calling conventions exist: ``CrossMPI.run`` works on numpy images and
returns plain arrays/dataclasses, while ``CrossMPI.forward_tensors`` keeps
the whole computation in autodiff tensors for training and gradient tests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .geometry import (DepthPlaneSet, PlaneSweepVolume, build_plane_sweep_tensor,
                       sample_depth_planes)
from .imaging import bicubic_matrix

__all__ = [
    "ModelConfig",
    "AlphaMaps",
    "MultiplaneImage",
    "CrossMPI",
    "plane_aware_attention",
    "compose_sr_mpi",
    "synthesize_transfer",
    "extract_depth",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and scene hyperparameters.

    The full-scale defaults follow the reference training setup (384x768
    LR frames, 32 planes, 8x gap); tests and demos shrink them freely.
    ``attention_scale * 2**guided_levels`` must equal ``beta``: attention
    runs at ``attention_scale`` times the LR resolution and each guided
    level doubles it once more.
    """

    h: int = 384
    w: int = 768
    c: int = 3
    d: int = 32
    beta: int = 8
    c_e: int = 64
    attention_scale: int = 2
    guided_levels: int = 2
    guided_channels: int = 64
    guided_blocks: int = 2
    fusenet_blocks: int = 8
    fusenet_channels: int = 64
    near: float = 1.0
    far: float = 100.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("need at least 2 depth planes")
        if self.beta < 1 or self.beta & (self.beta - 1):
            raise ValueError(f"beta must be a power of two, got {self.beta}")
        if self.attention_scale < 1 or self.guided_levels < 0:
            raise ValueError("attention_scale must be >= 1 and guided_levels >= 0")
        if self.attention_scale * 2 ** self.guided_levels != self.beta:
            raise ValueError(
                f"attention_scale * 2**guided_levels must equal beta "
                f"({self.attention_scale} * 2**{self.guided_levels} != {self.beta})")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, eq=False)
class AlphaMaps:
    """Per-pixel, per-plane occupancy weights; each pixel sums to one."""

    weights: np.ndarray  # (H, W, d)
    scale: str = "SR"  # "attention" or "SR"

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 3:
            raise ValueError("alpha maps must be (H, W, d)")
        if w.min() < -1e-6 or w.max() > 1 + 1e-6:
            raise ValueError("alpha weights must lie in [0, 1]")
        sums = w.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > 1e-5:
            raise ValueError("alpha weights must sum to 1 over planes")
        object.__setattr__(self, "weights", w)

    @property
    def num_planes(self):
        return self.weights.shape[2]


@dataclass(frozen=True, eq=False)
class MultiplaneImage:
    """d RGBA layers: plane-sweep colors plus the super-resolved alphas."""

    colors: np.ndarray  # (d, H, W, c)
    alphas: np.ndarray  # (H, W, d)

    def __post_init__(self):
        c = np.asarray(self.colors)
        a = np.asarray(self.alphas)
        if c.ndim != 4 or a.ndim != 3 or c.shape[0] != a.shape[2]:
            raise ValueError("colors must be (d, H, W, c) and alphas (H, W, d)")
        if c.shape[1:3] != a.shape[:2]:
            raise ValueError("colors and alphas must share spatial size")

    @property
    def num_planes(self):
        return self.colors.shape[0]


def plane_aware_attention_tensors(f_lr: Tensor, fv: Tensor):
    """Per-pixel plane scores and softmax over planes, as batched matmuls.

    ``f_lr`` is (1, c_e, H, W) and ``fv`` is (d, c_e, H, W).  Pixels form
    the batch dimension: scores are an (n, 1, c_e) x (n, c_e, d) product,
    so memory stays O(n*d) and no pixel-by-pixel similarity matrix exists.
    Returns (alphas (1, d, H, W), audit tuple of intermediate shapes).
    """
    _, c_e, h, w = f_lr.shape
    d = fv.shape[0]
    if fv.shape[1] != c_e or fv.shape[2:] != (h, w):
        raise ValueError(f"feature volume {fv.shape} does not match features {f_lr.shape}")
    n = h * w
    f_flat = f_lr.transpose((0, 2, 3, 1)).reshape(n, 1, c_e)
    fv_flat = fv.transpose((2, 3, 1, 0)).reshape(n, c_e, d)
    scores = ad.matmul(f_flat, fv_flat)          # (n, 1, d)
    alphas = ad.softmax(scores, axis=2)
    out = alphas.reshape(h, w, 1, d).transpose((2, 3, 0, 1))
    audit = (f_flat.shape, fv_flat.shape, scores.shape)
    return out, audit


def plane_aware_attention(f_lr, fv):
    """Numpy-facing wrapper: f_lr (H, W, c_e), fv (H, W, c_e, d) -> (H, W, d)."""
    f = np.asarray(f_lr)
    v = np.asarray(fv)
    if f.ndim != 3 or v.ndim != 4 or v.shape[:2] != f.shape[:2] or v.shape[2] != f.shape[2]:
        raise ValueError(f"shape mismatch: features {f.shape}, volume {v.shape}")
    ft = Tensor(np.ascontiguousarray(f.transpose(2, 0, 1))[None])
    vt = Tensor(np.ascontiguousarray(v.transpose(3, 2, 0, 1)))
    out, _ = plane_aware_attention_tensors(ft, vt)
    return AlphaMaps(weights=out.data[0].transpose(1, 2, 0), scale="attention")


def composite_planes_tensors(colors: Tensor, alphas: Tensor):
    """Weighted sum of plane colors: colors (d, c, H, W), alphas (1, d, H, W)."""
    weighted = colors * alphas.transpose((1, 0, 2, 3))
    return weighted.sum(axis=0).reshape(1, *colors.shape[1:])


def compose_sr_mpi(psv_hr: PlaneSweepVolume, a: AlphaMaps):
    """Pair the HR plane-sweep colors with super-resolved alphas."""
    if psv_hr.images.shape[:3] != (a.num_planes, *a.weights.shape[:2]):
        raise ValueError(
            f"plane sweep {psv_hr.images.shape} does not match alphas {a.weights.shape}")
    return MultiplaneImage(colors=psv_hr.images, alphas=a.weights)


def synthesize_transfer(mpi: MultiplaneImage):
    """Alpha-composite the MPI into the transferred HR image (H, W, c)."""
    return np.einsum("dhwc,hwd->hwc", mpi.colors, mpi.alphas)


def extract_depth(a, planes: DepthPlaneSet):
    """Depth of the strongest plane per pixel; ties choose the nearest plane.

    ``a`` is an AlphaMaps or an (H, W, d) array; returns (H, W, 1).
    """
    weights = a.weights if isinstance(a, AlphaMaps) else np.asarray(a)
    if weights.shape[2] != len(planes):
        raise ValueError(f"{weights.shape[2]} alpha planes vs {len(planes)} depths")
    idx = np.argmax(weights, axis=2)
    return planes.depths[idx][:, :, None]


class SharedFeatureExtractor(nn.Module):
    """Stem conv, residual dilated-pyramid block, then a plain residual block."""

    def __init__(self, c_in, c_e, rng, dtype):
        super().__init__()
        self.stem = nn.Conv2d(c_in, c_e, rng=rng, dtype=dtype)
        self.aspp = nn.ResASPP(c_e, rng=rng, dtype=dtype)
        self.res = nn.ResBlock(c_e, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.res(self.aspp(ad.leaky_relu(self.stem(x), nn.LEAKY_SLOPE)))


class GuidedUpsampler(nn.Module):
    """Coarse-to-fine alpha upsampling guided by the HR reference.

    The guidance pyramid starts from the channel concat of the upsampled LR
    image and the HR plane sweep, projected to the working width; each
    descent applies residual blocks then a nearest 2x downsample.  The
    alpha branch starts from the initial attention alphas, and each ascent
    concatenates the matching-resolution guidance, applies residual blocks,
    and nearest-upsamples 2x.  The head concatenates the finest guidance,
    applies residual blocks, projects to d channels with a 1x1 conv, and
    renormalizes with a per-pixel softmax over planes.
    """

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        g = cfg.guided_channels
        guidance_ch = cfg.c * (1 + cfg.d)
        self.levels = cfg.guided_levels
        self.stem = nn.Conv2d(guidance_ch, g, rng=rng, dtype=dtype)
        self.guide_res = nn.ModuleList(
            nn.ModuleList(nn.ResBlock(g, rng, dtype) for _ in range(cfg.guided_blocks))
            for _ in range(cfg.guided_levels))
        self.alpha_in = nn.ModuleList(
            nn.Conv2d((cfg.d if l == 0 else g) + g, g, rng=rng, dtype=dtype)
            for l in range(cfg.guided_levels))
        self.alpha_res = nn.ModuleList(
            nn.ModuleList(nn.ResBlock(g, rng, dtype) for _ in range(cfg.guided_blocks))
            for _ in range(cfg.guided_levels))
        self.head_in = nn.Conv2d((cfg.d if cfg.guided_levels == 0 else g) + g, g,
                                 rng=rng, dtype=dtype)
        self.head_res = nn.ModuleList(
            nn.ResBlock(g, rng, dtype) for _ in range(cfg.guided_blocks))
        self.head_proj = nn.Conv2d(g, cfg.d, kernel=1, rng=rng, dtype=dtype)

    def forward(self, a_init: Tensor, i_lr_up: Tensor, psv_hr: Tensor):
        d, c, hh, ww = psv_hr.shape
        guidance = ad.concat([i_lr_up, psv_hr.reshape(1, d * c, hh, ww)], axis=1)
        g = ad.leaky_relu(self.stem(guidance), nn.LEAKY_SLOPE)
        pyramid = [g]  # finest (level L) first
        for level in range(self.levels):
            for block in self.guide_res[level]:
                g = block(g)
            g = ad.nearest_down2(g)
            pyramid.append(g)
        pyramid.reverse()  # pyramid[l] is guidance at level l (0 = coarsest)

        a = a_init
        for level in range(self.levels):
            a = ad.concat([a, pyramid[level]], axis=1)
            a = ad.leaky_relu(self.alpha_in[level](a), nn.LEAKY_SLOPE)
            for block in self.alpha_res[level]:
                a = block(a)
            a = ad.nearest_up2(a)
        a = ad.concat([a, pyramid[self.levels]], axis=1)
        a = ad.leaky_relu(self.head_in(a), nn.LEAKY_SLOPE)
        for block in self.head_res:
            a = block(a)
        return ad.softmax(self.head_proj(a), axis=1)


class FuseNet(nn.Module):
    """Cascaded residual fusion of the transferred detail with the LR upsample.

    The final projection is zero-initialized, so an untrained network
    returns exactly the bicubically upsampled input.
    """

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        f = cfg.fusenet_channels
        self.head = nn.Conv2d(2 * cfg.c, f, rng=rng, dtype=dtype)
        self.blocks = nn.ModuleList(
            nn.ResBlock(f, rng, dtype) for _ in range(cfg.fusenet_blocks))
        self.proj = nn.Conv2d(f, cfg.c, rng=rng, dtype=dtype, zero_init=True)

    def forward(self, t_ref: Tensor, i_lr_up: Tensor):
        if t_ref.shape != i_lr_up.shape:
            raise ValueError(f"shape mismatch: {t_ref.shape} vs {i_lr_up.shape}")
        x = ad.leaky_relu(self.head(ad.concat([t_ref, i_lr_up], axis=1)), nn.LEAKY_SLOPE)
        for block in self.blocks:
            x = block(x)
        return self.proj(x) + i_lr_up


class _PsvCache:
    """Per-tuple memo of plane sweep tensors (they are constants of the
    optimization, so rebuilding them every iteration is pure waste).
    Entries are keyed by tuple identity and evicted when the tuple dies."""

    def __init__(self):
        self._store = {}

    def get(self, tup, scale_key, build):
        import weakref

        key = id(tup)
        entry = self._store.get(key)
        if entry is None:
            entry = {}
            self._store[key] = entry
            weakref.finalize(tup, self._store.pop, key, None)
        if scale_key not in entry:
            entry[scale_key] = build()
        return entry[scale_key]


class CrossMPI(nn.Module):
    """Full pipeline; see module docstring.  Parameters split into the three
    trainable groups ``sfe.*``, ``guided.*`` and ``fuse.*``."""

    def __init__(self, config: ModelConfig, seed=0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        dtype = config.np_dtype
        self.sfe = SharedFeatureExtractor(config.c, config.c_e, rng, dtype)
        self.guided = GuidedUpsampler(config, rng, dtype)
        self.fuse = FuseNet(config, rng, dtype)
        self._psv_cache = _PsvCache()

    # -- persistence --------------------------------------------------------

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_arrays(self, arrays):
        params = self.parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    # -- numpy-facing wrappers -------------------------------------------------

    def features(self, image):
        """Shared feature extractor on an (H, W, c) image -> (H, W, c_e)."""
        img = np.asarray(image, dtype=self.config.np_dtype)
        if img.ndim != 3 or img.shape[2] != self.config.c:
            raise ValueError(f"expected (H, W, {self.config.c}) image, got {img.shape}")
        t = Tensor(np.ascontiguousarray(img.transpose(2, 0, 1))[None])
        return self.sfe(t).data[0].transpose(1, 2, 0)

    def feature_volume(self, psv: PlaneSweepVolume):
        """Plane-wise shared features of a sweep -> (H, W, c_e, d), plane order kept."""
        imgs = np.asarray(psv.images, dtype=self.config.np_dtype)
        t = Tensor(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2)))
        out = self.sfe(t).data  # (d, c_e, H, W)
        return out.transpose(2, 3, 1, 0)

    # -- resampling helpers ---------------------------------------------------

    def _resize(self, x: Tensor, out_h, out_w, clamp=True):
        h, w = x.shape[2], x.shape[3]
        if (h, w) == (out_h, out_w):
            return x
        y = ad.resize_separable(x, bicubic_matrix(h, out_h), bicubic_matrix(w, out_w))
        return ad.clamp(y, 0.0, 1.0) if clamp else y

    # -- forward --------------------------------------------------------------

    def forward_tensors(self, tup, upto="full", lr_requires_grad=False, clamp_output=False):
        """Run the pipeline on a TrainingTuple, staying in autodiff tensors.

        ``upto``: "attention" stops after the initial alphas (stage-1
        training), "transfer" stops after the transferred HR image
        (stage 2), "full" adds fusion.  Returns a dict with every
        intermediate a loss may need; ``depth`` is a plain array.
        """
        cfg = self.config
        dtype = cfg.np_dtype
        h, w = tup.i_lr.shape[:2]
        if tup.i_lr.shape[2] != cfg.c:
            raise ValueError(f"expected {cfg.c} channels, got {tup.i_lr.shape[2]}")
        if tup.beta != cfg.beta:
            raise ValueError(f"tuple has beta={tup.beta}, config beta={cfg.beta}")
        s_a = cfg.attention_scale
        hr_h, hr_w = cfg.beta * h, cfg.beta * w

        planes = sample_depth_planes(cfg.near, cfg.far, cfg.d)
        lr = Tensor(np.ascontiguousarray(tup.i_lr.transpose(2, 0, 1), dtype=dtype)[None],
                    requires_grad=lr_requires_grad)
        ref = Tensor(np.ascontiguousarray(tup.i_ref.transpose(2, 0, 1), dtype=dtype)[None])

        i_lr_up = self._resize(lr, hr_h, hr_w)
        i_lr_att = self._resize(lr, s_a * h, s_a * w)
        psv_att = self._psv_cache.get(tup, ("att", s_a * h, s_a * w), lambda: (
            build_plane_sweep_tensor(
                ref, tup.c_lr.scaled(s_a), tup.c_ref, planes, (s_a * h, s_a * w))))

        f_lr = self.sfe(i_lr_att)
        fv = self.sfe(psv_att)
        a_init, audit = plane_aware_attention_tensors(f_lr, fv)

        out = {
            "planes": planes, "a_init": a_init, "psv_att": psv_att,
            "i_lr": lr, "i_lr_att": i_lr_att, "i_lr_up": i_lr_up,
            "attention_audit": audit,
        }
        if upto == "attention":
            return out

        psv_hr = self._psv_cache.get(tup, ("hr", hr_h, hr_w), lambda: (
            build_plane_sweep_tensor(
                ref, tup.c_lr.scaled(cfg.beta), tup.c_ref, planes, (hr_h, hr_w))))
        alphas = self.guided(a_init, i_lr_up, psv_hr)
        t_ref = composite_planes_tensors(psv_hr, alphas)
        out.update({"psv_hr": psv_hr, "alphas": alphas, "t_ref": t_ref})
        out["depth"] = extract_depth(alphas.data[0].transpose(1, 2, 0), planes)
        if upto == "transfer":
            return out

        i_sr = self.fuse(t_ref, i_lr_up)
        if clamp_output:
            i_sr = ad.clamp(i_sr, 0.0, 1.0)
        out["i_sr"] = i_sr
        return out

    def run(self, tup):
        """Inference on numpy images; returns a dict of arrays and dataclasses."""
        res = self.forward_tensors(tup, upto="full", clamp_output=True)
        alphas = res["alphas"].data[0].transpose(1, 2, 0)
        a_init = res["a_init"].data[0].transpose(1, 2, 0)
        return {
            "i_sr": res["i_sr"].data[0].transpose(1, 2, 0),
            "t_ref": np.clip(res["t_ref"].data[0].transpose(1, 2, 0), 0.0, 1.0),
            "alphas": AlphaMaps(weights=alphas, scale="SR"),
            "a_init": AlphaMaps(weights=a_init, scale="attention"),
            "depth": res["depth"],
            "planes": res["planes"],
            "psv_hr": PlaneSweepVolume(
                images=np.clip(res["psv_hr"].data.transpose(0, 2, 3, 1), 0.0, 1.0), tag="HR"),
            "i_lr_up": res["i_lr_up"].data[0].transpose(1, 2, 0),
        }
