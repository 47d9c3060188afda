"""Training losses: L1 reconstruction, frozen-backbone perceptual distance,
and the internal supervision term that anchors the initial alpha maps.

Every loss accepts either numpy images (H, W, C) or autodiff tensors
(N, C, H, W); the tensor path participates in backpropagation.  Totals are
the weighted sum with defaults (1, 1, 0.2).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import load_checkpoint
from .geometry import PlaneSweepVolume
from .model import AlphaMaps

__all__ = [
    "LossWeights",
    "PerceptualBackbone",
    "reconstruction_loss",
    "perceptual_loss",
    "internal_supervision_loss",
    "total_loss",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    lambda_per: float = 1.0
    lambda_is: float = 0.2

    def __post_init__(self):
        if min(self.lambda_rec, self.lambda_per, self.lambda_is) < 0:
            raise ValueError("loss weights must be nonnegative")


def _to_nchw_tensor(img, dtype=None):
    """Coerce an (H, W, C) array or an (N, C, H, W) tensor to a tensor."""
    if isinstance(img, Tensor):
        return img, True
    arr = np.asarray(img)
    if dtype is not None:
        arr = arr.astype(dtype)
    if arr.ndim != 3:
        raise ValueError("numpy images must be (H, W, C)")
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1))[None]), False


def _match_shapes(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def reconstruction_loss(i_sr, i_gt):
    """Mean absolute difference over all pixels and channels."""
    sr, sr_is_tensor = _to_nchw_tensor(i_sr)
    gt, _ = _to_nchw_tensor(i_gt, dtype=sr.dtype)
    _match_shapes(sr, gt, "reconstruction_loss")
    loss = (sr - gt.detach()).abs().mean()
    return loss if sr_is_tensor else loss.item()


class PerceptualBackbone(nn.Module):
    """Frozen five-stage convolutional feature extractor.

    The architecture mirrors the classic 19-layer recognition network up to
    the second convolution of each stage (the usual perceptual tap points);
    the stage widths are configurable so desk-scale runs can use a thin
    stack.  Weights load from a named-tensor file when available; otherwise
    a fixed-seed random initialization is used, which leaves the loss
    contract (layer weighting, norms, gradient flow) intact.
    """

    def __init__(self, channels=(64, 128, 256, 512, 512), c_in=3,
                 weights_path=None, seed=1234, dtype=np.float32,
                 post_activation=True):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.post_activation = post_activation
        self.stages = nn.ModuleList()
        prev = c_in
        for width in channels:
            stage = nn.Module()
            stage.conv_a = nn.Conv2d(prev, width, rng=rng, dtype=dtype)
            stage.conv_b = nn.Conv2d(width, width, rng=rng, dtype=dtype)
            self.stages.append(stage)
            prev = width
        if weights_path is not None and not os.path.exists(weights_path):
            log.warning("perceptual backbone: weights file %s not found; "
                        "falling back to the fixed-seed random frozen backbone",
                        weights_path)
            weights_path = None
        if weights_path is not None:
            state = load_checkpoint(weights_path)
            table = self.parameters()
            for name, arr in state.params.items():
                if name not in table:
                    raise ValueError(f"backbone weights: unexpected tensor {name!r}")
                if tuple(arr.shape) != table[name].data.shape:
                    raise ValueError(f"backbone weights: {name} has shape {arr.shape}, "
                                     f"expected {table[name].data.shape}")
                table[name].data = arr.astype(dtype)
        else:
            log.warning("perceptual backbone: no weights file given; "
                        "using the fixed-seed random frozen backbone")
        for p in self.parameters().values():
            p.requires_grad = False

    def features(self, x: Tensor):
        """Tap activations, one per stage, for an (N, C, H, W) tensor in [0, 1]."""
        feats = []
        for i, stage in enumerate(self.stages):
            x = ad.leaky_relu(stage.conv_a(x), 0.0)
            x = stage.conv_b(x)
            if self.post_activation:
                x = ad.leaky_relu(x, 0.0)
            feats.append(x)
            if i + 1 < len(self.stages):
                tap = ad.leaky_relu(x, 0.0) if not self.post_activation else x
                x = ad.maxpool2(tap)
        return feats


def perceptual_loss(i_sr, i_gt, backbone: PerceptualBackbone, gt_features=None):
    """Sum over tap layers of (1 / neuron count) * L1 distance of activations.

    Gradients flow into ``i_sr`` only; the ground-truth branch and the
    backbone are constants.  ``gt_features`` may carry precomputed target
    activations (they are reused across iterations when overfitting).
    """
    sr, sr_is_tensor = _to_nchw_tensor(i_sr)
    gt, _ = _to_nchw_tensor(i_gt, dtype=sr.dtype)
    _match_shapes(sr, gt, "perceptual_loss")
    feats_sr = backbone.features(sr)
    feats_gt = gt_features if gt_features is not None else backbone.features(gt.detach())
    loss = None
    batch = sr.shape[0]
    for fs, fg in zip(feats_sr, feats_gt):
        lam = 1.0 / (fs.size // batch)
        term = (fs - fg.detach()).abs().sum() * lam
        loss = term if loss is None else loss + term
    return loss if sr_is_tensor else loss.item()


def internal_supervision_loss(psv_att, a_init, i_lr_att):
    """L1 between the LR image and the alpha-composited attention-scale sweep.

    The composite is the per-pixel batched product of the (n, c, d) plane
    colors with the (n, d, 1) alphas.  Accepts tensors ((d, c, H, W),
    (1, d, H, W), (1, c, H, W)) or their numpy counterparts
    ((d, H, W, c) / PlaneSweepVolume, (H, W, d) / AlphaMaps, (H, W, c)).
    """
    tensor_call = isinstance(a_init, Tensor)
    if tensor_call:
        psv, alphas, lr = psv_att, a_init, i_lr_att
    else:
        psv_arr = psv_att.images if isinstance(psv_att, PlaneSweepVolume) else np.asarray(psv_att)
        a_arr = a_init.weights if isinstance(a_init, AlphaMaps) else np.asarray(a_init)
        psv = Tensor(np.ascontiguousarray(psv_arr.transpose(0, 3, 1, 2)))
        alphas = Tensor(np.ascontiguousarray(a_arr.transpose(2, 0, 1))[None])
        lr, _ = _to_nchw_tensor(np.asarray(i_lr_att), dtype=psv.dtype)
    d, c, h, w = psv.shape
    if alphas.shape != (1, d, h, w) or lr.shape != (1, c, h, w):
        raise ValueError(
            f"shape mismatch: psv {psv.shape}, alphas {alphas.shape}, lr {lr.shape}")
    n = h * w
    colors = psv.transpose((2, 3, 1, 0)).reshape(n, c, d)
    weights = alphas.transpose((2, 3, 1, 0)).reshape(n, d, 1)
    composite = ad.matmul(colors, weights)                   # (n, c, 1)
    target = lr.detach().transpose((2, 3, 1, 0)).reshape(n, c, 1)
    loss = (composite - target).abs().mean()
    return loss if tensor_call else loss.item()


def total_loss(rec, per, is_, weights: LossWeights):
    """Weighted sum of the three loss components."""
    parts = []
    for name, value in (("rec", rec), ("per", per), ("is", is_)):
        v = value.data if isinstance(value, Tensor) else value
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite {name} loss component")
        parts.append(value)
    return (parts[0] * weights.lambda_rec + parts[1] * weights.lambda_per
            + parts[2] * weights.lambda_is)
