"""Three-stage training: optimizer, schedule, logging and checkpoint cadence.

Stage 1 trains the feature extractor (and thereby the plane attention) with
the internal supervision loss alone; stage 2 adds the guided upsampler,
supervised by L1 between the transferred HR image and the ground truth plus
the internal term; stage 3 unfreezes the fusion network and optimizes the
full weighted loss.  Runs are deterministic given a seed and a single data
worker; checkpoints carry parameters, optimizer state, progress counters
and the random generator state, so a resumed run continues bit-exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from .data import Checkpoint, save_checkpoint
from .errors import ScheduleError, TrainingDiverged
from .imaging import psnr
from .losses import (LossWeights, internal_supervision_loss, perceptual_loss,
                     reconstruction_loss, total_loss)

__all__ = [
    "StageSettings",
    "TrainSchedule",
    "Adam",
    "run_stage",
    "run_schedule",
    "STAGE_PARAM_PREFIXES",
]

STAGE_PARAM_PREFIXES = {1: ("sfe",), 2: ("sfe", "guided"), 3: ("sfe", "guided", "fuse")}
_STAGE_UPTO = {1: "attention", 2: "transfer", 3: "full"}


@dataclass(frozen=True)
class StageSettings:
    iterations: int
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 1
    log_every: int = 100

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iteration count must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass(frozen=True)
class TrainSchedule:
    """Per-stage settings; desk-scale iteration counts by default."""

    stage1: StageSettings = StageSettings(2000)
    stage2: StageSettings = StageSettings(1000)
    stage3: StageSettings = StageSettings(2000)

    @classmethod
    def full_scale(cls):
        """Iteration counts for a full training run on a large dataset."""
        return cls(stage1=StageSettings(816200), stage2=StageSettings(326000),
                   stage3=StageSettings(472000))

    def stage(self, n):
        try:
            return {1: self.stage1, 2: self.stage2, 3: self.stage3}[n]
        except KeyError:
            raise ScheduleError(f"stage must be 1, 2 or 3, got {n}") from None

    def to_dict(self):
        return {f"stage{i}": asdict(self.stage(i)) for i in (1, 2, 3)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: StageSettings(**v) for k, v in d.items()})


class Adam(object):
    """Adaptive-moment gradient descent over a named parameter table."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(sorted(params.items()))
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        out = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name].copy()
            out[f"v.{name}"] = self.v[name].copy()
        return out

    def load_state_arrays(self, arrays, t):
        for name in self.params:
            self.m[name] = np.array(arrays[f"m.{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.array(arrays[f"v.{name}"], dtype=self.v[name].dtype)
        self.t = int(t)


class _GtFeatureCache:
    """Per-tuple memo of ground-truth perceptual activations (constants)."""

    def __init__(self, backbone):
        self.backbone = backbone
        self._store = {}

    def get(self, tup):
        import weakref

        from .autodiff import Tensor

        key = id(tup)
        if key not in self._store:
            dtype = next(iter(self.backbone.parameters().values())).data.dtype
            gt = Tensor(np.ascontiguousarray(tup.i_gt.transpose(2, 0, 1), dtype=dtype)[None])
            self._store[key] = self.backbone.features(gt)
            weakref.finalize(tup, self._store.pop, key, None)
        return self._store[key]


def _stage_losses(stage, model, tup, weights, backbone, gt_cache=None):
    out = model.forward_tensors(tup, upto=_STAGE_UPTO[stage])
    l_is = internal_supervision_loss(out["psv_att"], out["a_init"], out["i_lr_att"])
    comps = {"loss_is": float(l_is.data)}
    if stage == 1:
        total = l_is
    elif stage == 2:
        l_warp = reconstruction_loss(out["t_ref"], tup.i_gt)
        comps["loss_warp"] = float(l_warp.data)
        total = l_warp + l_is * weights.lambda_is
    else:
        gt_feats = gt_cache.get(tup) if gt_cache is not None else None
        l_rec = reconstruction_loss(out["i_sr"], tup.i_gt)
        l_per = perceptual_loss(out["i_sr"], tup.i_gt, backbone, gt_features=gt_feats)
        comps["loss_rec"] = float(l_rec.data)
        comps["loss_per"] = float(l_per.data)
        total = total_loss(l_rec, l_per, l_is, weights)
    comps["loss_total"] = float(total.data)
    return total, comps, out


def _holdout_psnr(stage, model, tup):
    out = model.forward_tensors(tup, upto=_STAGE_UPTO[stage])
    if stage == 1:
        composite = np.einsum("dchw,dhw->chw", out["psv_att"].data,
                              out["a_init"].data[0])
        return psnr(composite.transpose(1, 2, 0), out["i_lr_att"].data[0].transpose(1, 2, 0))
    key = "t_ref" if stage == 2 else "i_sr"
    pred = np.clip(out[key].data[0].transpose(1, 2, 0), 0.0, 1.0)
    return psnr(pred, tup.i_gt)


def _dump_diagnostics(out_dir, model, tup, stage, iteration):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"diverged_stage{stage}_iter{iteration}.ckpt")
    dump = Checkpoint(
        config=model.config.to_dict(),
        params={"i_lr": tup.i_lr, "i_ref": tup.i_ref, "i_gt": tup.i_gt},
        stage=stage, iteration=iteration,
        meta={"reason": "non-finite loss"},
    )
    save_checkpoint(dump, path)
    return path


def make_checkpoint(model, adam, stage, iteration, rng, completed, extra_meta=None):
    meta = {"completed": bool(completed), "adam_t": adam.t if adam else 0}
    if extra_meta:
        meta.update(extra_meta)
    return Checkpoint(
        config=model.config.to_dict(),
        params=model.state_arrays(),
        optimizer=adam.state_arrays() if adam else {},
        stage=stage,
        iteration=iteration,
        rng_state=rng.bit_generator.state,
        meta=meta,
    )


def run_stage(model, stage, schedule: TrainSchedule, source, weights: LossWeights,
              backbone=None, seed=0, prev: Checkpoint | None = None,
              log_path=None, out_dir=None, checkpoint_every=None):
    """Run one training stage to completion and return its checkpoint.

    ``prev`` must be the completed checkpoint of stage - 1 (for stages 2 and
    3), or an incomplete checkpoint of this same stage to resume it.  The
    returned history is a list of the logged records.
    """
    settings = schedule.stage(stage)
    if stage == 3 and backbone is None:
        raise ScheduleError("stage 3 needs a perceptual backbone")

    start_iter = 0
    resume = False
    if prev is not None:
        if prev.stage == stage and not prev.meta.get("completed", False):
            resume = True
            start_iter = prev.iteration
        elif prev.stage == stage - 1:
            if not prev.meta.get("completed", False):
                raise ScheduleError(
                    f"stage {stage} needs a completed stage {stage - 1} checkpoint")
        else:
            raise ScheduleError(
                f"stage {stage} cannot start from a stage {prev.stage} checkpoint")
        model.load_state_arrays(prev.params)
    elif stage > 1:
        raise ScheduleError(f"stage {stage} requires the stage {stage - 1} checkpoint")

    params = model.parameters()
    prefixes = STAGE_PARAM_PREFIXES[stage]
    trainable = {}
    for name, p in params.items():
        live = name.startswith(tuple(f"{pre}." for pre in prefixes))
        p.requires_grad = live
        if live:
            trainable[name] = p
    adam = Adam(trainable, settings.learning_rate, settings.beta1, settings.beta2)

    # a single random stream runs through the whole schedule: fresh stages
    # continue from the previous stage's saved state, resumes restore it
    rng = np.random.default_rng(seed)
    if prev is not None and prev.rng_state:
        rng.bit_generator.state = prev.rng_state
    if resume:
        adam.load_state_arrays(prev.optimizer, prev.meta.get("adam_t", start_iter))

    history = []
    gt_cache = _GtFeatureCache(backbone) if (stage == 3 and backbone is not None) else None
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for it in range(start_iter, settings.iterations):
            model.zero_grad()
            comps_acc = None
            for _ in range(settings.batch_size):
                tup = source.sample(rng)
                total, comps, _ = _stage_losses(stage, model, tup, weights, backbone,
                                                gt_cache=gt_cache)
                if not np.isfinite(total.data):
                    dump_dir = out_dir or "."
                    path = _dump_diagnostics(dump_dir, model, tup, stage, it)
                    raise TrainingDiverged(
                        f"non-finite loss at stage {stage} iteration {it}; "
                        f"offending batch dumped to {path}", dump_path=path)
                (total * (1.0 / settings.batch_size)).backward()
                comps_acc = comps if comps_acc is None else {
                    k: comps_acc[k] + v for k, v in comps.items()}
            adam.step()
            done = it + 1
            if done % settings.log_every == 0 or done == settings.iterations:
                record = {"stage": stage, "iteration": done}
                record.update({k: v / settings.batch_size for k, v in comps_acc.items()})
                record["psnr_holdout"] = _holdout_psnr(stage, model, source.holdout())
                history.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                    log_fh.flush()
            if checkpoint_every and out_dir and done % checkpoint_every == 0 \
                    and done < settings.iterations:
                ck = make_checkpoint(model, adam, stage, done, rng, completed=False)
                save_checkpoint(ck, os.path.join(out_dir, f"stage{stage}_iter{done}.ckpt"))
    finally:
        if log_fh:
            log_fh.close()

    final = make_checkpoint(model, adam, stage, settings.iterations, rng, completed=True)
    return final, history


def run_schedule(model, schedule: TrainSchedule, source, weights: LossWeights,
                 backbone=None, seed=0, out_dir=None, log_path=None,
                 checkpoint_every=None):
    """Run stages 1 to 3 in order, saving one checkpoint per stage."""
    prev = None
    history = []
    for stage in (1, 2, 3):
        prev, h = run_stage(model, stage, schedule, source, weights, backbone,
                            seed=seed, prev=prev,
                            log_path=log_path, out_dir=out_dir,
                            checkpoint_every=checkpoint_every)
        history.extend(h)
        if out_dir:
            save_checkpoint(prev, os.path.join(out_dir, f"stage{stage}.ckpt"))
    if out_dir:
        save_checkpoint(prev, os.path.join(out_dir, "final.ckpt"))
    return prev, history
