"""Command line surface: train, infer, eval and debug-psv.

Configuration is a JSON file with ``model``, ``schedule``, ``loss_weights``,
``backbone`` and ``data`` sections; unknown keys anywhere are rejected
before any work starts.  The data root may come from the config or from the
``CROSSMPI_DATA_ROOT`` environment variable.  All commands validate their
inputs fully before touching the filesystem.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .data import (TrainingTuple, assemble_tuple, load_checkpoint,
                   load_optical_zoom_pair, parse_sequence_file, read_png, write_png)
from .errors import CrossMPIError, ParseError
from .geometry import CameraCalibration, sample_depth_planes, build_plane_sweep_volume
from .imaging import psnr, resample_bicubic, ssim
from .losses import LossWeights, PerceptualBackbone
from .model import CrossMPI, ModelConfig
from .trainer import TrainSchedule, run_schedule
from . import synthetic

DATA_ROOT_ENV = "CROSSMPI_DATA_ROOT"

_EXIT_OK = 0
_EXIT_ERROR = 1
_EXIT_USAGE = 2


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_TOP_KEYS = {"model", "schedule", "loss_weights", "backbone", "data",
             "out_dir", "seed", "checkpoint_every"}
_BACKBONE_KEYS = {"channels", "weights_path", "seed"}
_DATA_KEYS = {"kind", "root", "scene", "frame_diff_min", "frame_diff_max",
              "holdout_fraction"}
_SCENE_KEYS = {"fg_plane_index", "bg_plane_index", "focal_lr", "baseline",
               "fg_halfwidth_px", "seed"}


def _reject_unknown(d, allowed, context):
    unknown = set(d) - allowed
    if unknown:
        raise ParseError(f"{context}: unknown keys {sorted(unknown)}")


class RunConfig:
    """Validated training configuration."""

    def __init__(self, raw, base_dir="."):
        if not isinstance(raw, dict):
            raise ParseError("config root must be a JSON object")
        _reject_unknown(raw, _TOP_KEYS, "config")
        try:
            self.model = ModelConfig.from_dict(raw.get("model", {}))
        except TypeError as exc:
            raise ParseError(f"config.model: {exc}") from None
        try:
            self.schedule = (TrainSchedule.from_dict(raw["schedule"])
                             if "schedule" in raw else TrainSchedule())
        except TypeError as exc:
            raise ParseError(f"config.schedule: {exc}") from None
        try:
            self.loss_weights = LossWeights(**raw.get("loss_weights", {}))
        except TypeError as exc:
            raise ParseError(f"config.loss_weights: {exc}") from None
        backbone = dict(raw.get("backbone", {}))
        _reject_unknown(backbone, _BACKBONE_KEYS, "config.backbone")
        self.backbone_channels = tuple(backbone.get("channels", (16, 24, 32, 32, 32)))
        self.backbone_weights = backbone.get("weights_path")
        if self.backbone_weights and not os.path.isabs(self.backbone_weights):
            self.backbone_weights = os.path.join(base_dir, self.backbone_weights)
        self.backbone_seed = int(backbone.get("seed", 1234))
        data = dict(raw.get("data", {"kind": "synthetic"}))
        _reject_unknown(data, _DATA_KEYS, "config.data")
        self.data_kind = data.get("kind", "synthetic")
        if self.data_kind not in ("synthetic", "sequences", "optical_zoom"):
            raise ParseError(f"config.data.kind must be synthetic, sequences or "
                             f"optical_zoom, got {self.data_kind!r}")
        root = data.get("root", os.environ.get(DATA_ROOT_ENV))
        self.data_root = os.path.join(base_dir, root) if root and not os.path.isabs(root) \
            else root
        if self.data_kind != "synthetic" and not self.data_root:
            raise ParseError("config.data.root (or CROSSMPI_DATA_ROOT) is required "
                             f"for kind {self.data_kind!r}")
        scene = dict(data.get("scene", {}))
        _reject_unknown(scene, _SCENE_KEYS, "config.data.scene")
        self.scene = scene
        self.frame_diff_min = int(data.get("frame_diff_min", 1))
        self.frame_diff_max = int(data.get("frame_diff_max", 10))
        self.out_dir = raw.get("out_dir")
        self.seed = int(raw.get("seed", 0))
        self.checkpoint_every = raw.get("checkpoint_every")

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ParseError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from exc
        return cls(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def _synthetic_source(cfg: RunConfig):
    m = cfg.model
    planes = sample_depth_planes(m.near, m.far, m.d)
    scene_cfg = cfg.scene
    fg_i = int(scene_cfg.get("fg_plane_index", max(0, m.d // 4)))
    bg_i = int(scene_cfg.get("bg_plane_index", min(m.d - 1, (3 * m.d) // 4)))
    focal_lr = float(scene_cfg.get("focal_lr", 1.1 * m.w))
    baseline = float(scene_cfg.get("baseline", 0.2))
    halfwidth = float(scene_cfg.get("fg_halfwidth_px", 0.27 * m.beta * m.h))
    seed = int(scene_cfg.get("seed", 11))
    f_hr = m.beta * focal_lr
    scene = synthetic.make_two_plane_scene(
        planes.depths[fg_i], planes.depths[bg_i], f_hr, halfwidth, seed=seed)
    c_lr = synthetic.look_from_x(synthetic.centered_intrinsics(m.h, m.w, focal_lr), 0.0)
    c_ref = synthetic.look_from_x(
        synthetic.centered_intrinsics(m.beta * m.h, m.beta * m.w, f_hr), baseline)
    tup = synthetic.make_tuple_from_scene(scene, c_lr, c_ref, m.h, m.w, m.beta)
    return synthetic.StaticTupleSource(tup)


class SequencePairSource:
    """Samples (target, reference) frame pairs from trajectory sequences."""

    def __init__(self, root, model_cfg: ModelConfig, diff_min, diff_max):
        seq_dir = os.path.join(root, "sequences")
        if not os.path.isdir(seq_dir):
            raise ParseError(f"dataset root {root} has no sequences/ directory")
        self.frames_dir = os.path.join(root, "frames")
        self.records = [parse_sequence_file(os.path.join(seq_dir, name))
                        for name in sorted(os.listdir(seq_dir)) if name.endswith(".txt")]
        if not self.records:
            raise ParseError(f"no sequence files under {seq_dir}")
        self.cfg = model_cfg
        self.diff_min, self.diff_max = diff_min, diff_max

    def _assemble(self, record, i, j):
        return assemble_tuple(record, self.frames_dir, i, j, self.cfg.beta,
                              (self.cfg.h, self.cfg.w))

    def sample(self, rng):
        record = self.records[rng.integers(len(self.records))]
        n = len(record.frames)
        diff = int(rng.integers(self.diff_min, self.diff_max + 1))
        diff = min(diff, n - 1)
        i = int(rng.integers(0, n - diff))
        return self._assemble(record, i, i + diff)

    def holdout(self):
        record = self.records[0]
        diff = min(self.diff_max, len(record.frames) - 1)
        return self._assemble(record, 0, diff)


class OpticalZoomSource:
    """Samples wide/tele pairs from optical-zoom scene directories."""

    def __init__(self, root):
        if not os.path.isdir(root):
            raise ParseError(f"dataset root {root} does not exist")
        self.pairs = []
        for scene in sorted(os.listdir(root)):
            scene_dir = os.path.join(root, scene)
            wide = os.path.join(scene_dir, "wide")
            if not os.path.isdir(wide):
                continue
            for name in sorted(os.listdir(wide)):
                if name.endswith(".png"):
                    self.pairs.append((scene_dir, int(name[:-4])))
        if not self.pairs:
            raise ParseError(f"no optical-zoom pairs under {root}")

    def sample(self, rng):
        scene_dir, idx = self.pairs[rng.integers(len(self.pairs))]
        return load_optical_zoom_pair(scene_dir, idx)

    def holdout(self):
        return load_optical_zoom_pair(*self.pairs[0])


def _build_source(cfg: RunConfig):
    if cfg.data_kind == "synthetic":
        return _synthetic_source(cfg)
    if cfg.data_kind == "sequences":
        return SequencePairSource(cfg.data_root, cfg.model,
                                  cfg.frame_diff_min, cfg.frame_diff_max)
    return OpticalZoomSource(cfg.data_root)


# ---------------------------------------------------------------------------
# calibration files for infer / debug-psv
# ---------------------------------------------------------------------------

_CALIB_KEYS = {"near", "far", "lr_intrinsics", "lr_pose", "ref_intrinsics", "ref_pose"}


def read_calibration_file(path):
    """Parse the two-camera calibration text file used by infer/debug-psv.

    Lines: ``lr_intrinsics fx fy cx cy`` (pixels at the LR image size),
    ``lr_pose`` with 12 world-to-camera values, the same for ``ref_*``, and
    optional ``near``/``far`` depth range lines.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read calibration {path}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#")[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        if key not in _CALIB_KEYS:
            raise ParseError(f"{path}: line {lineno}: unknown key {key!r}")
        try:
            nums = [float(v) for v in rest]
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: non-numeric value ({exc})") from exc
        if not all(math.isfinite(v) for v in nums):
            raise ParseError(f"{path}: line {lineno}: non-finite value")
        expected = {"near": 1, "far": 1, "lr_intrinsics": 4, "ref_intrinsics": 4,
                    "lr_pose": 12, "ref_pose": 12}[key]
        if len(nums) != expected:
            raise ParseError(f"{path}: line {lineno}: {key} takes {expected} values, "
                             f"got {len(nums)}")
        values[key] = nums
    missing = {"lr_intrinsics", "lr_pose", "ref_intrinsics", "ref_pose"} - set(values)
    if missing:
        raise ParseError(f"{path}: missing lines {sorted(missing)}")

    def calib(prefix):
        fx, fy, cx, cy = values[f"{prefix}_intrinsics"]
        pose = np.array(values[f"{prefix}_pose"]).reshape(3, 4)
        k = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
        return CameraCalibration(k, pose[:, :3], pose[:, 3])

    near = values.get("near", [None])[0]
    far = values.get("far", [None])[0]
    return calib("lr"), calib("ref"), near, far


def _load_image_pair(lr_path, ref_path):
    lr = read_png(lr_path)
    ref = read_png(ref_path)
    if lr.ndim == 2:
        lr = lr[:, :, None]
    if ref.ndim == 2:
        ref = ref[:, :, None]
    return lr, ref


def _depth_to_png(depth, near, far):
    """Normalize by inverse depth so near is bright, matching MPI renderings."""
    disp = 1.0 / np.maximum(depth[:, :, 0], 1e-9)
    lo, hi = 1.0 / far, 1.0 / near
    return np.clip((disp - lo) / max(hi - lo, 1e-12), 0.0, 1.0)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args):
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = args.out or cfg.out_dir
    if not out_dir:
        raise ParseError("an output directory is required (--out or config out_dir)")
    source = _build_source(cfg)  # validates dataset reachability before any writes
    model = CrossMPI(cfg.model, seed=cfg.seed)
    backbone = PerceptualBackbone(channels=cfg.backbone_channels,
                                  c_in=cfg.model.c,
                                  weights_path=cfg.backbone_weights,
                                  seed=cfg.backbone_seed,
                                  dtype=cfg.model.np_dtype)
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train.log")
    final, _ = run_schedule(model, cfg.schedule, source, cfg.loss_weights,
                            backbone=backbone, seed=cfg.seed, out_dir=out_dir,
                            log_path=log_path, checkpoint_every=cfg.checkpoint_every)
    print(f"training complete; final checkpoint at {os.path.join(out_dir, 'final.ckpt')}")
    return _EXIT_OK


def _model_from_checkpoint(path):
    state = load_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(state.config)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad model config in checkpoint ({exc})") from exc
    model = CrossMPI(cfg, seed=0)
    model.load_state_arrays(state.params)
    return model, cfg


def cmd_infer(args):
    model, cfg = _model_from_checkpoint(args.checkpoint)
    lr, ref = _load_image_pair(args.lr_image, args.ref_image)
    c_lr, c_ref, near, far = read_calibration_file(args.calibration)
    h, w = lr.shape[:2]
    if ref.shape[0] != cfg.beta * h or ref.shape[1] != cfg.beta * w:
        raise ParseError(
            f"reference is {ref.shape[1]}x{ref.shape[0]} but the checkpoint expects "
            f"beta={cfg.beta} times the {w}x{h} LR image")
    if lr.shape[2] != cfg.c:
        raise ParseError(f"LR image has {lr.shape[2]} channels, model expects {cfg.c}")
    if near is not None or far is not None:
        from dataclasses import replace
        cfg = replace(cfg, near=near or cfg.near, far=far or cfg.far)
        model.config = cfg
    tup = TrainingTuple(i_lr=lr, i_ref=ref, c_lr=c_lr, c_ref=c_ref,
                        i_gt=np.zeros_like(ref), frame_difference=0)
    res = model.run(tup)
    os.makedirs(args.out, exist_ok=True)
    write_png(os.path.join(args.out, "I_SR.png"), res["i_sr"])
    write_png(os.path.join(args.out, "T_Ref.png"), res["t_ref"])
    write_png(os.path.join(args.out, "depth.png"),
              _depth_to_png(res["depth"], cfg.near, cfg.far))
    np.savetxt(os.path.join(args.out, "depth_raw.txt"), res["depth"][:, :, 0], fmt="%.8f")
    if args.save_alphas:
        for i, z in enumerate(res["planes"]):
            write_png(os.path.join(args.out, f"alpha_{i:03d}_depth_{z:.6f}.png"),
                      res["alphas"].weights[:, :, i])
    print(f"wrote I_SR.png, T_Ref.png, depth.png and depth_raw.txt to {args.out}")
    return _EXIT_OK


def _eval_items(root, frame_diffs):
    """Deterministic (sequence, target, ref) triples per frame difference."""
    seq_dir = os.path.join(root, "sequences")
    if not os.path.isdir(seq_dir):
        raise ParseError(f"dataset root {root} has no sequences/ directory")
    records = [parse_sequence_file(os.path.join(seq_dir, name))
               for name in sorted(os.listdir(seq_dir)) if name.endswith(".txt")]
    if not records:
        raise ParseError(f"no sequence files under {seq_dir}")
    buckets = {diff: [] for diff in frame_diffs}
    for record in records:
        n = len(record.frames)
        for diff in frame_diffs:
            for i in range(0, n - diff):
                buckets[diff].append((record, i, i + diff))
    return buckets


def cmd_eval(args):
    frame_diffs = [int(v) for v in args.frame_diffs.split(",")] if args.frame_diffs \
        else [1, 2, 3]
    model = cfg = None
    if args.checkpoint:
        model, cfg = _model_from_checkpoint(args.checkpoint)
        beta = cfg.beta
    else:
        beta = args.beta
        if beta is None:
            raise ParseError("either --checkpoint or --beta is required for eval")
    root = args.dataset or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ParseError("a dataset directory is required (positional or "
                         f"{DATA_ROOT_ENV})")
    frames_dir = os.path.join(root, "frames")
    buckets = _eval_items(root, frame_diffs)

    rows = []
    items = []
    for diff in frame_diffs:
        triples = buckets[diff]
        if args.max_items:
            triples = triples[:args.max_items]
        scores = []
        for record, i, j in triples:
            entry = record.frames[i]
            probe = os.path.join(frames_dir, record.sequence_id, f"{entry.frame_id}.png")
            native = read_png(probe)
            nh, nw = native.shape[:2]
            out_size = (nh // beta, nw // beta)
            tup = assemble_tuple(record, frames_dir, i, j, beta, out_size)
            if model is not None:
                pred = model.run(tup)["i_sr"]
            else:
                pred = resample_bicubic(tup.i_lr, beta)
            p = psnr(pred, tup.i_gt)
            s = ssim(pred, tup.i_gt)
            scores.append((p, s))
            items.append({"frame_diff": diff, "sequence": record.sequence_id,
                          "target": i, "reference": j,
                          "psnr": p if math.isinf(p) else round(p, 6),
                          "ssim": round(s, 6)})
        if scores:
            mean_psnr = float(np.mean([p for p, _ in scores]))
            rows.append({"frame_diff": diff, "count": len(scores),
                         "psnr": mean_psnr if math.isinf(mean_psnr)
                         else round(mean_psnr, 6),
                         "ssim": round(float(np.mean([s for _, s in scores])), 6)})
        else:
            rows.append({"frame_diff": diff, "count": 0, "psnr": None, "ssim": None})

    header = f"{'frame diff':>10} {'count':>6} {'PSNR':>10} {'SSIM':>8}"
    print(header)
    print("-" * len(header))
    for row in rows:
        if row["count"]:
            print(f"{row['frame_diff']:>10} {row['count']:>6} "
                  f"{row['psnr']:>10.3f} {row['ssim']:>8.4f}")
        else:
            print(f"{row['frame_diff']:>10} {row['count']:>6} {'absent':>10} {'absent':>8}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            json.dump({"buckets": rows}, fh, sort_keys=True, indent=1)
            fh.write("\n")
        with open(os.path.join(args.out, "report_items.jsonl"), "w", encoding="utf-8") as fh:
            for item in items:
                fh.write(json.dumps(item, sort_keys=True) + "\n")
    return _EXIT_OK


def cmd_debug_psv(args):
    lr, ref = _load_image_pair(args.lr_image, args.ref_image)
    c_lr, c_ref, near, far = read_calibration_file(args.calibration)
    near = near or args.near
    far = far or args.far
    planes = sample_depth_planes(near, far, args.planes)
    h, w = lr.shape[:2]
    beta = args.beta or ref.shape[0] // h
    out_h, out_w = beta * h, beta * w
    psv = build_plane_sweep_volume(ref, c_lr.scaled(beta), c_ref, planes,
                                   (out_h, out_w))
    os.makedirs(args.out, exist_ok=True)
    for i, z in enumerate(planes):
        write_png(os.path.join(args.out, f"psv_{i:03d}_depth_{z:.6f}.png"),
                  psv.images[i])
    print(f"wrote {len(planes)} plane sweep slices to {args.out}")
    return _EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crossmpi",
        description="Reference-based super-resolution via plane-sweep multiplane images")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the three-stage training schedule")
    p_train.add_argument("--config", required=True, help="JSON run configuration")
    p_train.add_argument("--out", help="output directory (overrides config out_dir)")
    p_train.add_argument("--seed", type=int, help="seed override")
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="super-resolve one calibrated pair")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--lr-image", required=True)
    p_infer.add_argument("--ref-image", required=True)
    p_infer.add_argument("--calibration", required=True)
    p_infer.add_argument("--out", required=True)
    p_infer.add_argument("--save-alphas", action="store_true",
                         help="also write per-plane alpha slices")
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="frame-difference bucketed PSNR/SSIM")
    p_eval.add_argument("dataset", nargs="?", help=f"dataset root (or {DATA_ROOT_ENV})")
    p_eval.add_argument("--checkpoint", help="model checkpoint; omit for bicubic only")
    p_eval.add_argument("--beta", type=int, help="upscaling factor for bicubic mode")
    p_eval.add_argument("--frame-diffs", default="1,2,3",
                        help="comma-separated frame differences (buckets)")
    p_eval.add_argument("--max-items", type=int, help="cap evaluated pairs per bucket")
    p_eval.add_argument("--out", help="directory for report.json / report_items.jsonl")
    p_eval.set_defaults(func=cmd_eval)

    p_psv = sub.add_parser("debug-psv", help="write every plane sweep slice as PNG")
    p_psv.add_argument("--lr-image", required=True)
    p_psv.add_argument("--ref-image", required=True)
    p_psv.add_argument("--calibration", required=True)
    p_psv.add_argument("--out", required=True)
    p_psv.add_argument("--planes", type=int, default=8, help="number of depth planes")
    p_psv.add_argument("--beta", type=int, help="resolution gap (default from images)")
    p_psv.add_argument("--near", type=float, default=1.0)
    p_psv.add_argument("--far", type=float, default=100.0)
    p_psv.set_defaults(func=cmd_debug_psv)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CrossMPIError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_USAGE if isinstance(exc, (ParseError, ValueError)) else _EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
