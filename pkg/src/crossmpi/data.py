"""Dataset ingestion, training-tuple assembly, image files and checkpoints.

Three on-disk layouts are understood:

* camera-trajectory sequences: a text file per sequence (header line with
  the source id, then one line per frame: timestamp, four normalized
  intrinsics, two zeros, and a row-major 3x4 world-to-camera pose) plus a
  directory of PNG frames named ``<frames_dir>/<sequence_id>/<frame_id>.png``;
* optical-zoom scenes: ``scene_dir/{wide,tele}/NNNN.png`` plus a
  ``calibration.txt`` with per-pair intrinsics and poses;
* checkpoints: a single versioned file of named tensors (format below).

All images are 8- or 16-bit PNG on disk and float arrays in [0, 1] in memory.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, DataError, ParseError
from .geometry import CameraCalibration
from .imaging import resample_bicubic, resample_bicubic_to

__all__ = [
    "FrameEntry",
    "SequenceRecord",
    "TrainingTuple",
    "Checkpoint",
    "CHECKPOINT_VERSION",
    "parse_sequence_file",
    "assemble_tuple",
    "load_optical_zoom_pair",
    "save_checkpoint",
    "load_checkpoint",
    "read_png",
    "write_png",
]


# ---------------------------------------------------------------------------
# sequence files
# ---------------------------------------------------------------------------

_FIELDS_PER_FRAME = 19


@dataclass(frozen=True, eq=False)
class FrameEntry:
    """One trajectory frame: id, normalized intrinsics, world-to-camera pose."""

    frame_id: int
    fx: float  # focal lengths and principal point as fractions of width/height
    fy: float
    cx: float
    cy: float
    pose: np.ndarray  # (3, 4) world-to-camera [R | t]

    def calibration(self, width, height):
        """Intrinsics in pixels of a width x height image (integer pixel centers)."""
        k = np.array([
            [self.fx * width, 0.0, self.cx * width - 0.5],
            [0.0, self.fy * height, self.cy * height - 0.5],
            [0.0, 0.0, 1.0],
        ])
        return CameraCalibration(k, self.pose[:, :3], self.pose[:, 3])


@dataclass(frozen=True, eq=False)
class SequenceRecord:
    sequence_id: str
    frames: tuple

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ParseError(f"sequence {self.sequence_id!r} has fewer than 2 frames")
        ids = [f.frame_id for f in self.frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ParseError(f"sequence {self.sequence_id!r}: frame ids not strictly increasing")


def parse_sequence_file(path):
    """Parse one camera-trajectory sequence file into a SequenceRecord."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read sequence file {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text file ({exc})") from exc
    if not lines or not lines[0].strip():
        raise ParseError(f"{path}: missing header line with the sequence id")
    sequence_id = lines[0].strip().split()[0]
    frames = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != _FIELDS_PER_FRAME:
            raise ParseError(
                f"{path}: line {lineno}: expected {_FIELDS_PER_FRAME} fields, got {len(parts)}")
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: non-numeric field ({exc})") from exc
        if not all(math.isfinite(v) for v in values):
            raise ParseError(f"{path}: line {lineno}: non-finite value")
        pose = np.array(values[7:], dtype=np.float64).reshape(3, 4)
        frames.append(FrameEntry(
            frame_id=int(values[0]),
            fx=values[1], fy=values[2], cx=values[3], cy=values[4],
            pose=pose,
        ))
    return SequenceRecord(sequence_id=sequence_id, frames=tuple(frames))


# ---------------------------------------------------------------------------
# training tuples
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainingTuple:
    """LR input, HR reference, their calibrations, and the HR ground truth."""

    i_lr: np.ndarray      # (h, w, c)
    i_ref: np.ndarray     # (beta*h, beta*w, c)
    c_lr: CameraCalibration   # at (h, w) resolution
    c_ref: CameraCalibration  # at reference resolution
    i_gt: np.ndarray      # (beta*h, beta*w, c)
    frame_difference: int = 0

    def __post_init__(self):
        lr, ref, gt = (np.asarray(a) for a in (self.i_lr, self.i_ref, self.i_gt))
        if lr.ndim != 3 or ref.ndim != 3 or gt.ndim != 3:
            raise ValueError("images must be (H, W, C)")
        if gt.shape != ref.shape:
            raise ValueError(f"ground truth {gt.shape} and reference {ref.shape} sizes differ")
        by, rh = divmod(ref.shape[0], lr.shape[0])
        bx, rw = divmod(ref.shape[1], lr.shape[1])
        if rh or rw or by != bx or by < 1:
            raise ValueError(
                f"reference {ref.shape[:2]} is not an integer multiple of LR {lr.shape[:2]}")

    @property
    def beta(self):
        return self.i_ref.shape[0] // self.i_lr.shape[0]

    @property
    def lr_size(self):
        return self.i_lr.shape[:2]


def _center_crop_to_aspect(img, aspect):
    """Crop (H, W, C) to the requested w/h aspect; returns (img, x0, y0)."""
    h, w = img.shape[:2]
    if w / h > aspect:
        new_w = int(round(h * aspect))
        x0 = (w - new_w) // 2
        return img[:, x0:x0 + new_w], x0, 0
    new_h = int(round(w / aspect))
    y0 = (h - new_h) // 2
    return img[y0:y0 + new_h], 0, y0


def _crop_shift_calibration(calib, x0, y0):
    k = calib.intrinsics.copy()
    k[0, 2] -= x0
    k[1, 2] -= y0
    return CameraCalibration(k, calib.rotation, calib.translation)


def assemble_tuple(record, frames_dir, target_index, ref_index, beta, out_size):
    """Build a TrainingTuple from two frames of a trajectory sequence.

    ``out_size`` is the (h, w) size of the LR view; the ground truth and the
    reference are produced at (beta*h, beta*w) by center-crop to the target
    aspect followed by bicubic resize, with intrinsics adjusted in closed
    form.  The LR image is the ground truth bicubically downsampled by beta.
    """
    h, w = out_size
    sr_h, sr_w = beta * h, beta * w
    frames = record.frames
    if not (0 <= target_index < len(frames) and 0 <= ref_index < len(frames)):
        raise DataError(f"frame index out of range for sequence {record.sequence_id!r}")

    def load(index):
        entry = frames[index]
        path = os.path.join(frames_dir, record.sequence_id, f"{entry.frame_id}.png")
        if not os.path.exists(path):
            raise DataError(f"missing frame file {path}")
        img = read_png(path)
        if img.ndim == 2:
            img = img[:, :, None]
        native_h, native_w = img.shape[:2]
        calib = entry.calibration(native_w, native_h)
        cropped, x0, y0 = _center_crop_to_aspect(img, sr_w / sr_h)
        calib = _crop_shift_calibration(calib, x0, y0)
        resized = resample_bicubic_to(cropped, sr_h, sr_w)
        calib = calib.scaled(sr_w / cropped.shape[1], sr_h / cropped.shape[0])
        return resized, calib

    i_gt, gt_calib = load(target_index)
    i_ref, c_ref = load(ref_index)
    i_lr = resample_bicubic(i_gt, 1.0 / beta)
    tup = TrainingTuple(
        i_lr=i_lr, i_ref=i_ref,
        c_lr=gt_calib.scaled(1.0 / beta), c_ref=c_ref,
        i_gt=i_gt, frame_difference=abs(ref_index - target_index),
    )
    # constructed invariant: the LR image is exactly the downsampled ground truth
    assert np.array_equal(tup.i_lr, resample_bicubic(tup.i_gt, 1.0 / beta))
    return tup


# ---------------------------------------------------------------------------
# optical-zoom scenes
# ---------------------------------------------------------------------------


def _parse_floats(tokens, count, path, lineno):
    if len(tokens) != count:
        raise ParseError(f"{path}: line {lineno}: expected {count} numbers, got {len(tokens)}")
    try:
        values = [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"{path}: line {lineno}: non-numeric field ({exc})") from exc
    if not all(math.isfinite(v) for v in values):
        raise ParseError(f"{path}: line {lineno}: non-finite value")
    return values


def _parse_zoom_calibration(path):
    """Parse calibration.txt: a 'beta N' header then per-pair blocks of
    wide/tele intrinsics (fx fy cx cy, pixels) and 3x4 world-to-camera poses."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"missing calibration file {path}: {exc}") from exc
    beta = None
    pairs = {}
    current = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#")[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        if key == "beta":
            beta = int(_parse_floats(rest, 1, path, lineno)[0])
        elif key == "pair":
            current = int(_parse_floats(rest, 1, path, lineno)[0])
            pairs[current] = {}
        elif key in ("wide_intrinsics", "tele_intrinsics"):
            if current is None:
                raise ParseError(f"{path}: line {lineno}: {key} before any 'pair' line")
            pairs[current][key] = _parse_floats(rest, 4, path, lineno)
        elif key in ("wide_pose", "tele_pose"):
            if current is None:
                raise ParseError(f"{path}: line {lineno}: {key} before any 'pair' line")
            pairs[current][key] = np.array(_parse_floats(rest, 12, path, lineno)).reshape(3, 4)
        else:
            raise ParseError(f"{path}: line {lineno}: unknown key {key!r}")
    if beta is None:
        raise ParseError(f"{path}: missing 'beta' header line")
    return beta, pairs


def _zoom_calibration(values, pose):
    fx, fy, cx, cy = values
    k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    return CameraCalibration(k, pose[:, :3], pose[:, 3])


def load_optical_zoom_pair(scene_dir, pair_index):
    """Load one wide/tele pair: the telephoto image is the HR reference, the
    wide image is the ground truth, and the LR input is its bicubic 1/beta."""
    if not os.path.isdir(scene_dir):
        raise DataError(f"scene directory {scene_dir} does not exist")
    beta, pairs = _parse_zoom_calibration(os.path.join(scene_dir, "calibration.txt"))
    if pair_index not in pairs:
        raise DataError(f"pair {pair_index} not present in {scene_dir}/calibration.txt")
    entry = pairs[pair_index]
    missing = {"wide_intrinsics", "wide_pose", "tele_intrinsics", "tele_pose"} - set(entry)
    if missing:
        raise DataError(f"pair {pair_index}: calibration is missing {sorted(missing)}")
    wide_path = os.path.join(scene_dir, "wide", f"{pair_index:04d}.png")
    tele_path = os.path.join(scene_dir, "tele", f"{pair_index:04d}.png")
    for p in (wide_path, tele_path):
        if not os.path.exists(p):
            raise DataError(f"missing image {p}")
    wide = read_png(wide_path)
    tele = read_png(tele_path)
    if wide.ndim == 2:
        wide = wide[:, :, None]
    if tele.ndim == 2:
        tele = tele[:, :, None]
    if wide.shape != tele.shape:
        raise DataError(
            f"wide {wide.shape} and tele {tele.shape} image sizes differ in {scene_dir}")
    if wide.shape[0] % beta or wide.shape[1] % beta:
        raise DataError(
            f"stated beta {beta} does not divide the {wide.shape[0]}x{wide.shape[1]} images")
    i_lr = resample_bicubic(wide, 1.0 / beta)
    c_wide = _zoom_calibration(entry["wide_intrinsics"], entry["wide_pose"])
    c_tele = _zoom_calibration(entry["tele_intrinsics"], entry["tele_pose"])
    return TrainingTuple(
        i_lr=i_lr, i_ref=tele,
        c_lr=c_wide.scaled(1.0 / beta), c_ref=c_tele,
        i_gt=wide, frame_difference=0,
    )


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _png_chunk(tag, payload):
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload)))


def write_png(path, image, bit_depth=8):
    """Write an (H, W), (H, W, 1), (H, W, 3) or (H, W, 4) float image in [0, 1]."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3, 4):
        raise ValueError("image must have 1, 3 or 4 channels")
    h, w, c = arr.shape
    color_type = {1: 0, 3: 2, 4: 6}[c]
    maxval = (1 << bit_depth) - 1
    q = np.clip(np.rint(arr * maxval), 0, maxval)
    dtype = np.uint8 if bit_depth == 8 else ">u2"
    raw = q.astype(dtype).tobytes()
    row_bytes = w * c * (bit_depth // 8)
    scan = bytearray()
    for r in range(h):
        scan.append(0)  # filter type None
        scan += raw[r * row_bytes:(r + 1) * row_bytes]
    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, color_type, 0, 0, 0)
    body = _PNG_SIG
    body += _png_chunk(b"IHDR", ihdr)
    body += _png_chunk(b"IDAT", zlib.compress(bytes(scan), 6))
    body += _png_chunk(b"IEND", b"")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
    os.replace(tmp, path)


def _paeth(a, b, c):
    p = int(a) + int(b) - int(c)
    pa, pb, pc = abs(p - int(a)), abs(p - int(b)), abs(p - int(c))
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(data, h, w, channels, bytes_per_sample):
    bpp = channels * bytes_per_sample
    stride = w * bpp
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    for r in range(h):
        ftype = data[pos]
        pos += 1
        row = np.frombuffer(data[pos:pos + stride], dtype=np.uint8).astype(np.int64)
        pos += stride
        prev = out[r - 1].astype(np.int64) if r else np.zeros(stride, dtype=np.int64)
        if ftype == 0:
            rec = row
        elif ftype == 2:  # Up
            rec = (row + prev) & 0xFF
        elif ftype == 1:  # Sub: cumulative within each byte lane
            rec = row.copy()
            for i in range(bpp, stride):
                rec[i] = (rec[i] + rec[i - bpp]) & 0xFF
        elif ftype == 3:  # Average
            rec = row.copy()
            for i in range(stride):
                left = rec[i - bpp] if i >= bpp else 0
                rec[i] = (rec[i] + (left + prev[i]) // 2) & 0xFF
        elif ftype == 4:  # Paeth
            rec = row.copy()
            for i in range(stride):
                left = rec[i - bpp] if i >= bpp else 0
                up_left = prev[i - bpp] if i >= bpp else 0
                rec[i] = (rec[i] + _paeth(left, prev[i], up_left)) & 0xFF
        else:
            raise DataError(f"unsupported PNG filter type {ftype}")
        out[r] = rec.astype(np.uint8)
    return out


def read_png(path):
    """Read an 8- or 16-bit grayscale/RGB/RGBA PNG into a float array in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if blob[:8] != _PNG_SIG:
        raise DataError(f"{path} is not a PNG file")
    pos = 8
    ihdr = None
    idat = bytearray()
    while pos < len(blob):
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        tag = blob[pos + 4:pos + 8]
        payload = blob[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise DataError(f"{path}: missing IHDR chunk")
    w, h, bit_depth, color_type, compression, filt, interlace = ihdr
    if bit_depth not in (8, 16) or color_type not in (0, 2, 6) or interlace:
        raise DataError(
            f"{path}: unsupported PNG (bit depth {bit_depth}, color type {color_type}, "
            f"interlace {interlace}); expected non-interlaced 8/16-bit gray/RGB/RGBA")
    channels = {0: 1, 2: 3, 6: 4}[color_type]
    data = zlib.decompress(bytes(idat))
    bps = bit_depth // 8
    rows = _unfilter(data, h, w, channels, bps)
    if bit_depth == 8:
        arr = rows.reshape(h, w, channels).astype(np.float64) / 255.0
    else:
        arr = rows.reshape(h, w * channels, 2)
        arr = (arr[:, :, 0].astype(np.float64) * 256 + arr[:, :, 1]) / 65535.0
        arr = arr.reshape(h, w, channels)
    return arr[:, :, 0] if channels == 1 else arr


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1
_CKPT_MAGIC = b"CMPICKPT"


@dataclass
class Checkpoint:
    """Full training state: model config, parameters, optimizer, progress, rng."""

    config: dict
    params: dict                      # name -> ndarray
    optimizer: dict = field(default_factory=dict)  # name -> ndarray
    stage: int = 0
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _dtype_token(arr):
    return arr.dtype.str  # e.g. '<f4'; endian-explicit for portability


def save_checkpoint(state: Checkpoint, path):
    """Write a checkpoint; the byte stream is a pure function of the state."""
    tensors = []
    blobs = []
    offset = 0
    for group, table in (("params", state.params), ("optimizer", state.optimizer)):
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name])
            raw = arr.tobytes()
            tensors.append({
                "group": group, "name": name, "dtype": _dtype_token(arr),
                "shape": list(arr.shape), "offset": offset, "nbytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)
    header = json.dumps({
        "config": state.config,
        "stage": state.stage,
        "iteration": state.iteration,
        "rng_state": state.rng_state,
        "meta": state.meta,
        "tensors": tensors,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQ", state.version, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path, expected_config=None):
    """Read a checkpoint; optionally verify its model config field by field."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    try:
        version, header_len = struct.unpack("<IQ", blob[8:20])
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint header") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} != supported version {CHECKPOINT_VERSION}")
    try:
        header = json.loads(blob[20:20 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    base = 20 + header_len
    groups = {"params": {}, "optimizer": {}}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        groups[entry["group"]][entry["name"]] = arr
    state = Checkpoint(
        config=header["config"], params=groups["params"], optimizer=groups["optimizer"],
        stage=header["stage"], iteration=header["iteration"],
        rng_state=header["rng_state"], meta=header.get("meta", {}), version=version,
    )
    if expected_config is not None:
        for key, value in expected_config.items():
            got = state.config.get(key)
            if got != value:
                raise CheckpointError(
                    f"{path}: config field {key!r} mismatch (checkpoint {got!r} vs model {value!r})")
    return state
