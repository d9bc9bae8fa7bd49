"""File formats: PNG/PFM images, trajectory JSON, CYCL1 checkpoints, pair directories.

Checkpoint layout::

    b"CYCL1\\n"
    uint64 little-endian header length
    header: UTF-8 JSON (sorted keys) with a tensor manifest of
            {name, shape, offset} entries plus net/schedule/codec config;
            names are parameter names, "ema/<name>" for the weight
            average and "opt.m/<name>", "opt.v/<name>" for Adam moments
    payload: float32 little-endian tensors at the manifest offsets
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .codec import LatentCodec
from .exceptions import FormatError
from .frames import MaskedFrame, RgbdFrame, TrainingPair
from .geometry import Intrinsics, Pose
from .net.unet import Params, UNetConfig
from .schedule import VarianceSchedule, schedule_from_dict

CHECKPOINT_MAGIC = b"CYCL1\n"
MAX_DIM = 1 << 15


# ---------------------------------------------------------------- PNG

def load_png(path) -> np.ndarray:
    """8-bit RGB -> (H, W, 3), gray -> (H, W); values v/255 with no gamma transform."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "L"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def save_png(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] != 3 or img.ndim not in (2, 3):
        raise FormatError(f"cannot store image of shape {img.shape} as PNG")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="L" if q.ndim == 2 else "RGB").save(path, format="PNG")


def save_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return (arr >= 128).astype(np.uint8)


# ---------------------------------------------------------------- PFM

def save_pfm(path, depth: np.ndarray) -> None:
    """Grayscale little-endian PFM (scale -1.0), bottom row first."""
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise FormatError("PFM writer handles single-channel maps only")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(depth[::-1]).tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    lines = data.split(b"\n", 3)
    if len(lines) < 4:
        raise FormatError(f"{path}: truncated PFM header")
    kind, dims, scale_s, payload = lines
    if kind.strip() != b"Pf":
        raise FormatError(f"{path}: expected grayscale 'Pf' header, got {kind[:8]!r}")
    try:
        w, h = (int(v) for v in dims.split())
        scale = float(scale_s)
    except ValueError as e:
        raise FormatError(f"{path}: malformed PFM header") from e
    if not (0 < w <= MAX_DIM and 0 < h <= MAX_DIM):
        raise FormatError(f"{path}: dimensions {w}x{h} out of range")
    if scale >= 0:
        raise FormatError(f"{path}: big-endian PFM (scale {scale}) is not supported; expected little-endian (negative scale)")
    if len(payload) != 4 * w * h:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * w * h}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w)[::-1]
    return arr.astype(np.float64)


def disparity_to_depth(disp: np.ndarray) -> np.ndarray:
    """MiDaS-style inverse depth -> depth, ``1 / max(d, 1e-6)``."""
    return 1.0 / np.maximum(disp, 1e-6)


def load_rgbd(rgb_path, depth_path, invert_depth: bool = False) -> RgbdFrame:
    rgb = load_png(rgb_path)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)
    depth = load_pfm(depth_path)
    if invert_depth:
        depth = disparity_to_depth(depth)
    return RgbdFrame(rgb, depth)


# ---------------------------------------------------------------- trajectories

def save_trajectory(path, k: Intrinsics, poses: Sequence[Pose]) -> None:
    doc = {"intrinsics": k.to_dict(), "poses": [p.matrix.reshape(-1).tolist() for p in poses]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_trajectory(path) -> tuple[Intrinsics, list[Pose]]:
    try:
        doc = json.loads(Path(path).read_text())
        k = Intrinsics(**{key: doc["intrinsics"][key] for key in ("fx", "fy", "cx", "cy", "width", "height")})
        mats = doc["poses"]
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed trajectory file ({e})") from e
    poses = []
    for i, m in enumerate(mats):
        if len(m) != 16:
            raise FormatError(f"{path}: pose {i} has {len(m)} entries, expected 16")
        poses.append(Pose.from_matrix(m))
    return k, poses


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: Params
    net_config: UNetConfig
    schedule: VarianceSchedule
    codec: LatentCodec
    step: int = 0
    opt_state: Optional[object] = None
    extra: Optional[dict] = None
    ema_params: Optional[Params] = None


def save_checkpoint(path, model, *, include_optimizer: bool = True, extra: Optional[dict] = None) -> None:
    """Write any object with ``params``, ``net_config``, ``schedule``, ``codec`` (and optionally
    ``opt_state``, ``step``) to the CYCL1 format."""
    tensors = dict(model.params)
    ema = getattr(model, "ema_params", None)
    if ema is not None:
        tensors.update({f"ema/{k}": ema[k] for k in model.params})
    opt = getattr(model, "opt_state", None)
    if include_optimizer and opt is not None:
        for k in model.params:
            tensors[f"opt.m/{k}"] = opt.m[k]
            tensors[f"opt.v/{k}"] = opt.v[k]
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "format": "CYCL1",
        "dtype": "float32-le",
        "tensors": manifest,
        "payload_bytes": offset,
        "net": model.net_config.to_dict(),
        "schedule": model.schedule.to_dict(),
        "codec": model.codec.to_dict(),
        "step": int(getattr(model, "step", 0)),
        "optimizer": None if not (include_optimizer and opt is not None) else {"step": int(opt.step)},
        "extra": extra if extra is not None else getattr(model, "extra", None),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for c in chunks:
            f.write(c)


def load_checkpoint(path) -> Checkpoint:
    from .trainer import AdamState

    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a CYCL1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + 8:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header") from e
    payload = data[pos + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, manifest says {header['payload_bytes']}")
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    params = {k: v for k, v in tensors.items() if not k.startswith(("opt.", "ema/"))}
    ema = {k: tensors[f"ema/{k}"] for k in params} if f"ema/{next(iter(params))}" in tensors else None
    opt_state = None
    if header.get("optimizer"):
        opt_state = AdamState({k: tensors[f"opt.m/{k}"] for k in params}, {k: tensors[f"opt.v/{k}"] for k in params},
                              step=int(header["optimizer"]["step"]))
    net = dict(header["net"])
    net["channels"] = tuple(net["channels"])
    return Checkpoint(params, UNetConfig(**net), schedule_from_dict(header["schedule"]),
                      LatentCodec(header["codec"]["kind"]), int(header["step"]), opt_state, header.get("extra"), ema)


# ---------------------------------------------------------------- pair directories

def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def save_pair(directory, pair: TrainingPair, meta: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_png(d / "cond.png", pair.cond.rgb)
    save_mask_png(d / "mask.png", pair.cond.mask)
    save_png(d / "target.png", pair.target.rgb)
    save_pfm(d / "target_depth.pfm", pair.target.depth)
    record = dict(meta)
    record["prompt_id"] = int(pair.prompt_id)
    if pair.pose is not None:
        record["pose"] = pair.pose.matrix.reshape(-1).tolist()
    (d / "meta.json").write_text(json.dumps(record, indent=1, sort_keys=True))


def load_pair(directory) -> TrainingPair:
    d = Path(directory)
    cond_rgb = load_png(d / "cond.png")
    mask = load_mask_png(d / "mask.png")
    target_rgb = load_png(d / "target.png")
    if not (cond_rgb.shape == target_rgb.shape and mask.shape == target_rgb.shape[:2]):
        raise FormatError(f"{d}: image dimensions disagree")
    meta = json.loads((d / "meta.json").read_text())
    depth_path = d / "target_depth.pfm"
    depth = load_pfm(depth_path) if depth_path.exists() else np.ones(mask.shape)
    pose = Pose.from_matrix(meta["pose"]) if "pose" in meta else None
    cond = MaskedFrame(RgbdFrame(cond_rgb, np.where(mask == 1, depth, np.nan)), mask)
    return TrainingPair(cond, RgbdFrame(target_rgb, depth), int(meta.get("prompt_id", 0)), pose)


def load_pairs(root) -> list[TrainingPair]:
    dirs = sorted(p for p in Path(root).iterdir() if (p / "meta.json").exists())
    if not dirs:
        raise FormatError(f"{root}: no pair directories found")
    return [load_pair(p) for p in dirs]
