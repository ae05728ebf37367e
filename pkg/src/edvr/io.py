"""Frame directories, binary checkpoints and key=value config files."""
import dataclasses
import os
import re
import struct
import zlib

import numpy as np
from PIL import Image

from .model import EdvrConfig
from .training import TrainConfig

FRAME_RE = re.compile(r"^frame_(\d{8})\.png$")
MAGIC = b"EDVR"
VERSION = 1


class FrameError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# frames


def frame_name(i):
    return f"frame_{i:08d}.png"


def list_frames(directory):
    """Sorted frame files; rejects gaps in the numbering."""
    found = {}
    for name in os.listdir(directory):
        m = FRAME_RE.match(name)
        if m:
            found[int(m.group(1))] = name
    if not found:
        raise FrameError(f"{directory}: no frame_%08d.png files")
    idx = sorted(found)
    expected = range(idx[0], idx[0] + len(idx))
    for want, got in zip(expected, idx):
        if want != got:
            raise FrameError(f"{directory}: missing frame index {want} ({frame_name(want)})")
    return [os.path.join(directory, found[i]) for i in idx]


def decode_png(path):
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise FrameError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def quantize(frame):
    """[0,1] float -> uint8, clamped, rounding half away from zero."""
    v = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def encode_png(path, frame):
    Image.fromarray(quantize(frame).transpose(1, 2, 0), mode="RGB").save(path)


def read_frames(directory):
    """(N, 3, H, W) float32 in [0, 1]."""
    frames, shape = [], None
    for path in list_frames(directory):
        f = decode_png(path)
        if shape is None:
            shape = f.shape
        elif f.shape != shape:
            raise FrameError(f"{path}: size {f.shape[1:]} differs from {shape[1:]}")
        frames.append(f)
    return np.stack(frames)


def write_frames(directory, frames, start=0):
    os.makedirs(directory, exist_ok=True)
    for i, f in enumerate(frames):
        encode_png(os.path.join(directory, frame_name(start + i)), f)


def write_gray(path, image):
    """Write a single-channel [0, 1] map as an 8-bit grayscale PNG."""
    Image.fromarray(quantize(image), mode="L").save(path)


# ---------------------------------------------------------------------------
# checkpoints
#
# "EDVR" | u32 version | u32 count | per param: u32 name_len, utf-8 name,
# u32 rank, u32 dims..., f32 LE payload | u32 crc32 of everything before


def checkpoint_bytes(named_arrays):
    names = [n for n, _ in named_arrays]
    if len(set(names)) != len(names):
        raise CheckpointError("checkpoint: parameter names must be unique")
    parts = [MAGIC, struct.pack("<II", VERSION, len(named_arrays))]
    for name, arr in named_arrays:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, model):
    data = checkpoint_bytes([(n, p.data) for n, p in model.named_parameters()])
    with open(path, "wb") as f:
        f.write(data)


def parse_checkpoint(data):
    """Bytes -> list of (name, float32 array). Validates magic, version and CRC."""
    if len(data) < 16:
        raise CheckpointError("checkpoint: file truncated (CRC check failed)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint: CRC mismatch (file corrupt or truncated)")
    if body[:4] != MAGIC:
        raise CheckpointError(f"checkpoint: bad magic {body[:4]!r}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint: unsupported version {version}")
    pos = 12
    out = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
            out.append((name, arr))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"checkpoint: malformed payload ({exc})") from exc
    if pos != len(body):
        raise CheckpointError(f"checkpoint: {len(body) - pos} trailing bytes")
    return out


def load_checkpoint(path, model=None):
    """Read a checkpoint; with ``model`` also copy the values in after validating names and dims."""
    with open(path, "rb") as f:
        entries = parse_checkpoint(f.read())
    if model is None:
        return entries
    params = dict(model.named_parameters())
    names = [n for n, _ in entries]
    missing = sorted(set(params) - set(names))
    extra = sorted(set(names) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint parameters differ from model: missing {missing}, unexpected {extra}")
    for name, arr in entries:
        if arr.shape != params[name].shape:
            raise CheckpointError(
                f"checkpoint parameter {name}: dims {arr.shape} do not match model dims {params[name].shape}")
    for name, arr in entries:
        params[name].data = arr.astype(params[name].dtype)
    return entries


# ---------------------------------------------------------------------------
# config files


def _parse_value(raw, kind, key):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from exc


def _fields(cls):
    return {f.name: f.type if isinstance(f.type, type) else type(f.default) for f in dataclasses.fields(cls)}


def config_keys():
    """Flat key -> (section, attribute, type).

    Training fields whose name collides with a model field get a ``train_``
    prefix (``seed`` becomes ``train_seed``).
    """
    keys = {}
    for name, kind in _fields(EdvrConfig).items():
        keys[name] = ("model", name, kind)
    for name, kind in _fields(TrainConfig).items():
        keys[f"train_{name}" if name in keys else name] = ("train", name, kind)
    return keys


def parse_config(text):
    """key=value lines (``#`` comments) -> (EdvrConfig, TrainConfig). Unknown keys are rejected."""
    keys = config_keys()
    kwargs = {"model": {}, "train": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in keys:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        section, attr, kind = keys[key]
        kwargs[section][attr] = _parse_value(raw, kind, key)
    return EdvrConfig(**kwargs["model"]), TrainConfig(**kwargs["train"])


def serialize_config(model_cfg, train_cfg=None):
    lines = ["# EDVR configuration"]
    for key, (section, attr, _) in config_keys().items():
        if section == "train" and train_cfg is None:
            continue
        value = getattr(model_cfg if section == "model" else train_cfg, attr)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def read_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def write_config(path, model_cfg, train_cfg=None):
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_config(model_cfg, train_cfg))
