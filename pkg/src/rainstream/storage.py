"""On-disk formats: DRTN tensor files, PPM/PGM frames, checkpoints and config files.

All binary payloads are little-endian.

Tensor file layout::

    offset  size        field
    0       4           magic  b"DRTN"
    4       2  (u16)    version = 1
    6       1  (u8)     dtype   (0 = float32)
    7       1  (u8)     ndim
    8       4*ndim      dims   (u32 each)
    ...     4*prod      payload, row-major float32
"""
from __future__ import annotations

import os
import re
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"DRTN"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHBB")


class FormatError(ValueError):
    """A file did not match its declared format.  ``path`` is set when known."""

    def __init__(self, message: str, path: str | os.PathLike | None = None):
        self.path = None if path is None else str(path)
        super().__init__(f"{self.path}: {message}" if self.path else message)


# --------------------------------------------------------------------------
# Tensor files
# --------------------------------------------------------------------------

def encode_tensor(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    if arr.ndim > 255:
        raise FormatError(f"dimension overflow: ndim={arr.ndim} exceeds 255")
    for d in arr.shape:
        if d > 0xFFFFFFFF:
            raise FormatError(f"dimension overflow: size {d} does not fit in u32")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, offset: int = 0, path=None) -> tuple[np.ndarray, int]:
    """Parse one tensor record starting at ``offset``; returns the array and the end offset."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated header", path)
    magic, version, dtype, ndim = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC.decode()!r}", path)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", path)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}, expected {DTYPE_F32} (float32)", path)
    pos = offset + _HEADER.size
    if len(buf) - pos < 4 * ndim:
        raise FormatError("truncated dimension list", path)
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = 1
    for d in dims:
        count *= d
    nbytes = 4 * count
    if nbytes > (1 << 62):
        raise FormatError(f"dimension overflow: dims {dims} describe {count} elements", path)
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}", path)
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(dims)
    return arr, pos + nbytes


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf, 0, path)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", path)
    return arr


# --------------------------------------------------------------------------
# PPM / PGM frames
# --------------------------------------------------------------------------

def quantize(frame: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8, rounding halves up (0.5 -> 128)."""
    f = np.asarray(frame, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("frame contains non-finite values")
    if f.size and (f.min() < 0.0 or f.max() > 1.0):
        raise ValueError(f"frame values must lie in [0, 1], got [{f.min()}, {f.max()}]")
    return np.floor(f * 255.0 + 0.5).astype(np.uint8)


def encode_frame(frame: np.ndarray) -> bytes:
    """``(3, H, W)`` -> binary PPM (P6); ``(1, H, W)`` or ``(H, W)`` -> binary PGM (P5)."""
    f = np.asarray(frame)
    if f.ndim == 2:
        f = f[None]
    if f.ndim != 3 or f.shape[0] not in (1, 3):
        raise ValueError(f"frame must be (1|3, H, W), got shape {f.shape}")
    c, h, w = f.shape
    q = quantize(f)
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes()


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def decode_frame(buf: bytes, path=None) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"not a binary PGM/PPM (magic {magic!r})", path)
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("malformed header", path)
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"malformed header field {m.group(1)!r}", path) from None
        pos = m.end()
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", path)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte", path)
    pos += 1
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    if len(buf) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", path)
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, c)
    return (px.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)).astype(np.float32)


def write_frame(path, frame: np.ndarray) -> None:
    Path(path).write_bytes(encode_frame(frame))


def read_frame(path) -> np.ndarray:
    return decode_frame(Path(path).read_bytes(), path)


FRAME_SUFFIXES = (".ppm", ".pgm")


def list_frames(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def read_video(directory) -> np.ndarray:
    """All frames of a directory, sorted by name, as ``(F, C, H, W)``."""
    paths = list_frames(directory)
    if not paths:
        raise FileNotFoundError(f"{directory}: no .ppm/.pgm frames")
    frames = [read_frame(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FormatError(f"frames differ in shape: {sorted(shapes)}", directory)
    return np.stack(frames)


def write_video(directory, video: np.ndarray) -> list[Path]:
    """Write ``(F, C, H, W)`` frames as ``frame_%05d.ppm`` (or ``.pgm`` when C == 1)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    suffix = ".pgm" if video.shape[1] == 1 else ".ppm"
    paths = []
    for i, frame in enumerate(video):
        p = directory / f"frame_{i:05d}{suffix}"
        write_frame(p, frame)
        paths.append(p)
    return paths


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_HEADER = "rainstream-checkpoint 1"
_NET_META = ("channels", "T", "theta", "seed", "plain_cnn", "detach_detection")


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _pack(named: Mapping[str, np.ndarray], kind: str, filename: str):
    blob = bytearray()
    lines = []
    for name, arr in named.items():
        rec = encode_tensor(arr)
        dims = "x".join(str(d) for d in np.shape(arr)) or "scalar"
        lines.append(f"{kind} {name} {dims} {filename} {len(blob)}")
        blob += rec
    return bytes(blob), lines


def save_checkpoint(directory, net, adam=None, meta: Mapping[str, Any] | None = None) -> Path:
    """Write ``manifest.txt``, ``params.bin`` and (with an optimizer) ``optim.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [CHECKPOINT_HEADER]
    net_meta = {
        "channels": net.channels, "T": net.T, "theta": net.theta, "seed": net.seed,
        "plain_cnn": net.plain_cnn, "detach_detection": net.detach_detection,
    }
    for k, v in net_meta.items():
        lines.append(f"net.{k} = {_fmt(v)}")
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k} = {_fmt(v)}")
    params = {n: p.data for n, p in net.named_parameters()}
    blob, plines = _pack(params, "param", "params.bin")
    (directory / "params.bin").write_bytes(blob)
    lines += plines
    if adam is not None:
        for k in ("lr", "beta1", "beta2", "eps", "step"):
            lines.append(f"adam.{k} = {_fmt(getattr(adam, k))}")
        state = {}
        for name in params:
            if name in adam.m:
                state[f"m/{name}"] = adam.m[name]
                state[f"v/{name}"] = adam.v[name]
        oblob, olines = _pack(state, "optim", "optim.bin")
        (directory / "optim.bin").write_bytes(oblob)
        lines += olines
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def _parse_scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_checkpoint(directory):
    """Returns ``(net, adam_state_or_None, meta_dict)``."""
    from .model import TwoStreamNet
    from .trainer import AdamState

    directory = Path(directory)
    manifest = directory / "manifest.txt"
    text = manifest.read_text().splitlines()
    if not text or text[0] != CHECKPOINT_HEADER:
        raise FormatError(f"missing header line {CHECKPOINT_HEADER!r}", manifest)
    net_meta, meta, adam_meta = {}, {}, {}
    records = {"param": {}, "optim": {}}
    blobs: dict[str, bytes] = {}
    for line in text[1:]:
        if not line.strip():
            continue
        if " = " in line:
            key, value = line.split(" = ", 1)
            section, _, name = key.partition(".")
            target = {"net": net_meta, "meta": meta, "adam": adam_meta}.get(section)
            if target is None:
                raise FormatError(f"unknown manifest key {key!r}", manifest)
            target[name] = _parse_scalar(value)
            continue
        parts = line.split()
        if len(parts) != 5 or parts[0] not in records:
            raise FormatError(f"malformed manifest line {line!r}", manifest)
        kind, name, dims, fname, offset = parts
        if fname not in blobs:
            blobs[fname] = (directory / fname).read_bytes()
        arr, _ = decode_tensor(blobs[fname], int(offset), directory / fname)
        expect = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        if arr.shape != expect:
            raise FormatError(f"{name}: manifest says {expect}, blob holds {arr.shape}", manifest)
        records[kind][name] = arr
    missing = [k for k in _NET_META if k not in net_meta]
    if missing:
        raise FormatError(f"manifest lacks net keys {missing}", manifest)
    net = TwoStreamNet(int(net_meta["channels"]), int(net_meta["T"]), float(net_meta["theta"]),
                       int(net_meta["seed"]), plain_cnn=bool(net_meta["plain_cnn"]))
    net.detach_detection = bool(net_meta["detach_detection"])
    net.load_parameters(records["param"])
    adam = None
    if adam_meta:
        adam = AdamState(lr=float(adam_meta["lr"]), beta1=float(adam_meta["beta1"]),
                         beta2=float(adam_meta["beta2"]), eps=float(adam_meta["eps"]),
                         step=int(adam_meta["step"]))
        for key, arr in records["optim"].items():
            which, name = key.split("/", 1)
            getattr(adam, which)[name] = arr
    return net, adam, meta


# --------------------------------------------------------------------------
# Config files
# --------------------------------------------------------------------------

CONFIG_DEFAULTS: dict[str, Any] = {
    # model
    "model.T": 9,
    "model.theta": 0.5,
    "model.channels": 3,
    # trainer
    "trainer.lr": 1e-4,
    "trainer.batch": 16,
    "trainer.phase1_steps": 1000,
    "trainer.phase2_steps": 1000,
    "trainer.plateau_window": 0,
    "trainer.plateau_tol": 0.01,
    "trainer.clip_norm": 0.0,
    "trainer.checkpoint_every": 0,
    "trainer.cube_t": 9,
    "trainer.cube_h": 64,
    "trainer.cube_w": 64,
    "trainer.stride": 64,
    # rain rendering
    "rain.scale": 1.0,
    "rain.direction": 0.0,
    "rain.density": 20.0,
    "rain.scene_depth": 2,
    "rain.depth_attenuation": 0.7,
    "rain.opacity": 0.6,
    "rain.falling_speed": 400.0,
    "rain.wind_variation": 0.0,
    # dataset building
    "synth.split": "train",
    "synth.randomize": True,
}

CONFIG_DOCS: dict[str, str] = {
    "model.T": "segment length fed to the ConvLSTM",
    "model.theta": "fusion degree in [0, 1]",
    "model.channels": "colour channels (3 = RGB, 1 = grey)",
    "trainer.lr": "Adam learning rate",
    "trainer.batch": "cubes per optimisation step",
    "trainer.phase1_steps": "steps with detection-heavy weights (alpha=1, beta=0.01)",
    "trainer.phase2_steps": "steps with removal-heavy weights (alpha=0.01, beta=1)",
    "trainer.plateau_window": "if > 0, leave phase 1 early once loss_D improves < plateau_tol over this many steps",
    "trainer.plateau_tol": "relative loss_D improvement counted as a plateau",
    "trainer.clip_norm": "global gradient L2-norm clip; 0 disables",
    "trainer.checkpoint_every": "write a checkpoint every N steps; 0 = only at the end",
    "trainer.cube_t": "training cube length (frames)",
    "trainer.cube_h": "training cube height",
    "trainer.cube_w": "training cube width",
    "trainer.stride": "spatial stride between cubes",
    "rain.scale": "streak length/width multiplier",
    "rain.direction": "degrees from vertical, [-75, 75]",
    "rain.density": "expected streaks per 10^4 pixels, [0, 50]",
    "rain.scene_depth": "number of depth layers (>= 1)",
    "rain.depth_attenuation": "per-layer width/opacity factor in (0, 1]",
    "rain.opacity": "peak streak intensity, [0, 1]",
    "rain.falling_speed": "pixels per second, [100, 1200]",
    "rain.wind_variation": "per-frame direction jitter amplitude in degrees, [0, 30]",
    "synth.split": "train | val | test | auto (random 87/27/28 proportions)",
    "synth.randomize": "draw every rain parameter per rendered video instead of using rain.*",
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, text: str):
    default = CONFIG_DEFAULTS[key]
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    return text


def parse_config(text: str, source: str = "<config>") -> dict[str, Any]:
    cfg = dict(CONFIG_DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            cfg[key] = _coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load_config(path=None) -> dict[str, Any]:
    if path is None:
        return dict(CONFIG_DEFAULTS)
    return parse_config(Path(path).read_text(), str(path))


def format_config(cfg: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in cfg.items())
