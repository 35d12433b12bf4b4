"""Synthetic rain: streak rendering, exact compositing and dataset building.

Streaks are capsules (a line segment with a Gaussian cross-profile) that
fall along ``direction`` (degrees from vertical, positive = towards +x) at
``falling_speed`` pixels per second, sampled at 24 frames per second.  Each
streak keeps its identity across frames, so rain is temporally coherent.
Streak heads are seeded in a box that extends above the frame, which means
rain enters from the top instead of popping into existence mid-frame.

Every intensity produced here is snapped to a 2**-16 grid.  Any two such
numbers in [0, 1] add and subtract exactly in float32, which is what makes
``X == C + S`` and ``X - S == C`` hold bit-for-bit.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .storage import read_video, write_video

FRAME_RATE = 24.0
EXPOSURE = 0.04  # seconds of motion blur per streak
BASE_SIGMA = 0.6  # cross-profile std-dev in px at scale 1, nearest layer
GRID = 2.0 ** -16

SPLIT_SHARES = {"train": 87, "val": 27, "test": 28}
RENDERS_PER_VIDEO = {"train": 3, "val": 1, "test": 1}


def snap(values) -> np.ndarray:
    """Round to the nearest multiple of 2**-16, as float32."""
    v = np.asarray(values, dtype=np.float64)
    return (np.round(v / GRID) * GRID).astype(np.float32)


@dataclass(frozen=True)
class RainConfig:
    scale: float = 1.0
    direction: float = 0.0
    density: float = 20.0
    scene_depth: int = 2
    depth_attenuation: float = 0.7
    opacity: float = 0.6
    falling_speed: float = 400.0
    wind_variation: float = 0.0
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("scale", 0.0 < self.scale <= 10.0, "(0, 10]"),
            ("direction", -75.0 <= self.direction <= 75.0, "[-75, 75]"),
            ("density", 0.0 <= self.density <= 50.0, "[0, 50]"),
            ("scene_depth", isinstance(self.scene_depth, (int, np.integer)) and 1 <= self.scene_depth <= 16,
             "an integer in [1, 16]"),
            ("depth_attenuation", 0.0 < self.depth_attenuation <= 1.0, "(0, 1]"),
            ("opacity", 0.0 <= self.opacity <= 1.0, "[0, 1]"),
            ("falling_speed", 100.0 <= self.falling_speed <= 1200.0, "[100, 1200]"),
            ("wind_variation", 0.0 <= self.wind_variation <= 30.0, "[0, 30]"),
            ("seed", 0 <= int(self.seed) < 2 ** 64, "[0, 2**64)"),
        ]
        for name, ok, rng in checks:
            if not ok:
                raise ValueError(f"RainConfig.{name}={getattr(self, name)!r} outside {rng}")

    @property
    def displacement(self) -> float:
        """Pixels travelled between consecutive frames."""
        return self.falling_speed / FRAME_RATE

    @property
    def length(self) -> float:
        return self.falling_speed * EXPOSURE * self.scale

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "RainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = int(values[f.name]) if f.name in ("scene_depth", "seed") else float(values[f.name])
        return cls(**kwargs)


@dataclass
class StreakGeometry:
    """Centre-line endpoints of every streak in every frame, in (x, y) pixel units."""

    heads: np.ndarray  # (T, n, 2)
    tails: np.ndarray  # (T, n, 2)
    layers: np.ndarray  # (n,)
    angles: np.ndarray  # (T,) fall direction used for each frame, degrees

    def displacements(self) -> np.ndarray:
        return np.diff(self.heads, axis=0)


def _frame_angles(cfg: RainConfig, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    jitter = rng.uniform(-1.0, 1.0, size=n_frames)
    return cfg.direction + cfg.wind_variation * jitter


def _trajectories(shape: tuple[int, int, int], cfg: RainConfig, rng: np.random.Generator) -> StreakGeometry:
    n_frames, h, w = shape
    angles = _frame_angles(cfg, n_frames, rng)
    rad = np.deg2rad(angles)
    units = np.stack([np.sin(rad), np.cos(rad)], axis=1)  # (T, 2) in (x, y)
    steps = cfg.displacement * units
    drift = np.concatenate([np.zeros((1, 2)), np.cumsum(steps[:-1], axis=0)])  # head offset at t
    length = cfg.length
    pad = 4.0 * BASE_SIGMA * cfg.scale + 1.0
    reach_x = length * float(np.abs(units[:, 0]).max())
    reach_y = length
    x_lo = float((-pad - reach_x - drift[:, 0]).min())
    x_hi = float((w - 1 + pad + reach_x - drift[:, 0]).max())
    y_lo = float((-pad - drift[:, 1]).min())
    y_hi = float((h - 1 + pad + reach_y - drift[:, 1]).max())
    area = (x_hi - x_lo) * (y_hi - y_lo)
    per_layer = cfg.density / 1e4 / cfg.scene_depth
    counts = rng.poisson(per_layer * area, size=cfg.scene_depth)
    n = int(counts.sum())
    layers = np.repeat(np.arange(cfg.scene_depth), counts)
    start = np.stack([rng.uniform(x_lo, x_hi, n), rng.uniform(y_lo, y_hi, n)], axis=1)
    heads = start[None, :, :] + drift[:, None, :]
    tails = heads - length * units[:, None, :]
    return StreakGeometry(heads, tails, layers, angles)


def _draw_capsule(canvas: np.ndarray, head, tail, sigma: float, peak: float) -> None:
    h, w = canvas.shape
    reach = 3.5 * sigma + 1.0
    x0 = int(math.floor(min(head[0], tail[0]) - reach))
    x1 = int(math.ceil(max(head[0], tail[0]) + reach))
    y0 = int(math.floor(min(head[1], tail[1]) - reach))
    y1 = int(math.ceil(max(head[1], tail[1]) + reach))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w - 1), min(y1, h - 1)
    if x0 > x1 or y0 > y1:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
    ax, ay = tail
    dx, dy = head[0] - ax, head[1] - ay
    seg2 = dx * dx + dy * dy
    if seg2 > 0:
        u = np.clip(((xs - ax) * dx + (ys - ay) * dy) / seg2, 0.0, 1.0)
    else:
        u = np.zeros_like(xs)
    px, py = ax + u * dx - xs, ay + u * dy - ys
    val = peak * np.exp(-(px * px + py * py) / (2.0 * sigma * sigma))
    region = canvas[y0:y1 + 1, x0:x1 + 1]
    np.maximum(region, val, out=region)


def render_streaks(shape: tuple[int, int, int], cfg: RainConfig, return_geometry: bool = False):
    """Render a ``(T, 1, H, W)`` streak map with values in ``[0, cfg.opacity]``.

    Overlapping streaks combine by maximum, so no pixel exceeds the peak
    opacity.  With ``return_geometry`` the streak centre-lines are returned too.
    """
    n_frames, h, w = shape
    if min(shape) < 1:
        raise ValueError(f"shape must be positive (T, H, W), got {shape}")
    rng = np.random.default_rng(int(cfg.seed))
    geom = _trajectories(shape, cfg, rng)
    out = np.zeros((n_frames, 1, h, w), dtype=np.float64)
    if cfg.density > 0 and cfg.opacity > 0:
        for t in range(n_frames):
            canvas = out[t, 0]
            for k in range(geom.heads.shape[1]):
                level = cfg.depth_attenuation ** int(geom.layers[k])
                _draw_capsule(canvas, geom.heads[t, k], geom.tails[t, k],
                              BASE_SIGMA * cfg.scale * level, cfg.opacity * level)
    s_raw = np.minimum(snap(out), np.float32(snap(cfg.opacity)))
    return (s_raw, geom) if return_geometry else s_raw


@dataclass
class RainTriplet:
    x: np.ndarray
    s: np.ndarray
    c: np.ndarray


def composite(c: np.ndarray, s_raw: np.ndarray) -> RainTriplet:
    """Add a streak map to clean frames: ``X = clip(C + S_raw, 0, 1)``, stored ``S = X - C``.

    ``c`` is ``(..., C, H, W)``; a single-channel ``s_raw`` is applied to every
    channel.  Both inputs are snapped to the 2**-16 grid first, so the
    returned ``C`` may differ from the input by at most 2**-17.
    """
    c = np.asarray(c)
    s_raw = np.asarray(s_raw)
    if c.ndim != s_raw.ndim or c.shape[:-3] != s_raw.shape[:-3] or c.shape[-2:] != s_raw.shape[-2:] \
            or s_raw.shape[-3] not in (1, c.shape[-3]):
        raise ValueError(f"streak map {s_raw.shape} cannot be applied to clean frames {c.shape}")
    cq = snap(c)
    sq = snap(s_raw)
    x = np.minimum(cq + sq, np.float32(1.0))
    s = x - cq
    return RainTriplet(x, s, cq)


def random_config(rng: np.random.Generator) -> RainConfig:
    """Draw every rendering parameter uniformly over a broad, realistic range."""
    return RainConfig(
        scale=float(rng.uniform(0.6, 2.5)),
        direction=float(rng.uniform(-60.0, 60.0)),
        density=float(rng.uniform(5.0, 50.0)),
        scene_depth=int(rng.integers(1, 4)),
        depth_attenuation=float(rng.uniform(0.5, 0.9)),
        opacity=float(rng.uniform(0.2, 0.9)),
        falling_speed=float(rng.uniform(150.0, 900.0)),
        wind_variation=float(rng.uniform(0.0, 10.0)),
        seed=int(rng.integers(0, 2 ** 63)),
    )


def _video_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence((seed, *keys)).generate_state(1, np.uint64)[0])


def assign_splits(names: Sequence[str], split: str | Mapping[str, str], seed: int) -> dict[str, str]:
    """Map each clean video to a split: one fixed split, an explicit mapping, or ``auto``."""
    if isinstance(split, Mapping):
        return {n: split[n] for n in names}
    if split in SPLIT_SHARES:
        return {n: split for n in names}
    if split != "auto":
        raise ValueError(f"unknown split {split!r}")
    order = list(np.random.default_rng(seed).permutation(len(names)))
    total = sum(SPLIT_SHARES.values())
    n_train = round(len(names) * SPLIT_SHARES["train"] / total)
    n_val = round(len(names) * SPLIT_SHARES["val"] / total)
    out = {}
    for rank, i in enumerate(order):
        out[names[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


@dataclass
class ManifestEntry:
    video: str
    split: str
    clean: str
    config: RainConfig
    psnr_db: float

    def line(self) -> str:
        parts = [f"video={self.video}", f"split={self.split}", f"clean={self.clean}"]
        parts += [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in asdict(self.config).items()]
        parts.append(f"psnr_db={self.psnr_db!r}")
        return " ".join(parts)

    @classmethod
    def parse(cls, line: str) -> "ManifestEntry":
        kv = dict(item.split("=", 1) for item in line.split())
        return cls(kv["video"], kv["split"], kv["clean"], RainConfig.from_mapping(kv), float(kv["psnr_db"]))


def build_dataset(clean_videos: Mapping[str, np.ndarray], root, *, seed: int = 0,
                  split: str | Mapping[str, str] = "train",
                  renders: Mapping[str, int] | None = None,
                  base_config: RainConfig | None = None) -> list[ManifestEntry]:
    """Render rain over clean ``(F, C, H, W)`` videos and write the dataset under ``root``.

    Layout: ``<root>/<split>/<video-id>/{clean,rain,streak}/frame_%05d.{ppm,pgm}``
    plus ``<root>/manifest.txt`` with one ``key=value`` line per rendered video.
    Training videos get three renders each, validation/test one.  Parameters
    are drawn at random unless ``base_config`` is given, in which case only the
    seed changes between renders.
    """
    from .analysis import psnr

    root = Path(root)
    renders = dict(RENDERS_PER_VIDEO, **(renders or {}))
    names = sorted(clean_videos)
    splits = assign_splits(names, split, seed)
    entries = []
    for vi, name in enumerate(names):
        video = np.asarray(clean_videos[name], dtype=np.float32)
        if video.ndim != 4:
            raise ValueError(f"clean video {name!r} must be (F, C, H, W), got {video.shape}")
        sp = splits[name]
        for k in range(renders[sp]):
            vseed = _video_seed(seed, vi, k)
            if base_config is None:
                cfg = random_config(np.random.default_rng(vseed))
            else:
                cfg = replace(base_config, seed=vseed)
            f, _, h, w = video.shape
            s_raw = render_streaks((f, h, w), cfg)
            trip = composite(video, s_raw)
            vid = f"{name}_r{k}"
            out = root / sp / vid
            try:
                write_video(out / "clean", trip.c)
                write_video(out / "rain", trip.x)
                write_video(out / "streak", s_raw)
            except OSError as exc:
                raise OSError(f"{out}: {exc}") from exc
            _, mean_db = psnr(trip.x, trip.c)
            entries.append(ManifestEntry(f"{sp}/{vid}", sp, name, cfg, float(mean_db)))
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.txt").write_text("".join(e.line() + "\n" for e in entries))
    return entries


def read_manifest(root) -> list[ManifestEntry]:
    path = Path(root) / "manifest.txt"
    return [ManifestEntry.parse(line) for line in path.read_text().splitlines() if line.strip()]


def load_split(root, split: str = "train") -> list[tuple[str, RainTriplet]]:
    """Read every rendered video of a split; ``S`` is rebuilt as ``X - C`` after loading."""
    root = Path(root)
    out = []
    split_dir = root / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"{split_dir}: no such split directory")
    for vdir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        x = snap(read_video(vdir / "rain"))
        c = snap(read_video(vdir / "clean"))
        if x.shape != c.shape:
            raise ValueError(f"{vdir}: rain and clean videos differ in shape {x.shape} vs {c.shape}")
        out.append((vdir.name, RainTriplet(x, x - c, c)))
    return out
