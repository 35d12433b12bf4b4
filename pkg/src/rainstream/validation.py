"""Input checks shared by the estimator, the CLI and the trainer entry points."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError


def check_video(video, name: str = "video", channels: int | None = None,
                min_frames: int = 1, unit_range: bool = True) -> np.ndarray:
    """Return ``video`` as a float32 ``(F, C, H, W)`` array or raise.

    A single ``(C, H, W)`` frame is not accepted; add the frame axis explicitly.
    """
    arr = np.asarray(video)
    if arr.dtype == object:
        raise TypeError(f"{name}: ragged or non-numeric input")
    if not np.issubdtype(arr.dtype, np.number):
        raise TypeError(f"{name}: expected numeric data, got dtype {arr.dtype}")
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be (F, C, H, W)", ndim=arr.ndim)
    if arr.shape[0] < min_frames:
        raise ShapeError(f"{name} has too few frames", frames=arr.shape[0], required=min_frames)
    if channels is not None and arr.shape[1] != channels:
        raise ShapeError(f"{name} has the wrong channel count", C=arr.shape[1], expected=channels)
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or inf")
    if unit_range and (arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_videos(videos, name: str = "X", **kwargs) -> list[np.ndarray]:
    """Accept one ``(F, C, H, W)`` video, an ``(N, F, C, H, W)`` stack or a list of videos."""
    if isinstance(videos, np.ndarray):
        if videos.ndim == 4:
            return [check_video(videos, name, **kwargs)]
        if videos.ndim == 5:
            return [check_video(v, f"{name}[{i}]", **kwargs) for i, v in enumerate(videos)]
        raise ShapeError(f"{name} must be (F, C, H, W) or (N, F, C, H, W)", ndim=videos.ndim)
    if isinstance(videos, Sequence) and len(videos) and not np.isscalar(videos[0]):
        first = np.asarray(videos[0])
        if first.ndim == 3:  # a list of frames is one video
            return [check_video(np.stack(videos), name, **kwargs)]
        return [check_video(v, f"{name}[{i}]", **kwargs) for i, v in enumerate(videos)]
    raise TypeError(f"{name}: expected a video array or a sequence of videos")


def check_pair(x: Sequence[np.ndarray], y: Sequence[np.ndarray]) -> None:
    if len(x) != len(y):
        raise ValueError(f"got {len(x)} rain videos but {len(y)} clean videos")
    for i, (a, b) in enumerate(zip(x, y)):
        if a.shape != b.shape:
            raise ShapeError(f"rain and clean video {i} differ in shape: {a.shape} vs {b.shape}")
        if np.any(a < b):
            raise ValueError(f"rain video {i} is darker than its clean video somewhere; "
                             "the streak layer X - C must be non-negative")
