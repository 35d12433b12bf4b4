"""Measurement tools: temporal correlation, rain statistics, optical flow, PSNR/SSIM."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
FRAME_RATE = 24.0


def to_gray(frame) -> np.ndarray:
    """``(3, H, W)`` -> luma ``(H, W)``; ``(1, H, W)`` and ``(H, W)`` pass through, as float64."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 2:
        return f
    if f.ndim == 3 and f.shape[0] == 1:
        return f[0]
    if f.ndim == 3 and f.shape[0] == 3:
        return np.tensordot(LUMA, f, axes=1)
    raise ValueError(f"expected a (H, W), (1, H, W) or (3, H, W) frame, got {f.shape}")


# --------------------------------------------------------------------------
# Correlation
# --------------------------------------------------------------------------

def cc(a, b) -> float:
    """Pearson correlation over all samples of two equally shaped arrays."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"cc: shapes differ: {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    saa = float(da @ da)
    sbb = float(db @ db)
    if saa == 0.0 and sbb == 0.0:
        raise ValueError("cc undefined: both inputs are constant (zero variance)")
    if saa == 0.0 or sbb == 0.0:
        return 0.0
    r = float(da @ db) / np.sqrt(saa * sbb)
    return float(np.clip(r, -1.0, 1.0))


def cc_curve(videos: Sequence[np.ndarray], max_distance: int = 10) -> np.ndarray:
    """Mean CC between frames ``d`` apart, for ``d = 0 .. max_distance``.

    Each video is ``(F, C, H, W)``; colour frames are reduced to luma.  The
    curve averages all frame pairs within a video, then averages videos.
    Distances longer than a video contribute nothing for that video.
    """
    per_video = []
    for video in videos:
        frames = [to_gray(f) for f in np.asarray(video)]
        row = np.full(max_distance + 1, np.nan)
        for d in range(max_distance + 1):
            vals = [cc(frames[t], frames[t + d]) for t in range(len(frames) - d)]
            if vals:
                row[d] = float(np.mean(vals))
        per_video.append(row)
    if not per_video:
        raise ValueError("cc_curve needs at least one video")
    return np.nanmean(np.array(per_video), axis=0)


# --------------------------------------------------------------------------
# Rain statistics
# --------------------------------------------------------------------------

def density_proportion(streak_map, threshold: float = 0.05) -> float:
    """Fraction of pixels of a single-channel map above ``threshold``."""
    m = np.asarray(streak_map)
    if m.ndim == 3:
        if m.shape[0] != 1:
            raise ValueError(f"density_proportion expects a single-channel map, got {m.shape}")
        m = m[0]
    return float(np.mean(m > threshold))


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D image with a 1-D kernel along both axes."""
    k = len(taps)
    rows = sliding_window_view(img, k, axis=1) @ taps
    return sliding_window_view(rows, k, axis=0) @ taps


def _box_same(img: np.ndarray, size: int) -> np.ndarray:
    return ndimage.uniform_filter(img, size, mode="constant")


def _gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel derivatives normalised to a unit step, replicated borders."""
    return (ndimage.sobel(img, axis=1, mode="nearest") / 8.0,
            ndimage.sobel(img, axis=0, mode="nearest") / 8.0)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(img, sigma, mode="nearest") if sigma > 0 else img


def min_eigen_response(frame, window: int = 3) -> np.ndarray:
    img = to_gray(frame)
    gx, gy = _gradients(img)
    a = _box_same(gx * gx, window)
    b = _box_same(gx * gy, window)
    c = _box_same(gy * gy, window)
    half = (a - c) / 2.0
    return (a + c) / 2.0 - np.sqrt(half * half + b * b)


def shi_tomasi(frame, max_corners: int = 100, min_eig_quality: float = 0.01, window: int = 3,
               min_distance: float = 3.0) -> np.ndarray:
    """Corners as an ``(n, 2)`` array of ``(x, y)`` pixel coordinates, strongest first.

    A pixel qualifies when its minimum structure-tensor eigenvalue is a local
    maximum of its 3x3 neighbourhood and exceeds ``min_eig_quality`` times the
    global maximum.  Candidates closer than ``min_distance`` to a stronger
    accepted corner are dropped.
    """
    img = to_gray(frame)
    if img.shape[0] < window or img.shape[1] < window:
        raise ValueError(f"frame {img.shape} is smaller than the {window}x{window} window")
    resp = min_eigen_response(img, window)
    top = float(resp.max())
    if top <= 0.0:
        return np.zeros((0, 2))
    # borders carry replicated gradients; ignore them
    resp[0, :] = resp[-1, :] = resp[:, 0] = resp[:, -1] = 0.0
    neigh = sliding_window_view(np.pad(resp, 1, mode="constant", constant_values=-np.inf), (3, 3)).max(axis=(2, 3))
    ys, xs = np.nonzero((resp >= neigh) & (resp > min_eig_quality * top))
    order = np.lexsort((xs, ys, -resp[ys, xs]))
    picked: list[tuple[int, int]] = []
    d2 = min_distance * min_distance
    for i in order:
        x, y = int(xs[i]), int(ys[i])
        if all((x - px) ** 2 + (y - py) ** 2 >= d2 for px, py in picked):
            picked.append((x, y))
            if len(picked) >= max_corners:
                break
    return np.array(picked, dtype=np.float64).reshape(-1, 2)


@dataclass
class FlowResult:
    flow: np.ndarray  # (n, 2) as (u, v); NaN where invalid
    valid: np.ndarray  # (n,) bool
    residual: np.ndarray  # (n,) sum|warped f2 - f1| / sum|f1| over the window; NaN where invalid


def lucas_kanade(f1, f2, points, window: int = 15, max_condition: float = 1e4,
                 sigma: float = 0.0, iterations: int = 1) -> FlowResult:
    """Single-level Lucas-Kanade flow at ``points`` (``(n, 2)`` array of ``(x, y)``).

    The spatial gradient is the mean of both frames' gradients.  Points whose
    window leaves the image, or whose 2x2 system has a condition number above
    ``max_condition``, are flagged invalid rather than raising.

    ``iterations > 1`` re-solves on the second frame warped by the current
    estimate, which recovers displacements comparable to the feature width.
    """
    a = gaussian_blur(to_gray(f1), sigma)
    b = gaussian_blur(to_gray(f2), sigma)
    if a.shape != b.shape:
        raise ValueError(f"frames differ in shape: {a.shape} vs {b.shape}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    ax, ay = _gradients(a)
    bx, by = _gradients(b)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    r = window // 2
    h, w = a.shape
    offs_y, offs_x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    flow = np.full((len(pts), 2), np.nan)
    valid = np.zeros(len(pts), dtype=bool)
    residual = np.full(len(pts), np.nan)
    for k, (px, py) in enumerate(pts):
        x, y = int(round(px)), int(round(py))
        if x - r < 1 or y - r < 1 or x + r > w - 2 or y + r > h - 2:
            continue
        sl = (slice(y - r, y + r + 1), slice(x - r, x + r + 1))
        uv = np.zeros(2)
        ok = True
        for it in range(iterations):
            if it == 0:
                wb, wbx, wby = b[sl], bx[sl], by[sl]
            else:
                coords = [y + offs_y + uv[1], x + offs_x + uv[0]]
                wb, wbx, wby = (ndimage.map_coordinates(img, coords, order=1, mode="nearest")
                                for img in (b, bx, by))
            ix = 0.5 * (ax[sl] + wbx)
            iy = 0.5 * (ay[sl] + wby)
            it_ = wb - a[sl]
            m = np.array([[np.sum(ix * ix), np.sum(ix * iy)], [np.sum(ix * iy), np.sum(iy * iy)]])
            eig = np.linalg.eigvalsh(m)
            if eig[0] <= 0.0 or eig[1] / eig[0] > max_condition:
                ok = False
                break
            uv = uv + np.linalg.solve(m, -np.array([np.sum(ix * it_), np.sum(iy * it_)]))
        if ok and np.all(np.isfinite(uv)):
            flow[k] = uv
            valid[k] = True
            warped = ndimage.map_coordinates(b, [y + offs_y + uv[1], x + offs_x + uv[0]], order=1, mode="nearest")
            mass = np.sum(np.abs(a[sl]))
            residual[k] = np.sum(np.abs(warped - a[sl])) / mass if mass > 0 else np.inf
    return FlowResult(flow, valid, residual)


@dataclass
class RainStats:
    density: np.ndarray  # per-frame proportion above threshold
    directions: np.ndarray  # degrees from vertical, one per tracked corner
    speeds: np.ndarray  # pixels per second

    @property
    def density_std(self) -> float:
        return float(np.std(self.density))

    @property
    def direction_std(self) -> float:
        return float(np.std(self.directions)) if len(self.directions) else float("nan")

    @property
    def speed_std(self) -> float:
        return float(np.std(self.speeds)) if len(self.speeds) else float("nan")


def rain_stats(streaks, threshold: float = 0.05, frame_rate: float = FRAME_RATE,
               max_corners: int = 200, quality: float = 0.05, window: int = 15,
               sigma: float = 1.0, iterations: int = 5, max_fb_error: float = 0.5,
               max_residual: float = 0.3) -> RainStats:
    """Density, direction and speed statistics of a ``(T, 1, H, W)`` streak video.

    Corners are picked in frame ``t`` and tracked to ``t + 1``; direction is
    measured from vertical (positive towards +x), speed is the flow magnitude
    times the frame rate.  A track is kept only if tracking back from ``t + 1``
    lands within ``max_fb_error`` px of the start and the warped window matches
    with relative residual below ``max_residual``; this drops corners that
    latched onto a neighbouring streak.
    """
    video = np.asarray(streaks)
    if video.ndim == 3:
        video = video[:, None]
    density = np.array([density_proportion(f, threshold) for f in video])
    dirs, speeds = [], []
    for t in range(len(video) - 1):
        pts = shi_tomasi(video[t], max_corners, quality, min_distance=window // 2)
        if len(pts) == 0:
            continue
        kw = dict(window=window, sigma=sigma, iterations=iterations)
        fwd = lucas_kanade(video[t], video[t + 1], pts, **kw)
        back = lucas_kanade(video[t + 1], video[t], pts + np.nan_to_num(fwd.flow), **kw)
        with np.errstate(invalid="ignore"):
            fb = np.hypot(*(fwd.flow + back.flow).T)
            keep = fwd.valid & back.valid & (fb < max_fb_error) & (fwd.residual < max_residual)
        u, v = fwd.flow[keep].T
        dirs.append(np.degrees(np.arctan2(u, v)))
        speeds.append(np.hypot(u, v) * frame_rate)
    cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0))
    return RainStats(density, cat(dirs), cat(speeds))


# --------------------------------------------------------------------------
# Quality metrics
# --------------------------------------------------------------------------

def psnr(a, b) -> tuple[np.ndarray, float]:
    """Per-frame PSNR (dB, peak 1.0) and the mean over frames.

    Accepts a single ``(C, H, W)`` frame or any stack of them.  A frame with
    zero error scores ``inf``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 3:
        raise ValueError(f"psnr expects (..., C, H, W) arrays, got {a.shape}")
    err = np.square(a - b).reshape(-1, int(np.prod(a.shape[-3:]))).mean(axis=1)
    with np.errstate(divide="ignore"):
        db = np.where(err > 0, 10.0 * np.log10(1.0 / np.where(err > 0, err, 1.0)), np.inf)
    return db, float(np.mean(db))


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _gauss_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    return g / g.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over the valid region of an 11x11 Gaussian window (sigma 1.5).

    Colour frames are compared on luma.
    """
    x, y = to_gray(a), to_gray(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    g = _gauss_taps()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def quality_report(pred, ref) -> dict:
    """PSNR and SSIM per frame for ``(F, C, H, W)`` videos."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    per_psnr, mean_psnr = psnr(pred, ref)
    per_ssim = np.array([ssim(p, r) for p, r in zip(pred, ref)])
    return {"psnr": per_psnr, "ssim": per_ssim, "mean_psnr": mean_psnr, "mean_ssim": float(per_ssim.mean())}


# --------------------------------------------------------------------------
# Plotting
# --------------------------------------------------------------------------

def line_plot(values: Sequence[float], width: int = 320, height: int = 240,
              y_range: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Render a polyline of ``values`` over an axis frame as a ``(3, H, W)`` image in [0, 1]."""
    img = np.ones((3, height, width))
    margin = 20
    x0, x1 = margin, width - margin
    y0, y1 = height - margin, margin
    img[:, y1:y0 + 1, x0] = 0.0
    img[:, y0, x0:x1 + 1] = 0.0
    vals = np.asarray(values, dtype=np.float64)
    lo, hi = y_range
    n = len(vals)
    if n == 0:
        return img
    xs = x0 + (np.arange(n) / max(n - 1, 1)) * (x1 - x0)
    ys = y0 - (np.clip(vals, lo, hi) - lo) / (hi - lo) * (y0 - y1)
    colour = np.array([0.1, 0.2, 0.8])[:, None]
    for i in range(max(n - 1, 1)):
        j = min(i + 1, n - 1)
        steps = int(max(abs(xs[j] - xs[i]), abs(ys[j] - ys[i]))) + 1
        px = np.round(np.linspace(xs[i], xs[j], steps)).astype(int)
        py = np.round(np.linspace(ys[i], ys[j], steps)).astype(int)
        img[:, py, px] = colour
    for x, y in zip(np.round(xs).astype(int), np.round(ys).astype(int)):
        img[:, max(y - 2, 0):y + 3, max(x - 2, 0):x + 3] = colour[:, :, None]
    return img
