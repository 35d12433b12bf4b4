"""Weighted two-term loss, Adam, the two-phase schedule and cube cropping."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import TwoStreamNet
from .tensor import ShapeError, Tape, Tensor, add, backward, mse, scale_shift

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "phase", "alpha", "beta", "loss_D", "loss_R", "loss_total")


@dataclass(frozen=True)
class LossWeights:
    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be >= 0, got alpha={self.alpha}, beta={self.beta}")
        if self.alpha + self.beta <= 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class TrainPhasePlan:
    """Detection-heavy phase 1, removal-heavy phase 2.

    Phase 1 ends after ``phase1_steps`` or, when ``plateau_window`` is set,
    as soon as mean ``loss_D`` over the last window improved by less than
    ``plateau_tol`` (relative) on the window before it.
    """

    phase1: LossWeights = LossWeights(1.0, 0.01)
    phase2: LossWeights = LossWeights(0.01, 1.0)
    phase1_steps: int = 1000
    phase2_steps: int = 1000
    plateau_window: int = 0
    plateau_tol: float = 0.01

    def __post_init__(self):
        if not self.phase1.alpha > self.phase1.beta:
            raise ValueError("phase 1 must weight detection above removal (alpha > beta)")
        if not self.phase2.alpha < self.phase2.beta:
            raise ValueError("phase 2 must weight removal above detection (alpha < beta)")
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ValueError("phase step budgets must be >= 0")

    def plateaued(self, loss_d_history: Sequence[float]) -> bool:
        w = self.plateau_window
        if w <= 0 or len(loss_d_history) < 2 * w:
            return False
        prev = float(np.mean(loss_d_history[-2 * w:-w]))
        last = float(np.mean(loss_d_history[-w:]))
        return prev <= 0 or (prev - last) / prev < self.plateau_tol


@dataclass
class LossResult:
    total: Tensor
    loss_d: float
    loss_r: float


def _frames(v) -> list:
    if isinstance(v, (list, tuple)):
        return list(v)
    return [v]


def _mean_mse(pred, target) -> Tensor:
    pred, target = _frames(pred), _frames(target)
    if len(pred) != len(target):
        raise ShapeError("prediction and target frame counts differ", pred_T=len(pred), target_T=len(target))
    acc = None
    for p, t in zip(pred, target):
        term = mse(p, t)
        acc = term if acc is None else add(acc, term)
    return scale_shift(acc, 1.0 / len(pred))


def loss(s_hat, s, c_hat, c, w: LossWeights) -> LossResult:
    """``alpha * MSE(s_hat, s) + beta * MSE(c_hat, c)``, each averaged over frames.

    Arguments are tensors/arrays or per-frame lists of them.  A zero weight
    drops that term from the graph entirely, so nothing upstream of it
    receives gradient.
    """
    l_d = _mean_mse(s_hat, s)
    l_r = _mean_mse(c_hat, c)
    terms = []
    if w.alpha > 0:
        terms.append(scale_shift(l_d, w.alpha))
    if w.beta > 0:
        terms.append(scale_shift(l_r, w.beta))
    total = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
    return LossResult(total, float(l_d.data), float(l_r.data))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return norm


Cube = tuple[np.ndarray, np.ndarray, np.ndarray]


def crop_cubes(x: np.ndarray, s: np.ndarray, c: np.ndarray,
               cube: tuple[int, int, int] = (9, 64, 64),
               stride: int | tuple[int, int, int] | None = None,
               seed: int = 0) -> list[Cube]:
    """Cut aligned ``(X, S, C)`` cubes of ``cube = (T, H, W)`` from ``(F, C, H, W)`` videos.

    ``stride`` defaults to the cube size (non-overlapping tiling).  The seed
    shifts the tiling origin within whatever margin the stride leaves and
    shuffles the order of the returned cubes.
    """
    x, s, c = (np.asarray(a) for a in (x, s, c))
    if not (x.shape == s.shape == c.shape) or x.ndim != 4:
        raise ShapeError(f"X, S, C must be equal (F, C, H, W) arrays: {x.shape}, {s.shape}, {c.shape}")
    ct, ch, cw = cube
    f, _, h, w = x.shape
    if f < ct or h < ch or w < cw:
        raise ShapeError("video is smaller than the cube", video_T=f, video_H=h, video_W=w,
                         cube_T=ct, cube_H=ch, cube_W=cw)
    if stride is None:
        stride = cube
    elif isinstance(stride, int):
        stride = (ct, stride, stride)
    st, sh, sw = stride
    rng = np.random.default_rng(seed)
    origins = []
    for length, size, step in ((f, ct, st), (h, ch, sh), (w, cw, sw)):
        margin = (length - size) % step
        origins.append(int(rng.integers(0, margin + 1)))
    cubes = []
    for t0 in range(origins[0], f - ct + 1, st):
        for y0 in range(origins[1], h - ch + 1, sh):
            for x0 in range(origins[2], w - cw + 1, sw):
                sl = (slice(t0, t0 + ct), slice(None), slice(y0, y0 + ch), slice(x0, x0 + cw))
                cubes.append((x[sl].copy(), s[sl].copy(), c[sl].copy()))
    order = rng.permutation(len(cubes))
    return [cubes[i] for i in order]


@dataclass
class TrainResult:
    net: TwoStreamNet
    adam: AdamState
    log: list[dict]
    phase1_end: int

    def column(self, name: str, phase: int | None = None) -> np.ndarray:
        rows = self.log if phase is None else [r for r in self.log if r["phase"] == phase]
        return np.array([r[name] for r in rows], dtype=np.float64)


def _check_dataset(dataset: Sequence[Cube], net: TwoStreamNet) -> tuple[int, ...]:
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    shape = np.shape(dataset[0][0])
    for k, item in enumerate(dataset):
        if len(item) != 3:
            raise ValueError(f"cube {k} is not an (X, S, C) triplet")
        for name, arr in zip("XSC", item):
            if np.shape(arr) != shape:
                raise ShapeError(f"cube {k}: {name} has shape {np.shape(arr)}, expected {shape}")
    if len(shape) != 4:
        raise ShapeError(f"cubes must be (T, C, H, W), got {shape}")
    if shape[0] != net.T or shape[1] != net.channels:
        raise ShapeError("cube shape does not match the net", cube_T=shape[0], cube_C=shape[1],
                         net_T=net.T, net_C=net.channels)
    return shape


def _batches(n: int, size: int, rng: np.random.Generator):
    pool: list[int] = []
    while True:
        while len(pool) < size:
            pool.extend(int(i) for i in rng.permutation(n))
        yield pool[:size]
        pool = pool[size:]


def _fmt(v: float) -> str:
    return repr(float(v))


def train(dataset: Sequence[Cube], net: TwoStreamNet, plan: TrainPhasePlan | None = None, *,
          batch_size: int = 16, seed: int = 0, lr: float = 1e-4, clip_norm: float | None = None,
          log_path=None, checkpoint_dir=None, checkpoint_every: int = 0,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise ``net`` in place through phase 1 then phase 2.

    Every step appends a row ``step,phase,alpha,beta,loss_D,loss_R,loss_total``
    to ``log_path`` (losses are those of the batch before the update).  Adam's
    moments are reset when phase 2 starts.  For the ``no_detection`` ablation
    the detection term is taken out of the objective, so the logged alpha is 0.
    """
    from .storage import save_checkpoint

    plan = plan or TrainPhasePlan()
    _check_dataset(dataset, net)
    rng = np.random.default_rng(seed)
    batches = _batches(len(dataset), min(batch_size, len(dataset)), rng)
    params = net.parameters()
    adam = AdamState(lr=lr)
    rows: list[dict] = []
    history_d: list[float] = []

    writer = handle = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        handle = open(log_path, "w", newline="")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)

    def checkpoint(tag: str, step: int, phase: int, w: LossWeights):
        if checkpoint_dir is None:
            return
        meta = {"step": step, "phase": phase, "seed": seed, "alpha": w.alpha, "beta": w.beta}
        save_checkpoint(Path(checkpoint_dir) / tag, net, adam, meta)

    step = 0
    phase1_end = 0
    try:
        for phase, weights, budget in ((1, plan.phase1, plan.phase1_steps), (2, plan.phase2, plan.phase2_steps)):
            if phase == 2:
                adam = adam.reset()
                phase1_end = step
            eff = LossWeights(0.0, weights.beta) if net.detach_detection else weights
            for _ in range(budget):
                idx = next(batches)
                xb = np.stack([dataset[i][0] for i in idx]).astype(net.dtype, copy=False)
                sb = np.stack([dataset[i][1] for i in idx]).astype(net.dtype, copy=False)
                cb = np.stack([dataset[i][2] for i in idx]).astype(net.dtype, copy=False)
                frames = [Tensor(np.ascontiguousarray(xb[:, t])) for t in range(net.T)]
                with Tape() as tape:
                    out = net.forward_frames(frames)
                    res = loss(out.s_hat, [sb[:, t] for t in range(net.T)],
                               out.c_hat, [cb[:, t] for t in range(net.T)], eff)
                gmap = backward(tape, res.total)
                grads = {name: gmap[p] if p in gmap else np.zeros_like(p.data) for name, p in params.items()}
                if clip_norm:
                    clip_by_global_norm(grads, clip_norm)
                row = {"step": step, "phase": phase, "alpha": eff.alpha, "beta": eff.beta,
                       "loss_D": res.loss_d, "loss_R": res.loss_r, "loss_total": float(res.total.data)}
                rows.append(row)
                if writer is not None:
                    writer.writerow([step, phase, _fmt(eff.alpha), _fmt(eff.beta), _fmt(res.loss_d),
                                     _fmt(res.loss_r), _fmt(row["loss_total"])])
                    handle.flush()
                adam_step(params, grads, adam)
                for name, p in params.items():
                    if not np.all(np.isfinite(p.data)):
                        raise FloatingPointError(f"parameter {name!r} became non-finite at step {step}")
                if on_step is not None:
                    on_step(row)
                step += 1
                if checkpoint_every and step % checkpoint_every == 0:
                    checkpoint(f"step_{step:06d}", step, phase, eff)
                history_d.append(res.loss_d)
                if phase == 1 and plan.plateaued(history_d):
                    log.info("loss_D plateaued at step %d; switching to phase 2", step)
                    break
        if plan.phase2_steps == 0:
            phase1_end = step
        checkpoint("final", step, 2 if plan.phase2_steps else 1, eff)
    finally:
        if handle is not None:
            handle.close()
    return TrainResult(net, adam, rows, phase1_end)
