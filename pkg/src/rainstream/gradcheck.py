"""Finite-difference verification of every differentiable building block.

Each case builds a small float64 problem, reduces its output to a scalar by a
fixed random projection, and compares the tape's gradient with central
differences on a sample of coordinates of every input and parameter.  The
error of a tensor is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``;
a case reports the worst tensor.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as tn
from .layers import (
    BidirConvLstm,
    ConvLstmLayer,
    ConvLstmState,
    DenseUnit,
    ReconstructionHead,
    bidir_stack_forward,
    convlstm_step,
    dense_unit_forward,
    reconstruct,
)
from .model import TwoStreamNet, fuse
from .tensor import Tape, Tensor, backward
from .trainer import LossWeights, loss

PRIMITIVE_TOL = 1e-4
CHAIN_TOL = 1e-3
EPS = 1e-6  # float64 throughout; small enough to rarely straddle a PReLU kink


@dataclass
class CaseResult:
    name: str
    kind: str  # "primitive", "layer" or "chain"
    error: float
    tolerance: float
    worst_tensor: str
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)


@dataclass
class Case:
    name: str
    kind: str
    build: Callable[[np.random.Generator], tuple[dict[str, Tensor], Callable[[], Tensor]]]

    @property
    def tolerance(self) -> float:
        return CHAIN_TOL if self.kind == "chain" else PRIMITIVE_TOL


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _layer_inputs(module, prefix: str = "") -> dict[str, Tensor]:
    return {prefix + n: p for n, p in module.named_parameters()}


# -- primitives -------------------------------------------------------------

def _conv(rng):
    x, k, b = _t(rng, 2, 3, 6, 5), _t(rng, 4, 3, 3, 3, scale=0.5), _t(rng, 4)
    return {"x": x, "kernel": k, "bias": b}, lambda: tn.conv2d(x, k, b)


def _conv1x1(rng):
    x, k = _t(rng, 3, 5, 4), _t(rng, 2, 3, 1, 1)
    return {"x": x, "kernel": k}, lambda: tn.conv2d(x, k)


def _binary(op):
    def build(rng):
        a, b = _t(rng, 2, 3, 4), _t(rng, 2, 3, 4)
        return {"a": a, "b": b}, lambda: op(a, b)
    return build


def _unary(op):
    def build(rng):
        x = _t(rng, 3, 4, 5)
        return {"x": x}, lambda: op(x)
    return build


def _prelu(rng):
    x = _t(rng, 2, 3, 4, 5)
    x.data[np.abs(x.data) < 0.05] += 0.1  # keep clear of the kink
    s = Tensor(rng.uniform(0.1, 0.5, 3), requires_grad=True)
    return {"x": x, "slope": s}, lambda: tn.prelu(x, s)


def _scale_shift(rng):
    x = _t(rng, 3, 4, 4)
    return {"x": x}, lambda: tn.scale_shift(x, -0.7, 0.3)


def _concat(rng):
    a, b = _t(rng, 2, 4, 4), _t(rng, 3, 4, 4)
    return {"a": a, "b": b}, lambda: tn.concat_channels([a, b])


def _split(rng):
    x = _t(rng, 5, 3, 3)

    def f():
        p, q = tn.split_channels(x, [2, 3])
        return tn.concat_channels([tn.mul(p, p), q])
    return {"x": x}, f


def _total(rng):
    x = _t(rng, 3, 4, 4)
    return {"x": x}, lambda: tn.total(tn.mul(x, x))


def _mse(rng):
    a, b = _t(rng, 3, 4, 4), _t(rng, 3, 4, 4)
    return {"a": a, "b": b}, lambda: tn.mse(a, b)


# -- layers -----------------------------------------------------------------

def _dense(rng):
    unit = DenseUnit(3, rng).astype(np.float64)
    x = _t(rng, 3, 6, 6)
    return {"x": x, **_layer_inputs(unit)}, lambda: dense_unit_forward(x, unit)


def _convlstm(rng):
    layer = ConvLstmLayer(5, rng, hidden=4).astype(np.float64)
    for p in layer.params.values():
        p.data = p.data * 2.0  # push gates away from the linear regime
    z = _t(rng, 5, 5, 6)
    h, m = _t(rng, 4, 5, 6, scale=0.5), _t(rng, 4, 5, 6, scale=0.5)

    def f():
        state = convlstm_step(z, ConvLstmState(h, m), layer)
        return tn.concat_channels([state.h, state.m])
    return {"z": z, "h_prev": h, "m_prev": m, **_layer_inputs(layer)}, f


def _bidir(rng):
    stack = BidirConvLstm(3, rng, hidden=4).astype(np.float64)
    seq = [_t(rng, 3, 5, 5) for _ in range(3)]

    def f():
        return tn.concat_channels(bidir_stack_forward(seq, stack))
    return {**{f"z{t}": z for t, z in enumerate(seq)}, **_layer_inputs(stack)}, f


def _head(rng):
    head = ReconstructionHead(6, 3, rng, hidden=(5, 4)).astype(np.float64)
    x = _t(rng, 6, 5, 5)
    return {"x": x, **_layer_inputs(head)}, lambda: reconstruct(x, head)


def _fuse(rng):
    r, d = _t(rng, 4, 5, 5), _t(rng, 4, 5, 5)
    return {"r": r, "d": d}, lambda: fuse(r, d, 0.35)


def _loss(rng):
    ts = [_t(rng, 3, 4, 4) for _ in range(8)]
    s_hat, s, c_hat, c = ts[0:2], ts[2:4], ts[4:6], ts[6:8]
    names = ["s_hat0", "s_hat1", "s0", "s1", "c_hat0", "c_hat1", "c0", "c1"]
    return dict(zip(names, ts)), lambda: loss(s_hat, s, c_hat, c, LossWeights(0.3, 1.7)).total


# -- whole chain --------------------------------------------------------------

def _end_to_end(rng):
    # batch 1, T=2, 3 x 8 x 8, full channel widths
    seed = int(rng.integers(0, 2 ** 31))
    net = TwoStreamNet(channels=3, T=2, theta=0.5, seed=seed).astype(np.float64)
    xs = [Tensor(rng.uniform(0, 1, (1, 3, 8, 8)), requires_grad=True) for _ in range(2)]
    s = [Tensor(rng.uniform(0, 0.3, (1, 3, 8, 8))) for _ in range(2)]
    c = [Tensor(rng.uniform(0, 1, (1, 3, 8, 8))) for _ in range(2)]

    def f():
        out = net.forward_frames(xs)
        return loss(out.s_hat, s, out.c_hat, c, LossWeights(1.0, 1.0)).total
    return {"x0": xs[0], "x1": xs[1], **dict(net.named_parameters())}, f


CASES: list[Case] = [
    Case("conv2d", "primitive", _conv),
    Case("conv2d_1x1", "primitive", _conv1x1),
    Case("add", "primitive", _binary(tn.add)),
    Case("sub", "primitive", _binary(tn.sub)),
    Case("mul", "primitive", _binary(tn.mul)),
    Case("sigmoid", "primitive", _unary(tn.sigmoid)),
    Case("tanh", "primitive", _unary(tn.tanh)),
    Case("prelu", "primitive", _prelu),
    Case("scale_shift", "primitive", _scale_shift),
    Case("concat", "primitive", _concat),
    Case("split", "primitive", _split),
    Case("total", "primitive", _total),
    Case("mse", "primitive", _mse),
    Case("dense_unit", "layer", _dense),
    Case("convlstm_step", "layer", _convlstm),
    Case("bidir_stack", "layer", _bidir),
    Case("reconstruction_head", "layer", _head),
    Case("fusion", "layer", _fuse),
    Case("loss", "layer", _loss),
    Case("end_to_end", "chain", _end_to_end),
]
CASE_NAMES = tuple(c.name for c in CASES)


@contextlib.contextmanager
def corrupt_gradient(op: str, factor: float = 1.01) -> Iterator[None]:
    """Scale the backward output of primitive ``op`` by ``factor`` while active (test hook)."""
    original = Tape._record

    def record(self, name, inputs, output, grad_fn):
        if name == op:
            inner = grad_fn

            def grad_fn(g):
                return tuple(None if gi is None else gi * factor for gi in inner(g))
        original(self, name, inputs, output, grad_fn)

    Tape._record = record
    try:
        yield
    finally:
        Tape._record = original


def _scalar(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if out.ndim == 0:
        return out
    return tn.total(tn.mul(out, Tensor(projection)))


def check_case(case: Case, seed: int = 0, samples: int = 12, max_tensors: int | None = None) -> CaseResult:
    """Run one case; ``samples`` coordinates per tensor, optionally only ``max_tensors`` tensors."""
    start = time.perf_counter()
    rng = np.random.default_rng([seed, CASE_NAMES.index(case.name)])
    inputs, fn = case.build(rng)
    probe = fn()
    projection = rng.standard_normal(probe.shape) if probe.ndim else None

    with Tape() as tape:
        out = _scalar(fn(), projection)
    grads = backward(tape, out)

    def evaluate() -> float:
        return float(_scalar(fn(), projection).data)

    names = list(inputs)
    if max_tensors is not None and len(names) > max_tensors:
        keep = set(rng.choice(len(names), max_tensors, replace=False).tolist())
        names = [n for i, n in enumerate(names) if i in keep]

    worst, worst_name = 0.0, ""
    for name in names:
        t = inputs[name]
        analytic = grads[t] if t in grads else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = rng.choice(flat.size, min(samples, flat.size), replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            keep_v = flat[i]
            flat[i] = keep_v + EPS
            up = evaluate()
            flat[i] = keep_v - EPS
            down = evaluate()
            flat[i] = keep_v
            num[j] = (up - down) / (2 * EPS)
        ana = analytic.reshape(-1)[idx]
        scale = max(np.abs(ana).max(), np.abs(num).max())
        err = float(np.abs(ana - num).max() / scale) if scale > 0 else 0.0
        if err > worst:
            worst, worst_name = err, name
    return CaseResult(case.name, case.kind, worst, case.tolerance, worst_name, time.perf_counter() - start)


def run_gradcheck(seed: int = 0, samples: int = 12, cases: list[Case] | None = None,
                  fault: str | None = None) -> list[CaseResult]:
    """Run every case (or ``cases``); ``fault`` names a primitive whose backward is corrupted."""
    cases = CASES if cases is None else cases
    ctx = corrupt_gradient(fault) if fault else contextlib.nullcontext()
    with ctx:
        return [check_case(c, seed, samples, max_tensors=24 if c.kind == "chain" else None) for c in cases]


def format_report(results: list[CaseResult]) -> str:
    lines = [f"{'case':<22}{'kind':<11}{'worst_rel_err':>14}{'tol':>9}  status  worst_tensor"]
    for r in results:
        lines.append(f"{r.name:<22}{r.kind:<11}{r.error:>14.3e}{r.tolerance:>9.0e}  "
                     f"{'ok' if r.passed else 'FAIL':<6}  {r.worst_tensor}")
    return "\n".join(lines)
