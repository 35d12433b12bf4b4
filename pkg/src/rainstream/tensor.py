"""Dense float tensors, differentiable primitives and a reverse-mode tape.

Arrays are laid out channel-first with width innermost: ``(C, H, W)`` for a
single frame, or ``(N, C, H, W)`` when a leading batch axis is present.  Every
primitive below treats axis ``-3`` as the channel axis, so both layouts go
through the same code path.

Gradients are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        y = conv2d(x, w, b)
        loss = total(mul(y, y))
    grads = backward(tape, loss)
    grads[w]  # same shape as w.data

Without an active tape the primitives simply evaluate, which is what
inference uses.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "GradientMap",
    "backward",
    "conv2d",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "prelu",
    "scale_shift",
    "concat",
    "concat_channels",
    "split",
    "split_channels",
    "total",
    "mse",
    "detach",
]


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent.

    ``dims`` names the offending dimensions, e.g. ``{"input.C": 3, "kernel.C_in": 4}``.
    """

    def __init__(self, message: str, **dims: int):
        self.dims = dims
        if dims:
            detail = ", ".join(f"{k}={v}" for k, v in dims.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class TapeError(RuntimeError):
    pass


class Tensor:
    """A float32 (or float64) array with an optional gradient requirement."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("op", "inputs", "output", "grad_fn")

    def __init__(self, op, inputs, output, grad_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Tape:
    """Ordered log of executed primitives.

    A tape is confined to the thread that entered it.  Entering a tape makes
    it the recording target for every primitive evaluated in that thread until
    the ``with`` block exits.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._seen: set[int] = set()

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._seen

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def _record(self, op: str, inputs: Sequence[Tensor], output: Tensor, grad_fn: Callable):
        self.records.append(_Record(op, tuple(inputs), output, grad_fn))
        self._seen.add(id(output))
        for t in inputs:
            self._seen.add(id(t))


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, grad_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _active_tape()
    if tape is not None and needs:
        tape._record(op, inputs, out, grad_fn)
    return out


class GradientMap:
    """Gradients produced by :func:`backward`, keyed by tensor identity."""

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor], seen: set[int]):
        self._grads = grads
        self._tensors = tensors
        self._seen = seen

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        key = id(tensor)
        if key not in self._seen:
            raise TapeError(f"{tensor!r} was not recorded on this tape")
        g = self._grads.get(key)
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._seen

    def leaves(self) -> list[Tensor]:
        """Tensors that require grad and were not produced by a recorded op."""
        return list(self._tensors.values())


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Replay ``tape`` in reverse and return d(loss)/d(tensor) for taped tensors.

    Gradients are accumulated for every taped tensor that requires grad;
    intermediates are kept in the returned map only for leaves (parameters and
    inputs flagged ``requires_grad``).
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError("loss must be a scalar", loss_ndim=loss.ndim, loss_size=int(loss.data.size))
    if id(loss) not in tape._seen:
        raise TapeError("loss was not produced by an op recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(r.output) for r in tape.records}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.grad_fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves.setdefault(id(t), t)
    kept = {k: v for k, v in grads.items() if k in leaves}
    return GradientMap(kept, leaves, set(tape._seen))


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------

def _pad_flat(xd: np.ndarray, ph: int, pw: int) -> np.ndarray:
    # (N, C, H, W) -> (C, N * Hp * Wp), zero border of ph rows / pw columns
    n, c, h, w = xd.shape
    xp = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=xd.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = xd.transpose(1, 0, 2, 3)
    return xp.reshape(c, -1)


def conv2d(x, kernel, bias=None) -> Tensor:
    """Same-size 2-D convolution (cross-correlation) with zero padding.

    ``x`` is ``(C_in, H, W)`` or ``(N, C_in, H, W)``; ``kernel`` is
    ``(C_out, C_in, kH, kW)`` with odd spatial extents; ``bias`` is ``(C_out,)``.

    The padded input is flattened so that each kernel tap becomes one matrix
    product against a shifted, contiguous slice; outputs that land on padding
    columns are computed and thrown away.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    bias = None if bias is None else _as_tensor(bias)
    if kernel.ndim != 4:
        raise ShapeError("kernel must be rank 4 (C_out, C_in, kH, kW)", kernel_ndim=kernel.ndim)
    if x.ndim not in (3, 4):
        raise ShapeError("input must be (C, H, W) or (N, C, H, W)", input_ndim=x.ndim)
    c_out, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("kernel spatial size must be odd", kH=kh, kW=kw)
    if x.shape[-3] != c_in:
        raise ShapeError("input channels do not match kernel", input_C=x.shape[-3], kernel_C_in=c_in)
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("bias must have C_out entries", bias_len=bias.data.size, kernel_C_out=c_out)

    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, _, h, w = xd.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    hp, wp = h + 2 * ph, w + 2 * pw
    span = n * hp * wp - (kh - 1) * wp - (kw - 1)
    dtype = np.result_type(xd.dtype, kernel.dtype)

    xf = _pad_flat(xd, ph, pw)
    taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 0, 1))
    head = np.zeros((c_out, span), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            head += taps[i, j] @ xf[:, off:off + span]
    if bias is not None:
        head += bias.data[:, None]
    acc = np.empty((c_out, n * hp * wp), dtype=dtype)
    acc[:, :span] = head
    out = acc.reshape(c_out, n, hp, wp)[:, :, :h, :w].transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out[0] if squeeze else out)
    del acc, head

    def grad_fn(g):
        g4 = g[None] if squeeze else g
        gfull = np.zeros((c_out, n, hp, wp), dtype=g.dtype)
        gfull[:, :, :h, :w] = g4.transpose(1, 0, 2, 3)
        gf = np.ascontiguousarray(gfull.reshape(c_out, -1)[:, :span])
        gx = gk = gb = None
        if kernel.requires_grad:
            gtaps = np.empty((kh, kw, c_out, c_in), dtype=kernel.dtype)
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    gtaps[i, j] = gf @ xf[:, off:off + span].T
            gk = np.ascontiguousarray(gtaps.transpose(2, 3, 0, 1))
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxf = np.zeros_like(xf)
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    gxf[:, off:off + span] += taps[i, j].T @ gf
            gx = gxf.reshape(c_in, n, hp, wp)[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _emit("conv2d", inputs, out, grad_fn)


# --------------------------------------------------------------------------
# Elementwise
# --------------------------------------------------------------------------

def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # tanh form: exact 0.5 at 0, no overflow for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    y = y.astype(x.dtype, copy=False)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    # per-channel vector broadcast along axis -3
    return v.reshape((-1, 1, 1)) if ndim >= 3 else v


def prelu(x, slope) -> Tensor:
    """x where x >= 0, slope * x otherwise; ``slope`` holds one value per channel."""
    x, slope = _as_tensor(x), _as_tensor(slope)
    if x.ndim < 3:
        if slope.data.size != 1:
            raise ShapeError("prelu on a non-image tensor needs a single slope", slope_len=slope.data.size)
        s = slope.data.reshape(())
    else:
        if slope.ndim != 1 or slope.shape[0] != x.shape[-3]:
            raise ShapeError("prelu slope must have one entry per channel",
                             slope_len=int(slope.data.size), input_C=x.shape[-3])
        s = _channel_view(slope.data, x.ndim)
    neg = x.data < 0
    y = np.where(neg, s * x.data, x.data).astype(x.dtype, copy=False)

    def grad_fn(g):
        gx = np.where(neg, g * s, g).astype(g.dtype, copy=False) if x.requires_grad else None
        gs = None
        if slope.requires_grad:
            contrib = np.where(neg, g * x.data, 0.0)
            if x.ndim < 3:
                gs = np.asarray(contrib.sum()).reshape(slope.shape).astype(slope.dtype)
            else:
                axes = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
                gs = contrib.sum(axis=axes).astype(slope.dtype)
        return gx, gs

    return _emit("prelu", (x, slope), y, grad_fn)


def scale_shift(x, scale: float, shift: float = 0.0) -> Tensor:
    """scale * x + shift with Python-scalar coefficients."""
    x = _as_tensor(x)
    scale, shift = float(scale), float(shift)
    y = x.data * x.dtype.type(scale) + x.dtype.type(shift)
    return _emit("scale_shift", (x,), y, lambda g: (g * g.dtype.type(scale),))


# --------------------------------------------------------------------------
# Structural
# --------------------------------------------------------------------------

def concat(tensors: Sequence, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0]
    ax = axis % ref.ndim
    for i, t in enumerate(tensors[1:], 1):
        if t.ndim != ref.ndim:
            raise ShapeError("concat: rank mismatch", first_ndim=ref.ndim, **{f"arg{i}_ndim": t.ndim})
        for d in range(ref.ndim):
            if d != ax and t.shape[d] != ref.shape[d]:
                raise ShapeError("concat: non-concatenated dimensions differ",
                                 **{f"arg0_dim{d}": ref.shape[d], f"arg{i}_dim{d}": t.shape[d]})
    if len(tensors) == 1:
        out = ref.data.copy()
    else:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        res = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                res.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(lo), int(hi))
            res.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(res)

    return _emit("concat", tensors, out, grad_fn)


def concat_channels(tensors: Sequence) -> Tensor:
    """Stack along the channel axis (-3), in argument order."""
    tensors = [_as_tensor(t) for t in tensors]
    for t in tensors:
        if t.ndim < 3:
            raise ShapeError("concat_channels needs (C, H, W) or (N, C, H, W) tensors", ndim=t.ndim)
    ref = tensors[0]
    for i, t in enumerate(tensors[1:], 1):
        if t.shape[-2:] != ref.shape[-2:]:
            raise ShapeError("concat_channels: spatial dimensions differ",
                             arg0_H=ref.shape[-2], arg0_W=ref.shape[-1],
                             **{f"arg{i}_H": t.shape[-2], f"arg{i}_W": t.shape[-1]})
    return concat(tensors, axis=-3)


def split(x, sizes: Sequence[int], axis: int) -> list[Tensor]:
    x = _as_tensor(x)
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError("split sizes must add up to the axis length",
                         sizes_total=int(sum(sizes)), axis_len=x.shape[ax])
    outs = []
    lo = 0
    for size in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(lo, lo + size)
        idx = tuple(idx)
        piece = np.ascontiguousarray(x.data[idx])

        def grad_fn(g, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            return (full,)

        outs.append(_emit("split", (x,), piece, grad_fn))
        lo += size
    return outs


def split_channels(x, sizes: Sequence[int]) -> list[Tensor]:
    return split(x, sizes, axis=-3)


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------

def total(x) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = _as_tensor(x)
    y = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    shape, dtype = x.shape, x.dtype
    return _emit("total", (x,), y, lambda g: (np.full(shape, g, dtype=dtype),))


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mse", a, b)
    diff = a.data - b.data
    n = diff.size
    y = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=a.dtype)

    def grad_fn(g):
        scaled = diff * (g * (2.0 / n)).astype(diff.dtype)
        return (scaled if a.requires_grad else None,
                -scaled if b.requires_grad else None)

    return _emit("mse", (a, b), y, grad_fn)


def detach(x) -> Tensor:
    """Same values, cut from the tape."""
    x = _as_tensor(x)
    return Tensor(x.data, requires_grad=False)


def zeros(shape: Iterable[int], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype))
