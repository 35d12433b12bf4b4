"""Composite blocks: dense units, ConvLSTM cells and stacks, reconstruction heads."""
from __future__ import annotations

from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    concat_channels,
    conv2d,
    mul,
    prelu,
    sigmoid,
    split_channels,
    tanh,
)

GROWTH = 12
DENSE_LAYERS = 4
HIDDEN = 48
KERNEL = 3
PRELU_INIT = 0.25

GATES = ("i", "f", "o", "g")


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    c_out, c_in, kh, kw = shape
    fan_in, fan_out = c_in * kh * kw, c_out * kh * kw
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Minimal parameter container; subclasses keep parameters in ``self.params``."""

    params: dict[str, Tensor]

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def n_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 is used by the gradient checker)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self


class ConvLayer(Module):
    """One convolution with optional per-channel PReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel: int = KERNEL, activation: bool = True):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.params = {
            "weight": Tensor(glorot_uniform(rng, (out_channels, in_channels, kernel, kernel)), True),
            "bias": Tensor(np.zeros(out_channels, np.float32), True),
        }
        if activation:
            self.params["slope"] = Tensor(np.full(out_channels, PRELU_INIT, np.float32), True)

    @property
    def activation(self) -> bool:
        return "slope" in self.params

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.params["weight"], self.params["bias"])
        if self.activation:
            y = prelu(y, self.params["slope"])
        return y


class DenseUnit(Module):
    """Four 3x3 conv layers, each fed the concatenation of the unit input and all earlier outputs."""

    def __init__(self, in_channels: int, rng: np.random.Generator,
                 growth: int = GROWTH, n_layers: int = DENSE_LAYERS):
        self.in_channels = in_channels
        self.growth = growth
        self.layers = [ConvLayer(in_channels + growth * j, growth, rng) for j in range(n_layers)]
        self.params = {}

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.growth * len(self.layers)

    @property
    def connections(self) -> int:
        # layer j receives input + every earlier layer: j + 1 links
        n = len(self.layers)
        return n * (n + 1) // 2

    def children(self):
        for j, layer in enumerate(self.layers, 1):
            yield f"conv{j}", layer

    def __call__(self, x: Tensor) -> Tensor:
        return dense_unit_forward(x, self)


def dense_unit_forward(x: Tensor, unit: DenseUnit) -> Tensor:
    if x.ndim < 3 or x.shape[-3] != unit.in_channels:
        raise ShapeError("dense unit input channel mismatch",
                         input_C=x.shape[-3] if x.ndim >= 3 else -1, unit_C=unit.in_channels)
    if x.shape[-2] < 3 or x.shape[-1] < 3:
        raise ShapeError("dense unit needs at least 3x3 spatial extent", H=x.shape[-2], W=x.shape[-1])
    features = [x]
    for layer in unit.layers:
        inp = features[0] if len(features) == 1 else concat_channels(features)
        features.append(layer(inp))
    return concat_channels(features)


class PlainConvUnit(Module):
    """Ablation stand-in for a dense unit: a straight chain of four 12-channel layers."""

    def __init__(self, in_channels: int, rng: np.random.Generator,
                 growth: int = GROWTH, n_layers: int = DENSE_LAYERS):
        self.in_channels = in_channels
        chans = [in_channels] + [growth] * n_layers
        self.layers = [ConvLayer(a, b, rng) for a, b in zip(chans[:-1], chans[1:])]
        self.params = {}

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    @property
    def connections(self) -> int:
        return len(self.layers)

    def children(self):
        for j, layer in enumerate(self.layers, 1):
            yield f"conv{j}", layer

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.in_channels:
            raise ShapeError("plain unit input channel mismatch",
                             input_C=x.shape[-3], unit_C=self.in_channels)
        for layer in self.layers:
            x = layer(x)
        return x


class ConvLstmState(NamedTuple):
    h: Tensor
    m: Tensor


class Gates(NamedTuple):
    i: Tensor
    f: Tensor
    o: Tensor
    g: Tensor


class ConvLstmLayer(Module):
    """Kernels ``W_z{i,f,o,g}`` act on the input, ``W_h{i,f,o,g}`` on the previous hidden state."""

    def __init__(self, in_channels: int, rng: np.random.Generator,
                 hidden: int = HIDDEN, kernel: int = KERNEL):
        self.in_channels = in_channels
        self.hidden = hidden
        self.params = {}
        for gate in GATES:
            self.params[f"W_z{gate}"] = Tensor(glorot_uniform(rng, (hidden, in_channels, kernel, kernel)), True)
            self.params[f"W_h{gate}"] = Tensor(glorot_uniform(rng, (hidden, hidden, kernel, kernel)), True)
        for gate in GATES:
            self.params[f"b_{gate}"] = Tensor(np.zeros(hidden, np.float32), True)

    def zero_state(self, like: Tensor) -> ConvLstmState:
        shape = like.shape[:-3] + (self.hidden,) + like.shape[-2:]
        zeros = np.zeros(shape, dtype=like.dtype)
        return ConvLstmState(Tensor(zeros), Tensor(zeros))

    def fused(self) -> tuple[Tensor, Tensor]:
        """Gate kernels stacked as one (4*hidden, in+hidden, k, k) kernel plus bias."""
        p = self.params
        rows = [concat([p[f"W_z{g}"], p[f"W_h{g}"]], axis=1) for g in GATES]
        return concat(rows, axis=0), concat([p[f"b_{g}"] for g in GATES], axis=0)


def convlstm_gates(z: Tensor, prev: ConvLstmState, layer: ConvLstmLayer,
                   fused: tuple[Tensor, Tensor] | None = None) -> Gates:
    if z.shape[-2:] != prev.h.shape[-2:] or prev.h.shape != prev.m.shape:
        raise ShapeError("ConvLSTM input and state spatial sizes differ",
                         input_H=z.shape[-2], input_W=z.shape[-1],
                         state_H=prev.h.shape[-2], state_W=prev.h.shape[-1])
    if z.shape[-3] != layer.in_channels:
        raise ShapeError("ConvLSTM input channel mismatch", input_C=z.shape[-3], layer_C=layer.in_channels)
    kernel, bias = fused if fused is not None else layer.fused()
    pre = conv2d(concat_channels([z, prev.h]), kernel, bias)
    a_i, a_f, a_o, a_g = split_channels(pre, [layer.hidden] * 4)
    return Gates(sigmoid(a_i), sigmoid(a_f), sigmoid(a_o), tanh(a_g))


def convlstm_step(z: Tensor, prev: ConvLstmState, layer: ConvLstmLayer,
                  fused: tuple[Tensor, Tensor] | None = None,
                  return_gates: bool = False):
    """Advance one ConvLSTM layer by one frame.

    ``fused`` lets a caller that steps the same layer many times build the
    stacked kernel once; the result is identical either way.
    """
    gates = convlstm_gates(z, prev, layer, fused)
    m = add(mul(gates.f, prev.m), mul(gates.i, gates.g))
    h = mul(gates.o, tanh(m))
    state = ConvLstmState(h, m)
    return (state, gates) if return_gates else state


class BidirConvLstm(Module):
    """Two stacked layers, each run forward and backward in time; directions concatenated."""

    def __init__(self, in_channels: int, rng: np.random.Generator,
                 hidden: int = HIDDEN, n_layers: int = 2):
        self.in_channels = in_channels
        self.hidden = hidden
        self.forward_layers = []
        self.backward_layers = []
        width = in_channels
        for _ in range(n_layers):
            self.forward_layers.append(ConvLstmLayer(width, rng, hidden))
            self.backward_layers.append(ConvLstmLayer(width, rng, hidden))
            width = 2 * hidden
        self.params = {}

    @property
    def out_channels(self) -> int:
        return 2 * self.hidden

    def children(self):
        for k, (fw, bw) in enumerate(zip(self.forward_layers, self.backward_layers), 1):
            yield f"lstm{k}.fwd", fw
            yield f"lstm{k}.bwd", bw

    def __call__(self, seq: Sequence[Tensor]) -> list[Tensor]:
        return bidir_stack_forward(seq, self)


def _run_direction(seq: Sequence[Tensor], layer: ConvLstmLayer) -> list[Tensor]:
    fused = layer.fused()
    state = layer.zero_state(seq[0])
    hs = []
    for z in seq:
        state = convlstm_step(z, state, layer, fused)
        hs.append(state.h)
    return hs


def bidir_stack_forward(seq: Sequence[Tensor], stack: BidirConvLstm) -> list[Tensor]:
    if len(seq) == 0:
        raise ShapeError("bidirectional ConvLSTM needs at least one frame", T=0)
    spatial = seq[0].shape[-2:]
    for t, z in enumerate(seq):
        if z.shape[-2:] != spatial:
            raise ShapeError("frames in a sequence must share spatial size",
                             frame0_H=spatial[0], frame0_W=spatial[1],
                             **{f"frame{t}_H": z.shape[-2], f"frame{t}_W": z.shape[-1]})
    current = list(seq)
    for fw, bw in zip(stack.forward_layers, stack.backward_layers):
        h_fwd = _run_direction(current, fw)
        h_bwd = _run_direction(current[::-1], bw)[::-1]
        current = [concat_channels([a, b]) for a, b in zip(h_fwd, h_bwd)]
    return current


class ReconstructionHead(Module):
    """K conv layers; PReLU on all but the last."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (HIDDEN, HIDDEN)):
        chans = [in_channels, *hidden, out_channels]
        n = len(chans) - 1
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.layers = [ConvLayer(a, b, rng, activation=(k < n - 1))
                       for k, (a, b) in enumerate(zip(chans[:-1], chans[1:]))]
        self.params = {}

    def children(self):
        for k, layer in enumerate(self.layers, 1):
            yield f"conv{k}", layer

    def __call__(self, features: Tensor) -> Tensor:
        return reconstruct(features, self)


def reconstruct(features: Tensor, head: ReconstructionHead) -> Tensor:
    if features.shape[-3] != head.in_channels:
        raise ShapeError("reconstruction head input channel mismatch",
                         input_C=features.shape[-3], head_C=head.in_channels)
    y = features
    for layer in head.layers:
        y = layer(y)
    return y
