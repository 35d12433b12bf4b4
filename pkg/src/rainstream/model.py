"""The two-stream network: shared encoder, detection and removal streams, fusion."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layers import (
    HIDDEN,
    BidirConvLstm,
    ConvLayer,
    DenseUnit,
    Module,
    PlainConvUnit,
    ReconstructionHead,
)
from .tensor import ShapeError, Tensor, mul, scale_shift

ABLATIONS = ("none", "no_detection", "plain_cnn")


def fuse(r: Tensor, d: Tensor, theta: float) -> Tensor:
    """Aggregate removal features ``r`` with detection features ``d``.

    ``A = R * (D * (1 - theta) + theta)``; ``theta = 1`` passes ``r`` through
    unchanged and ``theta = 0`` gates it fully by ``d``.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"fusion degree theta must lie in [0, 1], got {theta}")
    if r.shape != d.shape:
        raise ShapeError(f"fuse: feature shapes differ: {r.shape} vs {d.shape}")
    return mul(r, scale_shift(d, 1.0 - theta, theta))


class Stream(Module):
    """Spatial unit, optional width adapter, bidirectional ConvLSTM stack."""

    def __init__(self, in_channels: int, rng: np.random.Generator, plain: bool = False):
        self.unit = (PlainConvUnit if plain else DenseUnit)(in_channels, rng)
        width = self.unit.out_channels
        self.adapter = None
        if plain:
            self.adapter = ConvLayer(width, HIDDEN, rng, kernel=1, activation=False)
            width = HIDDEN
        self.temporal = BidirConvLstm(width, rng)
        self.params = {}

    def children(self):
        yield "unit", self.unit
        if self.adapter is not None:
            yield "adapter", self.adapter
        yield "temporal", self.temporal

    def __call__(self, frames: Sequence[Tensor]) -> list[Tensor]:
        feats = [self.unit(f) for f in frames]
        if self.adapter is not None:
            feats = [self.adapter(f) for f in feats]
        return self.temporal(feats)


@dataclass
class FrameOutputs:
    """Per-frame tensors of one forward pass, still attached to the tape."""

    s_hat: list[Tensor]
    c_hat: list[Tensor]
    d: list[Tensor] = field(default_factory=list)
    a: list[Tensor] = field(default_factory=list)


@dataclass
class ModelOutput:
    """Stacked estimates with the input's layout: ``(T, C, H, W)`` or ``(N, T, C, H, W)``."""

    s_hat: np.ndarray
    c_hat: np.ndarray
    d: np.ndarray | None = None
    a: np.ndarray | None = None


class TwoStreamNet(Module):
    """Rain detection and rain removal streams over a shared spatial encoder.

    Parameters
    ----------
    channels : int
        Colour channels of the input; both reconstructions have the same count.
    T : int
        Segment length the net is evaluated on.
    theta : float
        Fusion degree in [0, 1].
    seed : int
        Seed for parameter initialisation.
    plain_cnn : bool
        Replace every dense unit by a plain 4-layer chain (ablation).
    """

    def __init__(self, channels: int = 3, T: int = 9, theta: float = 0.5, seed: int = 0,
                 plain_cnn: bool = False):
        if not 0.0 <= theta <= 1.0:
            raise ValueError(f"fusion degree theta must lie in [0, 1], got {theta}")
        if T < 1:
            raise ValueError(f"segment length T must be >= 1, got {T}")
        self.channels = channels
        self.T = T
        self.theta = float(theta)
        self.seed = seed
        self.plain_cnn = plain_cnn
        self.detach_detection = False
        rng = np.random.default_rng(seed)
        self.shared = (PlainConvUnit if plain_cnn else DenseUnit)(channels, rng)
        width = self.shared.out_channels
        self.detection = Stream(width, rng, plain=plain_cnn)
        self.removal = Stream(width, rng, plain=plain_cnn)
        feat = self.detection.temporal.out_channels
        self.detection_head = ReconstructionHead(feat, channels, rng)
        self.removal_head = ReconstructionHead(feat, channels, rng)
        self.params = {}

    @property
    def ablation(self) -> str:
        if self.plain_cnn:
            return "plain_cnn"
        return "no_detection" if self.detach_detection else "none"

    def children(self):
        yield "shared", self.shared
        yield "det", self.detection
        yield "rem", self.removal
        yield "det_head", self.detection_head
        yield "rem_head", self.removal_head

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def detection_parameter_names(self) -> list[str]:
        return [n for n in self.parameters() if n.startswith(("det.", "det_head."))]

    def forward_frames(self, frames: Sequence[Tensor]) -> FrameOutputs:
        if len(frames) != self.T:
            raise ShapeError("segment length does not match the net", T_input=len(frames), T_net=self.T)
        for f in frames:
            if f.shape[-3] != self.channels:
                raise ShapeError("input channel count does not match the net",
                                 input_C=f.shape[-3], net_C=self.channels)
        shared = [self.shared(f) for f in frames]
        d = self.detection(shared)
        r = self.removal(shared)
        theta = 1.0 if self.detach_detection else self.theta
        a = [fuse(rt, dt, theta) for rt, dt in zip(r, d)]
        s_hat = [self.detection_head(dt) for dt in d]
        c_hat = [self.removal_head(at) for at in a]
        return FrameOutputs(s_hat, c_hat, d, a)

    def forward(self, x: np.ndarray, keep_features: bool = False) -> ModelOutput:
        """Evaluate on a ``(T, C, H, W)`` segment or a ``(N, T, C, H, W)`` batch of segments."""
        x = np.asarray(x)
        if x.ndim not in (4, 5):
            raise ShapeError("input must be (T, C, H, W) or (N, T, C, H, W)", ndim=x.ndim)
        t_axis = x.ndim - 4
        if x.shape[t_axis] != self.T:
            raise ShapeError("segment length does not match the net", T_input=x.shape[t_axis], T_net=self.T)
        if x.shape[-1] < 8 or x.shape[-2] < 8:
            raise ShapeError("frames must be at least 8x8", H=x.shape[-2], W=x.shape[-1])
        frames = [Tensor(np.ascontiguousarray(np.take(x, t, axis=t_axis)).astype(self.dtype, copy=False))
                  for t in range(self.T)]
        out = self.forward_frames(frames)

        def stack(ts):
            return np.stack([t.data for t in ts], axis=t_axis)

        return ModelOutput(
            s_hat=stack(out.s_hat),
            c_hat=stack(out.c_hat),
            d=stack(out.d) if keep_features else None,
            a=stack(out.a) if keep_features else None,
        )

    __call__ = forward

    @property
    def dtype(self):
        return self.shared.layers[0].params["weight"].dtype

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise KeyError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            v = np.asarray(values[name])
            if v.shape != p.shape:
                raise ShapeError(f"parameter {name} has the wrong shape: {v.shape} vs {p.shape}")
            p.data = v.astype(p.dtype, copy=True)

    def copy(self) -> "TwoStreamNet":
        return copy.deepcopy(self)


def ablate(net: TwoStreamNet, mode: str, seed: int | None = None) -> TwoStreamNet:
    """Return a modified copy of ``net`` for an ablation run.

    ``no_detection`` fixes theta at 1 and takes the detection stream out of the
    loss.  ``plain_cnn`` swaps every dense unit for a plain chain; parameters
    whose name and shape survive the swap are copied over, the rest are
    freshly initialised from ``seed`` (default: the net's own seed).
    """
    if mode == "none":
        return net.copy()
    if mode == "no_detection":
        out = net.copy()
        out.theta = 1.0
        out.detach_detection = True
        return out
    if mode == "plain_cnn":
        out = TwoStreamNet(net.channels, net.T, net.theta, net.seed if seed is None else seed, plain_cnn=True)
        out.detach_detection = net.detach_detection
        old = net.parameters()
        for name, p in out.named_parameters():
            if name in old and old[name].shape == p.shape:
                p.data = old[name].data.copy()
        out.astype(net.dtype)
        return out
    raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATIONS}")


def segment_starts(n_frames: int, T: int) -> list[int]:
    """Start indices tiling ``n_frames`` into length-``T`` segments.

    Segments do not overlap except the last, which is re-anchored to end on the
    final frame when ``n_frames`` is not a multiple of ``T``.
    """
    if n_frames < T:
        raise ValueError(f"need at least T={T} frames, got {n_frames}")
    starts = list(range(0, n_frames - T + 1, T))
    if starts[-1] + T < n_frames:
        starts.append(n_frames - T)
    return starts


def derain_video(net: TwoStreamNet, video: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run ``net`` over a ``(F, C, H, W)`` video; returns ``(c_hat, s_hat)`` of the same shape.

    Videos shorter than ``T`` are padded by repeating the last frame.
    Overlapping frames of a re-anchored final segment take the later segment's output.
    """
    video = np.asarray(video, dtype=np.float32)
    n = video.shape[0]
    padded = video
    if n < net.T:
        padded = np.concatenate([video, np.repeat(video[-1:], net.T - n, axis=0)])
    c_hat = np.empty_like(padded)
    s_hat = np.empty_like(padded)
    for start in segment_starts(len(padded), net.T):
        out = net.forward(padded[start:start + net.T])
        c_hat[start:start + net.T] = out.c_hat
        s_hat[start:start + net.T] = out.s_hat
    return c_hat[:n], s_hat[:n]
