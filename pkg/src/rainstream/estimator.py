"""scikit-learn style wrapper around the two-stream deraining net."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .analysis import psnr
from .model import ABLATIONS, TwoStreamNet, ablate, derain_video
from .trainer import TrainPhasePlan, crop_cubes, train
from .validation import check_pair, check_videos


class TwoStreamDerainer(TransformerMixin, BaseEstimator):
    """Learn to split rain videos into rain streaks and clean content.

    ``fit(X, y)`` takes rain videos ``X`` and their clean versions ``y``
    (``(F, C, H, W)`` arrays, an ``(N, F, C, H, W)`` stack, or a list);
    the streak target is ``X - y``.  ``transform``/``predict`` return the
    restored clean videos in the same container shape as ``X``.

    Parameters
    ----------
    T : int
        Segment length seen by the net.
    theta : float
        Fusion degree in [0, 1].
    cube : tuple of int
        ``(T, H, W)`` training crop; its first entry must equal ``T``.
    stride : int or None
        Spatial stride between crops; None tiles without overlap.
    phase1_steps, phase2_steps : int
        Adam steps in the detection-heavy and removal-heavy phases.
    batch_size, lr, clip_norm :
        Optimiser settings.
    ablation : {"none", "no_detection", "plain_cnn"}
    random_state : int
        Seeds initialisation, cropping and batch order.
    """

    def __init__(self, T: int = 9, theta: float = 0.5, cube=(9, 64, 64), stride=None,
                 phase1_steps: int = 1000, phase2_steps: int = 1000, batch_size: int = 16,
                 lr: float = 1e-4, clip_norm=None, ablation: str = "none", random_state: int = 0):
        self.T = T
        self.theta = theta
        self.cube = cube
        self.stride = stride
        self.phase1_steps = phase1_steps
        self.phase2_steps = phase2_steps
        self.batch_size = batch_size
        self.lr = lr
        self.clip_norm = clip_norm
        self.ablation = ablation
        self.random_state = random_state

    def _build_net(self, channels: int) -> TwoStreamNet:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if tuple(self.cube)[0] != self.T:
            raise ValueError(f"cube length {self.cube[0]} must equal T={self.T}")
        net = TwoStreamNet(channels, self.T, self.theta, seed=self.random_state)
        return net if self.ablation == "none" else ablate(net, self.ablation)

    def fit(self, X, y):
        xs = check_videos(X, "X", min_frames=self.T)
        ys = check_videos(y, "y", min_frames=self.T)
        check_pair(xs, ys)
        channels = xs[0].shape[1]
        if any(v.shape[1] != channels for v in xs):
            raise ValueError("all videos must have the same channel count")
        cubes = []
        for i, (x, c) in enumerate(zip(xs, ys)):
            cubes += crop_cubes(x, x - c, c, tuple(self.cube), self.stride, seed=self.random_state + i)
        net = self._build_net(channels)
        plan = TrainPhasePlan(phase1_steps=self.phase1_steps, phase2_steps=self.phase2_steps)
        result = train(cubes, net, plan, batch_size=self.batch_size, seed=self.random_state,
                       lr=self.lr, clip_norm=self.clip_norm)
        self.net_ = result.net
        self.train_log_ = result.log
        self.n_channels_ = channels
        return self

    def _run(self, X, which: int):
        check_is_fitted(self, "net_")
        videos = check_videos(X, "X", channels=self.n_channels_)
        outs = [derain_video(self.net_, v)[which] for v in videos]
        if isinstance(X, np.ndarray):
            return outs[0] if X.ndim == 4 else np.stack(outs)
        return outs

    def transform(self, X):
        """Restored clean videos."""
        return self._run(X, 0)

    predict = transform

    def predict_streaks(self, X):
        """Estimated rain-streak layers."""
        return self._run(X, 1)

    def score(self, X, y):
        """Mean PSNR (dB) of the restored videos against ``y``."""
        preds = self.transform(X)
        refs = check_videos(y, "y")
        preds = [preds] if isinstance(preds, np.ndarray) and preds.ndim == 4 else list(preds)
        return float(np.mean([psnr(np.clip(p, 0, 1), r)[1] for p, r in zip(preds, refs)]))
