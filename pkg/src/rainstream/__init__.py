"""Video deraining with a two-stream (detection + removal) ConvLSTM network.

Subpackages by concern:

- ``tensor``: arrays, differentiable primitives, reverse-mode tape
- ``layers`` / ``model``: dense units, ConvLSTM, the two-stream net
- ``trainer``: loss, Adam, two-phase schedule
- ``rainsynth``: streak renderer and dataset builder
- ``analysis``: CC curves, rain statistics, PSNR/SSIM
- ``storage``: tensor/frame/checkpoint/config formats
- ``estimator``: scikit-learn style ``TwoStreamDerainer``
"""
from .analysis import cc, cc_curve, psnr, rain_stats, ssim
from .estimator import TwoStreamDerainer
from .model import TwoStreamNet, ablate, derain_video, fuse
from .rainsynth import RainConfig, build_dataset, composite, render_streaks
from .tensor import ShapeError, Tape, Tensor, backward
from .trainer import LossWeights, TrainPhasePlan, loss, train

__version__ = "0.1.0"

__all__ = [
    "RainConfig",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainPhasePlan",
    "LossWeights",
    "TwoStreamDerainer",
    "TwoStreamNet",
    "ablate",
    "backward",
    "build_dataset",
    "cc",
    "cc_curve",
    "composite",
    "derain_video",
    "fuse",
    "loss",
    "psnr",
    "rain_stats",
    "render_streaks",
    "ssim",
    "train",
]
