"""Encoder-decoder transformer for 2D keypoint regression, built on numpy.

The package carries its own reverse-mode autodiff (:mod:`pef.autodiff`),
transformer blocks, set-prediction loss with Hungarian matching, training
loop, COCO-style evaluation and a command-line front end (``pef``).
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, finite_difference_check, no_grad
from .data import AugmentationSpec, KeypointInstance, synthetic_dataset
from .evaluate import EvalMetrics, evaluate, oks, predict_joints
from .matching import hungarian, match_cost, set_loss
from .model import ModelConfig, PoseModel, load_checkpoint, save_checkpoint
from .train import ScheduleConfig, train

__all__ = [
    "AugmentationSpec", "EvalMetrics", "KeypointInstance", "ModelConfig", "PoseModel",
    "ScheduleConfig", "Tensor", "backward", "evaluate", "finite_difference_check",
    "hungarian", "load_checkpoint", "match_cost", "no_grad", "oks", "predict_joints",
    "save_checkpoint", "set_loss", "synthetic_dataset", "train",
]
