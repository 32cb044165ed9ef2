"""Two-modality (colour + thermal) segmentation with confidence and correlation gated fusion.

Everything runs on a small NumPy reverse-mode autodiff core; see
:mod:`doodlenet.tensor`.
"""

from .data import SegDataset, SegSample, generate_dataset
from .estimator import DooDLeNetSegmenter
from .evaluate import ConfusionMatrix, evaluate_split, metrics_from_confusion, run_ablation
from .model import VARIANTS, DooDLeNet, ModelConfig
from .tensor import Tensor, grad_check, no_grad
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint

__all__ = [
    "ConfusionMatrix", "DooDLeNet", "DooDLeNetSegmenter", "ModelConfig", "SegDataset",
    "SegSample", "Tensor", "TrainConfig", "VARIANTS", "evaluate_split", "fit",
    "generate_dataset", "grad_check", "load_checkpoint", "metrics_from_confusion", "no_grad",
    "run_ablation", "save_checkpoint",
]
__version__ = "0.1.0"
