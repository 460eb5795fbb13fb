"""Post-hoc Bayesian neural networks via Bayesian normalization layers."""

from .autodiff import Tensor, backward, finite_diff_check, no_grad
from .ensemble import EnsembleConfig, PredictiveBundle, entropy, mutual_information, predict
from .layers import BNL, Linear, Norm, NormKind, VILinear, bnl_forward, norm_forward, vi_linear_forward
from .model import ArchSpec, Checkpoint, HiddenSpec, Network, build, convert_to_abnn, load, save
from .train import ModeSet, RandomPrior, TrainConfig, finetune_abnn, map_loss, pretrain, random_prior_loss

__all__ = [
    "ArchSpec", "BNL", "Checkpoint", "EnsembleConfig", "HiddenSpec", "Linear", "ModeSet", "Network",
    "Norm", "NormKind", "PredictiveBundle", "RandomPrior", "Tensor", "TrainConfig", "VILinear",
    "backward", "bnl_forward", "build", "convert_to_abnn", "entropy", "finetune_abnn", "finite_diff_check",
    "load", "map_loss", "mutual_information", "no_grad", "norm_forward", "predict", "pretrain",
    "random_prior_loss", "save", "vi_linear_forward",
]
__version__ = "0.1.0"
