"""Dense CRF segmentation: mean-field inference, Gaussian filtering and
end-to-end learning of unary and pairwise parameters."""

from .core import VOID, LabelSpace, argmax_labeling, softmax_normalize
from .crf import Compatibility, PairwiseModel
from .filtering import FeatureField, KernelSpec, apply_filter, build_features, build_plan
from .learning import GradientBundle, LossReport, loss_nll, mf_backward, train_step
from .meanfield import MfConfig, MfTrajectory, mf_infer

__version__ = "0.1.0"

__all__ = [
    "VOID", "LabelSpace", "argmax_labeling", "softmax_normalize",
    "Compatibility", "PairwiseModel",
    "FeatureField", "KernelSpec", "apply_filter", "build_features", "build_plan",
    "GradientBundle", "LossReport", "loss_nll", "mf_backward", "train_step",
    "MfConfig", "MfTrajectory", "mf_infer",
]
