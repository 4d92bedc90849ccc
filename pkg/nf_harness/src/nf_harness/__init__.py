"""RealNVP variational family trained by reverse KL against a bimodal target."""

from .realnvp import CouplingLayer, RealNVP, alternating_masks
from .target import BimodalMixture, GaussianBase, make_prior, make_target, target_mean
from .train import (
    HalfSpaceStats,
    TrainRecord,
    collapse_verdict,
    half_space_stats,
    reverse_kl_loss,
    train,
)

__version__ = "0.1.0"
