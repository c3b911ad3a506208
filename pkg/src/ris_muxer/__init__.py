"""Joint RIS phase-shift and precoder optimisation for multi-user MIMO downlink.

A fully convolutional network maps per-element channel features to RIS
phases; MMSE or WMMSE precoding closes the loop on weighted sum-rate.
"""

from .channel import ChannelDataset, ChannelSet, ChannelSpec, load_dataset, save_dataset, synthesize_dataset
from .evaluation import EvalReport, ecdf, evaluate, rate_region, robustness_curve, tsnr_sweep
from .fcn import ArchSpec, FcnModel, init_model, load_model, save_model
from .precoding import LinkBudget, mmse_precoder, wmmse_precoder, wsr
from .training import TrainConfig, train_discrete, train_two_phase

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "ChannelDataset", "ChannelSet", "ChannelSpec", "EvalReport", "FcnModel", "LinkBudget",
    "TrainConfig", "ecdf", "evaluate", "init_model", "load_dataset", "load_model", "mmse_precoder",
    "rate_region", "robustness_curve", "save_dataset", "save_model", "synthesize_dataset", "train_discrete",
    "train_two_phase", "tsnr_sweep", "wmmse_precoder", "wsr",
]
