"""One-step distillation of flow-matching models on low-dimensional mixtures."""

from .analytic import GaussianMixture, LinearGenerator, MixtureField, marginal_field, preset_mixture
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .estimators import FGMDistiller, FlowMatchingSampler
from .fgm import DistillConfig, DistillState, distill, init_generator
from .flowtrain import NumericalAbort, PretrainConfig, euler_sample, pretrain
from .metrics import energy_distance, field_mse, sliced_wasserstein
from .nets import OneStepGenerator, TimeDistribution, VectorFieldNet
from .tape import Tape, stop_gradient

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "DistillConfig",
    "DistillState",
    "ExperimentConfig",
    "FGMDistiller",
    "FlowMatchingSampler",
    "GaussianMixture",
    "LinearGenerator",
    "MixtureField",
    "NumericalAbort",
    "OneStepGenerator",
    "PretrainConfig",
    "Tape",
    "TimeDistribution",
    "VectorFieldNet",
    "distill",
    "energy_distance",
    "euler_sample",
    "field_mse",
    "init_generator",
    "load_checkpoint",
    "load_config",
    "marginal_field",
    "preset_mixture",
    "pretrain",
    "sliced_wasserstein",
    "stop_gradient",
]
