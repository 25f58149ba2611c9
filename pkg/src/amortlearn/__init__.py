"""Iterative amortized inference on a small numpy autodiff core.

A sequence model maps a learner state plus a minibatch of observations to a
refined state. Three regimes share the machinery: ``parametric`` (the state
is the weight vector of a fixed predictor), ``explicit`` (a learned latent
read by a learned predictor) and ``implicit`` (the state is the prediction
for each query). Training is greedy: step ``t`` sees the stop-gradient of
step ``t - 1``.
"""

from .amortizer import RegimeConfig, build_amortizer, refine, run_refinement
from .config import ExperimentConfig, load_config
from .sequence_model import SequenceModelConfig
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "RegimeConfig",
    "SequenceModelConfig",
    "TrainConfig",
    "Trainer",
    "build_amortizer",
    "load_config",
    "refine",
    "run_refinement",
]
