from __future__ import annotations

from dtn.training.gradcheck import grad_check
from dtn.training.losses import cross_entropy
from dtn.training.losses import cross_entropy_l2
from dtn.training.losses import l2_penalty
from dtn.training.losses import l2_sequence_loss
from dtn.training.optim import OptimizerState
from dtn.training.optim import optimizer_step
from dtn.training.schedule import PlateauScheduler
from dtn.training.schedule import plateau_step
from dtn.training.trainer import EpochRecord
from dtn.training.trainer import Samples
from dtn.training.trainer import TrainResult
from dtn.training.trainer import evaluate
from dtn.training.trainer import kfold_indices
from dtn.training.trainer import predict
from dtn.training.trainer import train

__all__ = [
    "EpochRecord",
    "OptimizerState",
    "PlateauScheduler",
    "Samples",
    "TrainResult",
    "cross_entropy",
    "cross_entropy_l2",
    "evaluate",
    "grad_check",
    "kfold_indices",
    "l2_penalty",
    "l2_sequence_loss",
    "optimizer_step",
    "plateau_step",
    "predict",
    "train",
]
