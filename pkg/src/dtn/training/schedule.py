from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

from dtn.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlateauScheduler:
    """Multiply the learning rate by `gamma` after `patience` epochs without a
    new best (lowest) metric."""

    gamma: float = 0.5
    patience: int = 20
    best_metric: float = math.inf
    epochs_since_improvement: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


def plateau_step(
    sched: PlateauScheduler, metric: float, lr: float
) -> tuple[float, PlateauScheduler]:
    if metric < sched.best_metric:
        return lr, dataclasses.replace(sched, best_metric=metric, epochs_since_improvement=0)
    waited = sched.epochs_since_improvement + 1
    if waited >= sched.patience:
        logger.info(
            "metric plateaued at %.6g, learning rate %.3g -> %.3g",
            sched.best_metric,
            lr,
            lr * sched.gamma,
        )
        return lr * sched.gamma, dataclasses.replace(sched, epochs_since_improvement=0)
    return lr, dataclasses.replace(sched, epochs_since_improvement=waited)
