"""Adam and AdamW.

    m_t = β1 m + (1 - β1) g
    v_t = β2 v + (1 - β2) g²
    p  <- p - lr · m̂ / (sqrt(v̂) + eps)

Adam folds weight decay into the gradient (g + wd·p). AdamW shrinks the
parameters by lr·wd·p separately.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Mapping
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from dtn.conf import OPTIMIZERS
from dtn.conf import TrainConfig
from dtn.errors import ConfigError
from dtn.errors import ShapeMismatchError


@dataclass(frozen=True)
class OptimizerState:
    kind: str = "adamw"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first: Mapping[str, np.ndarray] = field(default_factory=dict)
    second: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.kind!r}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")

    @classmethod
    def from_config(cls, config: TrainConfig) -> OptimizerState:
        return cls(
            kind=config.optimizer,
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            weight_decay=config.weight_decay,
        )

    def with_lr(self, lr: float) -> OptimizerState:
        return dataclasses.replace(self, lr=lr)


def optimizer_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One update; returns new parameters and state, leaving inputs untouched."""
    if set(params) != set(grads):
        raise ShapeMismatchError(
            f"gradients for {sorted(grads)} do not match parameters {sorted(params)}"
        )
    step = state.step + 1
    bias1 = 1.0 - state.beta1**step
    bias2 = 1.0 - state.beta2**step
    new_params, first, second = {}, {}, {}
    for name, param in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != param.shape:
            raise ShapeMismatchError(
                f"gradient of {name} has shape {grad.shape}, parameter {param.shape}"
            )
        if state.kind == "adam" and state.weight_decay:
            grad = grad + state.weight_decay * param
        m = state.beta1 * state.first.get(name, 0.0) + (1.0 - state.beta1) * grad
        v = state.beta2 * state.second.get(name, 0.0) + (1.0 - state.beta2) * grad * grad
        updated = param
        if state.kind == "adamw" and state.weight_decay:
            updated = updated - state.lr * state.weight_decay * param
        updated = updated - state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        new_params[name], first[name], second[name] = updated, m, v
    return new_params, dataclasses.replace(state, step=step, first=first, second=second)
