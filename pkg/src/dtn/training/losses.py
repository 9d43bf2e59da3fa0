from __future__ import annotations

from collections.abc import Mapping
from typing import Any

import numpy as np

from dtn.errors import InvalidLabelError
from dtn.errors import ShapeMismatchError
from dtn.tensor import Tensor
from dtn.tensor import add
from dtn.tensor import as_tensor
from dtn.tensor import div
from dtn.tensor import log_softmax
from dtn.tensor import mul
from dtn.tensor import neg
from dtn.tensor import sub
from dtn.tensor import tensor_sum


def cross_entropy(logits: Any, labels: Any) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch."""
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels))
    if logits.ndim == 1:
        logits = logits.reshape(1, logits.shape[0])
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeMismatchError(f"{batch} logit rows but labels of shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or np.any((labels < 0) | (labels >= classes)):
        raise InvalidLabelError(f"labels must be integers in [0, {classes}), got {labels}")
    one_hot = np.zeros((batch, classes))
    one_hot[np.arange(batch), labels] = 1.0
    return div(neg(tensor_sum(mul(log_softmax(logits, axis=-1), one_hot))), float(batch))


def l2_penalty(params: Mapping[str, Tensor]) -> Tensor:
    """Σ ‖p‖²_F over the given tensors."""
    total = as_tensor(0.0)
    for value in params.values():
        total = add(total, tensor_sum(mul(value, value)))
    return total


def cross_entropy_l2(
    logits: Any, labels: Any, params: Mapping[str, Tensor], l2: float
) -> Tensor:
    loss = cross_entropy(logits, labels)
    if l2 == 0.0 or not params:
        return loss
    return add(loss, mul(l2_penalty(params), l2))


def l2_sequence_loss(pred: Any, target: Any) -> Tensor:
    """Σ_j (pred_j - target_j)², averaged over the batch for (B, N) inputs."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = sub(pred, target)
    total = tensor_sum(mul(diff, diff))
    if pred.ndim > 1:
        total = div(total, float(pred.shape[0]))
    return total
