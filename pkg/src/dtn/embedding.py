from __future__ import annotations

from typing import Any

import numpy as np

from dtn.errors import FeatureRangeError
from dtn.errors import ShapeMismatchError
from dtn.errors import ZeroNormError
from dtn.tensor import Tensor
from dtn.tensor import absolute
from dtn.tensor import as_tensor
from dtn.tensor import contract
from dtn.tensor import div
from dtn.tensor import frobenius_norm
from dtn.tensor import tensor_sum

LOCAL_DIM = 2


def embed(x: Any) -> Tensor:
    """Map features in [0, 1] to local vectors (x, 1 - x).

    Accepts a single feature vector of shape (N,) or a batch (B, N); the
    result gains a trailing local axis of extent 2.
    """
    values = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if values.ndim == 0 or values.shape[-1] < 1:
        raise ShapeMismatchError(f"expected at least one feature, got shape {values.shape}")
    inside = (values >= 0.0) & (values <= 1.0)
    if not np.all(inside):
        bad = values[~inside].reshape(-1)[0]
        raise FeatureRangeError(f"feature {bad!r} is outside [0, 1]")
    return Tensor(np.stack([values, 1.0 - values], axis=-1))


def decode(psi: Any) -> Tensor:
    """First component of |ψ| after L1 normalization at every site.

    Differentiable; a batch of sequences decodes to shape (B, N).
    """
    psi = as_tensor(psi)
    magnitude = absolute(psi)
    total = tensor_sum(magnitude, axis=-1)
    if np.any(total.data == 0.0):
        raise ZeroNormError("cannot decode a site with zero L1 norm")
    first = np.zeros(psi.shape[-1])
    first[0] = 1.0
    return div(contract(magnitude, first, [(-1, 0)]), total)


def l2_normalize(phi: Any) -> Tensor:
    """Scale every local vector to unit Euclidean length."""
    phi = as_tensor(phi)
    norm = frobenius_norm(phi, axis=-1, keepdims=True)
    if np.any(norm.data == 0.0):
        raise ZeroNormError("cannot L2-normalize a zero local vector")
    return div(phi, norm)


def random_embedding(
    rng: np.random.Generator, sites: int, local_dim: int = LOCAL_DIM, normalize: bool = True
) -> Tensor:
    """Synthetic embedding with Gaussian local vectors, for local_dim other than 2."""
    values = rng.standard_normal((sites, local_dim))
    if normalize:
        values /= np.linalg.norm(values, axis=-1, keepdims=True)
    return Tensor(values)
