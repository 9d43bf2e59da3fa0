"""MPS classification head.

``logit_c = Tr(B̃ · T(1)···T(k) · C^c · T(k+1)···T(N))`` with
``T(j) = Σ_s φ_s(j) A^s(j)`` and ``k = N // 2``.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Mapping
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from dtn.errors import HeadError
from dtn.errors import ShapeMismatchError
from dtn.tensor import Tape
from dtn.tensor import Tensor
from dtn.tensor import add
from dtn.tensor import as_tensor
from dtn.tensor import div
from dtn.tensor import einsum
from dtn.tensor import exp
from dtn.tensor import frobenius_norm
from dtn.tensor import log
from dtn.tensor import matmul
from dtn.tensor import mul
from dtn.tensor import reshape
from dtn.tensor import softmax
from dtn.tensor import stack
from dtn.tensor import tensor_sum

logger = logging.getLogger(__name__)

DEFAULT_NOISE = 1e-2


@dataclass(frozen=True)
class MpsHead:
    cores: Tensor
    class_tensor: Tensor
    boundary: Tensor
    rescale: bool = True

    def __post_init__(self) -> None:
        shape = self.cores.shape
        if self.cores.ndim not in (3, 4) or shape[-2] != shape[-1]:
            raise HeadError(f"cores must be (d, D, D) or (N, d, D, D), got {shape}")
        bond = self.bond_dim
        if self.class_tensor.ndim != 3 or self.class_tensor.shape[1:] != (bond, bond):
            raise HeadError(
                f"class tensor must be (classes, {bond}, {bond}), "
                f"got {self.class_tensor.shape}"
            )
        if self.num_classes < 2:
            raise HeadError(f"a head needs at least 2 classes, got {self.num_classes}")
        if self.boundary.shape != (bond, bond):
            raise HeadError(f"boundary must be ({bond}, {bond}), got {self.boundary.shape}")

    @property
    def uniform(self) -> bool:
        return self.cores.ndim == 3

    @property
    def sites(self) -> int | None:
        return None if self.uniform else self.cores.shape[0]

    @property
    def bond_dim(self) -> int:
        return self.cores.shape[-1]

    @property
    def local_dim(self) -> int:
        return self.cores.shape[-3]

    @property
    def num_classes(self) -> int:
        return self.class_tensor.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "cores": self.cores,
            "class_tensor": self.class_tensor,
            "boundary": self.boundary,
        }

    def with_parameters(self, params: Mapping[str, Any]) -> MpsHead:
        unknown = set(params) - set(self.parameters())
        if unknown:
            raise HeadError(f"unknown head parameters: {sorted(unknown)}")
        return dataclasses.replace(
            self, **{name: as_tensor(value) for name, value in params.items()}
        )

    def bind(self, tape: Tape, prefix: str = "") -> MpsHead:
        return self.with_parameters(
            {
                name: tape.parameter(f"{prefix}{name}", value.data)
                for name, value in self.parameters().items()
            }
        )

    def parameter_count(self) -> int:
        return sum(value.size for value in self.parameters().values())

    def topology(self) -> dict[str, Any]:
        return {"rescale": self.rescale}

    @classmethod
    def from_topology(cls, topology: Mapping[str, Any], params: Mapping[str, Any]) -> MpsHead:
        return cls(
            cores=as_tensor(params["cores"]),
            class_tensor=as_tensor(params["class_tensor"]),
            boundary=as_tensor(params["boundary"]),
            rescale=topology["rescale"],
        )

    def logits(self, emb: Any) -> Tensor:
        return logits(self, emb)


def init_head(
    rng: np.random.Generator,
    bond_dim: int,
    num_classes: int,
    local_dim: int = 2,
    sites: int | None = None,
    noise: float = DEFAULT_NOISE,
    rescale: bool = True,
) -> MpsHead:
    """Near-identity head: A^s, C^c and B̃ are I + N(0, noise²)."""
    eye = np.eye(bond_dim)
    core_shape = (local_dim, bond_dim, bond_dim)
    if sites is not None:
        core_shape = (sites, *core_shape)
    cores = eye + rng.normal(0.0, noise, size=core_shape)
    class_tensor = eye + rng.normal(0.0, noise, size=(num_classes, bond_dim, bond_dim))
    boundary = eye + rng.normal(0.0, noise, size=(bond_dim, bond_dim))
    logger.debug(
        "init mps head D=%d classes=%d sites=%s noise=%g", bond_dim, num_classes, sites, noise
    )
    return MpsHead(Tensor(cores), Tensor(class_tensor), Tensor(boundary), rescale=rescale)


def site_matrices(head: MpsHead, emb: Tensor) -> Tensor:
    """T(j) = Σ_s φ_s(j) A^s(j) for a batch, shape (B, N, D, D)."""
    if head.uniform:
        return einsum("zns,sij->znij", emb, head.cores)
    return einsum("zns,nsij->znij", emb, head.cores)


def _rescaled(matrix: Tensor, scale: Tensor | None) -> tuple[Tensor, Tensor]:
    norm = frobenius_norm(matrix, axis=(-2, -1))
    if np.any(norm.data == 0.0):
        raise HeadError("running product vanished during head evaluation")
    step = log(norm)
    scale = step if scale is None else add(scale, step)
    return div(matrix, reshape(norm, (*norm.shape, 1, 1))), scale


def logits(head: MpsHead, emb: Any) -> Tensor:
    """Class logits for one sequence (N, d) or a batch (B, N, d)."""
    emb = as_tensor(emb)
    single = emb.ndim == 2
    if single:
        emb = reshape(emb, (1, *emb.shape))
    if emb.ndim != 3 or emb.shape[-1] != head.local_dim:
        raise ShapeMismatchError(
            f"head expects (B, N, {head.local_dim}) embeddings, got {emb.shape}"
        )
    batch, sites = emb.shape[:2]
    if head.sites is not None and sites != head.sites:
        raise ShapeMismatchError(f"head has {head.sites} sites, embeddings have {sites}")

    matrices = site_matrices(head, emb)
    middle = sites // 2
    bond = head.bond_dim
    left = mul(head.boundary, np.ones((batch, 1, 1)))
    right = Tensor(np.broadcast_to(np.eye(bond), (batch, bond, bond)))
    left_scale = right_scale = None
    for site in range(middle):
        left = matmul(left, matrices[:, site])
        if head.rescale:
            left, left_scale = _rescaled(left, left_scale)
    for site in range(sites - 1, middle - 1, -1):
        right = matmul(matrices[:, site], right)
        if head.rescale:
            right, right_scale = _rescaled(right, right_scale)

    values = einsum("zij,cjk,zki->zc", left, head.class_tensor, right)
    scales = [scale for scale in (left_scale, right_scale) if scale is not None]
    if scales:
        total = scales[0] if len(scales) == 1 else add(*scales)
        values = mul(values, reshape(exp(total), (batch, 1)))
    return reshape(values, (head.num_classes,)) if single else values


def class_probabilities(logits: Any) -> Tensor:
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise HeadError("logits must be finite")
    return softmax(logits, axis=-1)


def ensemble_logits(members: Sequence[Any]) -> Tensor:
    """Arithmetic mean of member logits."""
    if not members:
        raise HeadError("an ensemble needs at least one member")
    items = [as_tensor(member) for member in members]
    shapes = {item.shape for item in items}
    if len(shapes) != 1:
        raise HeadError(f"member logits disagree in shape: {sorted(shapes)}")
    return div(tensor_sum(stack(items, axis=0), axis=0), float(len(items)))
