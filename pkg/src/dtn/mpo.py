"""The MPO layer.

A layer holds core tensors ``M[a, a', s, t]`` (bond, bond, output leg, input
leg), either one per site or a single shared core, and a boundary matrix ``G``.
For a product-state input it computes, for every site at once, the local
weight ``H(j)`` obtained by contracting the rest of the network with the input
embeddings, and maps ``φ(j)`` to ``σ(H(j) φ(j))``.

Inputs are batch-first ``(B, N, d)``; a single ``(N, d)`` sequence works too.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any

import numpy as np

from dtn.errors import ConfigurationError
from dtn.errors import DegenerateContextError
from dtn.errors import LayerError
from dtn.errors import ShapeMismatchError
from dtn.tensor import Tape
from dtn.tensor import Tensor
from dtn.tensor import absolute
from dtn.tensor import add
from dtn.tensor import as_tensor
from dtn.tensor import div
from dtn.tensor import einsum
from dtn.tensor import frobenius_norm
from dtn.tensor import matmul
from dtn.tensor import matrix_exp_2x2
from dtn.tensor import mul
from dtn.tensor import relu
from dtn.tensor import reshape
from dtn.tensor import sigmoid
from dtn.tensor import stack
from dtn.tensor import tensor_sum
from dtn.tensor import transpose

logger = logging.getLogger(__name__)

ACTIVATIONS = ("linear", "sigmoid", "relu", "matrix_exp")
OUTPUT_NORMS = ("l2", "l1")
DEFAULT_NOISE = 1e-2


@dataclass(frozen=True)
class MpoLayer:
    cores: Tensor
    boundary: Tensor | None = None
    boundary_factors: tuple[Tensor, Tensor] | None = None
    activation: str = "linear"
    residual: bool = False
    normalize_output: bool = False
    normalize_contexts: bool = True
    output_norm: str = "l2"

    def __post_init__(self) -> None:
        shape = self.cores.shape
        if self.cores.ndim not in (4, 5) or shape[-4] != shape[-3] or shape[-2] != shape[-1]:
            raise ConfigurationError(
                f"cores must be (D, D, d, d) or (N, D, D, d, d), got {shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )
        if self.output_norm not in OUTPUT_NORMS:
            raise ConfigurationError(
                f"unknown output norm {self.output_norm!r}, expected one of {OUTPUT_NORMS}"
            )
        if self.activation == "matrix_exp" and self.local_dim != 2:
            raise ConfigurationError(
                f"matrix_exp activation needs local dimension 2, got {self.local_dim}"
            )
        if (self.boundary is None) == (self.boundary_factors is None):
            raise ConfigurationError("give exactly one of boundary or boundary_factors")
        bond = self.bond_dim
        if self.boundary is not None and self.boundary.shape != (bond, bond):
            raise ConfigurationError(
                f"boundary must be ({bond}, {bond}), got {self.boundary.shape}"
            )
        if self.boundary_factors is not None:
            left, right = self.boundary_factors
            if left.ndim != 2 or left.shape != right.shape or left.shape[0] != bond:
                raise ConfigurationError(
                    f"boundary factors must both be ({bond}, r), "
                    f"got {left.shape} and {right.shape}"
                )
            if left.shape[1] > bond:
                raise ConfigurationError(f"boundary rank {left.shape[1]} exceeds {bond}")

    @property
    def uniform(self) -> bool:
        return self.cores.ndim == 4

    @property
    def sites(self) -> int | None:
        return None if self.uniform else self.cores.shape[0]

    @property
    def bond_dim(self) -> int:
        return self.cores.shape[-3]

    @property
    def local_dim(self) -> int:
        return self.cores.shape[-1]

    @property
    def boundary_rank(self) -> int:
        if self.boundary_factors is not None:
            return self.boundary_factors[0].shape[1]
        return self.bond_dim

    def dense_boundary(self) -> Tensor:
        if self.boundary is not None:
            return self.boundary
        left, right = self.boundary_factors  # type: ignore[misc]
        return matmul(left, transpose(right))

    def parameters(self) -> dict[str, Tensor]:
        params = {"cores": self.cores}
        if self.boundary is not None:
            params["boundary"] = self.boundary
        else:
            left, right = self.boundary_factors  # type: ignore[misc]
            params["boundary_u"] = left
            params["boundary_v"] = right
        return params

    def with_parameters(self, params: Mapping[str, Any]) -> MpoLayer:
        current = self.parameters()
        unknown = set(params) - set(current)
        if unknown:
            raise LayerError(f"unknown layer parameters: {sorted(unknown)}")
        merged = {name: as_tensor(params.get(name, value)) for name, value in current.items()}
        changes: dict[str, Any] = {"cores": merged["cores"]}
        if "boundary" in merged:
            changes["boundary"] = merged["boundary"]
        else:
            changes["boundary_factors"] = (merged["boundary_u"], merged["boundary_v"])
        return dataclasses.replace(self, **changes)

    def bind(self, tape: Tape, prefix: str = "") -> MpoLayer:
        return self.with_parameters(
            {
                name: tape.parameter(f"{prefix}{name}", value.data)
                for name, value in self.parameters().items()
            }
        )

    def parameter_count(self) -> int:
        return sum(value.size for value in self.parameters().values())

    def topology(self) -> dict[str, Any]:
        return {
            "activation": self.activation,
            "residual": self.residual,
            "normalize_output": self.normalize_output,
            "normalize_contexts": self.normalize_contexts,
            "output_norm": self.output_norm,
        }

    @classmethod
    def from_topology(cls, topology: Mapping[str, Any], params: Mapping[str, Any]) -> MpoLayer:
        boundary = params.get("boundary")
        factors = None
        if boundary is None:
            factors = (as_tensor(params["boundary_u"]), as_tensor(params["boundary_v"]))
        return cls(
            cores=as_tensor(params["cores"]),
            boundary=None if boundary is None else as_tensor(boundary),
            boundary_factors=factors,
            activation=topology["activation"],
            residual=topology["residual"],
            normalize_output=topology["normalize_output"],
            normalize_contexts=topology["normalize_contexts"],
            output_norm=topology["output_norm"],
        )

    def forward(self, emb: Any) -> Tensor:
        return forward(self, emb)


def init_layer(
    rng: np.random.Generator,
    bond_dim: int,
    local_dim: int = 2,
    sites: int | None = None,
    noise: float = DEFAULT_NOISE,
    boundary_rank: int | None = None,
    **flags: Any,
) -> MpoLayer:
    """Near-identity layer: M = δ_st·I + N(0, noise²), G = I.

    A rank-r boundary is stored as factors U = V = the first r columns of I.
    """
    base = np.einsum("ij,st->ijst", np.eye(bond_dim), np.eye(local_dim))
    shape = base.shape if sites is None else (sites, *base.shape)
    cores = np.broadcast_to(base, shape) + rng.normal(0.0, noise, size=shape)
    if boundary_rank is None:
        boundary, factors = Tensor(np.eye(bond_dim)), None
    else:
        if not 1 <= boundary_rank <= bond_dim:
            raise ConfigurationError(f"boundary rank must be in [1, {bond_dim}]")
        column = np.eye(bond_dim)[:, :boundary_rank]
        boundary, factors = None, (Tensor(column), Tensor(column))
    logger.debug(
        "init mpo layer D=%d d=%d sites=%s rank=%s noise=%g",
        bond_dim,
        local_dim,
        sites,
        boundary_rank,
        noise,
    )
    return MpoLayer(Tensor(cores), boundary=boundary, boundary_factors=factors, **flags)


def theta(core: Any, phi: Any) -> Tensor:
    """Θ_{a,a'} = Σ_{s,t} φ_s M^{s,t}_{a,a'} φ_t for one site."""
    return einsum("s,ijst,t->ij", phi, core, phi)


def local_weight(hl: Any, core: Any, hr: Any) -> Tensor:
    """H^{s,t} = Tr(hl · M^{s,t} · hr) for one site."""
    return einsum("ca,abst,bc->st", hl, core, hr)


def _batched(layer: MpoLayer, emb: Any) -> tuple[Tensor, bool]:
    emb = as_tensor(emb)
    single = emb.ndim == 2
    if single:
        emb = reshape(emb, (1, *emb.shape))
    if emb.ndim != 3:
        raise ShapeMismatchError(f"embeddings must be (N, d) or (B, N, d), got {emb.shape}")
    if emb.shape[-1] != layer.local_dim:
        raise ShapeMismatchError(
            f"layer has local dimension {layer.local_dim}, embeddings {emb.shape[-1]}"
        )
    if layer.sites is not None and emb.shape[1] != layer.sites:
        raise ShapeMismatchError(
            f"layer has {layer.sites} sites, embeddings have {emb.shape[1]}"
        )
    return emb, single


def _unbatched(value: Tensor, single: bool) -> Tensor:
    return reshape(value, value.shape[1:]) if single else value


def site_thetas(layer: MpoLayer, emb: Tensor) -> Tensor:
    """Θ for every site of a batch, shape (B, N, D, D)."""
    if layer.uniform:
        return einsum("zns,ijst,znt->znij", emb, layer.cores, emb)
    return einsum("zns,nijst,znt->znij", emb, layer.cores, emb)


def _normalized(context: Tensor, side: str, site: int) -> Tensor:
    norm = frobenius_norm(context, axis=(-2, -1), keepdims=True)
    if np.any(norm.data == 0.0):
        raise DegenerateContextError(f"{side} context at site {site} has zero norm")
    return div(context, norm)


def _left_chain(layer: MpoLayer, thetas: Tensor) -> list[Tensor]:
    batch, sites = thetas.shape[:2]
    if layer.boundary_factors is None:
        bond = layer.bond_dim
        start = Tensor(np.broadcast_to(np.eye(bond), (batch, bond, bond)))
    else:
        start = mul(transpose(layer.boundary_factors[1]), np.ones((batch, 1, 1)))
    current = _normalized(start, "left", 0) if layer.normalize_contexts else start
    contexts = [current]
    for site in range(1, sites):
        current = matmul(current, thetas[:, site - 1])
        if layer.normalize_contexts:
            current = _normalized(current, "left", site)
        contexts.append(current)
    return contexts


def _right_chain(layer: MpoLayer, thetas: Tensor) -> list[Tensor]:
    batch, sites = thetas.shape[:2]
    if layer.boundary_factors is None:
        start = mul(layer.boundary, np.ones((batch, 1, 1)))
    else:
        start = mul(layer.boundary_factors[0], np.ones((batch, 1, 1)))
    current = _normalized(start, "right", sites - 1) if layer.normalize_contexts else start
    contexts = [current]
    for site in range(sites - 2, -1, -1):
        current = matmul(thetas[:, site + 1], current)
        if layer.normalize_contexts:
            current = _normalized(current, "right", site)
        contexts.append(current)
    contexts.reverse()
    return contexts


def left_contexts(layer: MpoLayer, emb: Any) -> Tensor:
    """H^L(j) for every site, stacked on the site axis.

    With a factored boundary U·Vᵀ the left contexts carry Vᵀ, so each one is
    (r, D) instead of (D, D).
    """
    batch, single = _batched(layer, emb)
    return _unbatched(stack(_left_chain(layer, site_thetas(layer, batch)), axis=1), single)


def right_contexts(layer: MpoLayer, emb: Any) -> Tensor:
    """H^R(j) for every site; (D, r) per site with a factored boundary."""
    batch, single = _batched(layer, emb)
    return _unbatched(stack(_right_chain(layer, site_thetas(layer, batch)), axis=1), single)


def _local_weights(layer: MpoLayer, emb: Tensor) -> Tensor:
    thetas = site_thetas(layer, emb)
    hl = stack(_left_chain(layer, thetas), axis=1)
    hr = stack(_right_chain(layer, thetas), axis=1)
    if layer.uniform:
        return einsum("znca,abst,znbc->znst", hl, layer.cores, hr)
    return einsum("znca,nabst,znbc->znst", hl, layer.cores, hr)


def local_weights(layer: MpoLayer, emb: Any) -> Tensor:
    """H(j) for every site, shape (N, d, d) or (B, N, d, d)."""
    batch, single = _batched(layer, emb)
    return _unbatched(_local_weights(layer, batch), single)


def _activate(layer: MpoLayer, weights: Tensor, emb: Tensor) -> Tensor:
    if layer.activation == "matrix_exp":
        return einsum("znst,znt->zns", matrix_exp_2x2(weights), emb)
    psi = einsum("znst,znt->zns", weights, emb)
    if layer.activation == "sigmoid":
        return sigmoid(psi)
    if layer.activation == "relu":
        return relu(psi)
    return psi


def _normalize_output(psi: Tensor, norm_kind: str) -> Tensor:
    if norm_kind == "l1":
        norm = tensor_sum(absolute(psi), axis=-1, keepdims=True)
    else:
        norm = frobenius_norm(psi, axis=-1, keepdims=True)
    if np.any(norm.data == 0.0):
        raise LayerError("cannot normalize a zero output vector")
    return div(psi, norm)


def forward(layer: MpoLayer, emb: Any) -> Tensor:
    """Update every site from the input embeddings in parallel."""
    batch, single = _batched(layer, emb)
    psi = _activate(layer, _local_weights(layer, batch), batch)
    if layer.residual:
        psi = add(psi, batch)
    if layer.normalize_output:
        psi = _normalize_output(psi, layer.output_norm)
    return _unbatched(psi, single)


def cost_estimate(layer: MpoLayer, sites: int, rank_g: int | None = None) -> int:
    """Dominant operation count N·d²·D²·rank(G) of one forward pass."""
    rank = layer.boundary_rank if rank_g is None else rank_g
    if not 1 <= rank <= layer.bond_dim:
        raise ConfigurationError(f"rank of G must be in [1, {layer.bond_dim}], got {rank}")
    return sites * layer.local_dim**2 * layer.bond_dim**2 * rank
