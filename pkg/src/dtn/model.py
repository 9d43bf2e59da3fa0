from __future__ import annotations

import dataclasses
import logging
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any

import numpy as np

from dtn.embedding import LOCAL_DIM
from dtn.embedding import decode
from dtn.embedding import embed
from dtn.errors import ConfigurationError
from dtn.errors import HeadError
from dtn.errors import UnknownTopologyError
from dtn.mpo import MpoLayer
from dtn.mpo import forward
from dtn.mpo import init_layer
from dtn.mps import MpsHead
from dtn.mps import init_head
from dtn.mps import logits
from dtn.tensor import Tape
from dtn.tensor import Tensor
from dtn.tensor import as_tensor

logger = logging.getLogger(__name__)

TOPOLOGY_KIND = "dtn"


@dataclass(frozen=True)
class DeepTensorNetwork:
    """Embedding, a stack of MPO layers, then an MPS head or the decoder.

    `head=None` means the network ends in the decoder and predicts sequences.
    """

    layers: tuple[MpoLayer, ...] = ()
    head: MpsHead | None = None
    local_dim: int = LOCAL_DIM

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        for index, layer in enumerate(self.layers):
            if layer.local_dim != self.local_dim:
                raise ConfigurationError(
                    f"layer {index} has local dimension {layer.local_dim}, "
                    f"network uses {self.local_dim}"
                )
        if self.head is not None and self.head.local_dim != self.local_dim:
            raise ConfigurationError(
                f"head has local dimension {self.head.local_dim}, network uses {self.local_dim}"
            )

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def uniform(self) -> bool:
        layers_uniform = all(layer.uniform for layer in self.layers)
        return layers_uniform and (self.head is None or self.head.uniform)

    @property
    def is_classifier(self) -> bool:
        return self.head is not None

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for index, layer in enumerate(self.layers):
            for name, value in layer.parameters().items():
                params[f"layers.{index}.{name}"] = value
        if self.head is not None:
            for name, value in self.head.parameters().items():
                params[f"head.{name}"] = value
        return params

    def head_parameter_names(self) -> list[str]:
        return [name for name in self.parameters() if name.startswith("head.")]

    def with_parameters(self, params: Mapping[str, Any]) -> DeepTensorNetwork:
        per_layer: list[dict[str, Any]] = [{} for _ in self.layers]
        head_params: dict[str, Any] = {}
        for name, value in params.items():
            scope, _, rest = name.partition(".")
            if scope == "head" and self.head is not None:
                head_params[rest] = value
            elif scope == "layers":
                index, _, field = rest.partition(".")
                if not index.isdigit() or int(index) >= len(self.layers):
                    raise ConfigurationError(f"unknown parameter {name!r}")
                per_layer[int(index)][field] = value
            else:
                raise ConfigurationError(f"unknown parameter {name!r}")
        layers = tuple(
            layer.with_parameters(update) if update else layer
            for layer, update in zip(self.layers, per_layer)
        )
        head = self.head
        if head is not None and head_params:
            head = head.with_parameters(head_params)
        return dataclasses.replace(self, layers=layers, head=head)

    def bind(self, tape: Tape) -> DeepTensorNetwork:
        """Copy of the network whose parameters are recorded on `tape`."""
        layers = tuple(
            layer.bind(tape, prefix=f"layers.{index}.") for index, layer in enumerate(self.layers)
        )
        head = None if self.head is None else self.head.bind(tape, prefix="head.")
        return dataclasses.replace(self, layers=layers, head=head)

    def parameter_count(self) -> int:
        return sum(value.size for value in self.parameters().values())

    def topology(self) -> dict[str, Any]:
        return {
            "kind": TOPOLOGY_KIND,
            "local_dim": self.local_dim,
            "layers": [layer.topology() for layer in self.layers],
            "head": None if self.head is None else self.head.topology(),
        }

    @classmethod
    def from_topology(
        cls, topology: Mapping[str, Any], params: Mapping[str, Any]
    ) -> DeepTensorNetwork:
        if topology.get("kind") != TOPOLOGY_KIND:
            raise UnknownTopologyError(f"unknown topology kind {topology.get('kind')!r}")
        try:
            layers = []
            for index, layer_topology in enumerate(topology["layers"]):
                prefix = f"layers.{index}."
                layer_params = {
                    name.removeprefix(prefix): value
                    for name, value in params.items()
                    if name.startswith(prefix)
                }
                layers.append(MpoLayer.from_topology(layer_topology, layer_params))
            head = None
            if topology["head"] is not None:
                head_params = {
                    name.removeprefix("head."): value
                    for name, value in params.items()
                    if name.startswith("head.")
                }
                head = MpsHead.from_topology(topology["head"], head_params)
            return cls(tuple(layers), head, int(topology["local_dim"]))
        except KeyError as exc:
            raise UnknownTopologyError(f"topology is missing {exc}") from exc


def build_network(
    rng: np.random.Generator,
    *,
    depth: int,
    mpo_bond_dim: int,
    head_bond_dim: int | None = None,
    num_classes: int | None = None,
    sites: int | None = None,
    local_dim: int = LOCAL_DIM,
    mpo_noise: float = 1e-2,
    head_noise: float = 1e-2,
    boundary_rank: int | None = None,
    **layer_flags: Any,
) -> DeepTensorNetwork:
    """Fresh network. `sites=None` builds a uniform one.

    Without `num_classes` the network ends in the decoder.
    """
    layers = tuple(
        init_layer(
            rng,
            mpo_bond_dim,
            local_dim=local_dim,
            sites=sites,
            noise=mpo_noise,
            boundary_rank=boundary_rank,
            **layer_flags,
        )
        for _ in range(depth)
    )
    head = None
    if num_classes is not None:
        if head_bond_dim is None:
            raise ConfigurationError("a classifier needs head_bond_dim")
        head = init_head(
            rng, head_bond_dim, num_classes, local_dim=local_dim, sites=sites, noise=head_noise
        )
    net = DeepTensorNetwork(layers, head, local_dim)
    logger.debug("built network depth=%d params=%d", depth, net.parameter_count())
    return net


def propagate(net: DeepTensorNetwork, emb: Any) -> Tensor:
    """Run the embeddings through every layer in order."""
    state = as_tensor(emb)
    for layer in net.layers:
        state = forward(layer, state)
    return state


def forward_classify(net: DeepTensorNetwork, x: Any) -> Tensor:
    if net.head is None:
        raise HeadError("network has no classification head")
    return logits(net.head, propagate(net, embed(x)))


def forward_sequence(net: DeepTensorNetwork, x: Any) -> Tensor:
    return decode(propagate(net, embed(x)))
