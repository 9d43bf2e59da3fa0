from __future__ import annotations

import numpy as np
import pytest

from dtn.embedding import embed
from dtn.errors import ConfigurationError
from dtn.errors import HeadError
from dtn.errors import UnknownTopologyError
from dtn.model import DeepTensorNetwork
from dtn.model import build_network
from dtn.model import forward_classify
from dtn.model import forward_sequence
from dtn.model import propagate
from dtn.mpo import init_layer
from dtn.mps import init_head
from dtn.mps import logits
from dtn.tensor import Tape


def test_zero_layers_is_the_head(rng):
    head = init_head(rng, 3, 4, sites=6, noise=0.2)
    net = DeepTensorNetwork((), head)
    x = rng.random((2, 6))
    np.testing.assert_array_equal(
        forward_classify(net, x).numpy(), logits(head, embed(x)).numpy()
    )


@pytest.mark.parametrize("depth", [1, 3])
def test_identity_layers_change_nothing(rng, depth):
    head = init_head(rng, 3, 4, sites=6, noise=0.2)
    layers = tuple(init_layer(rng, 2, noise=0.0) for _ in range(depth))
    x = rng.random((2, 6))
    deep = forward_classify(DeepTensorNetwork(layers, head), x).numpy()
    shallow = forward_classify(DeepTensorNetwork((), head), x).numpy()
    np.testing.assert_allclose(deep, shallow, rtol=1e-12)


def test_decoder_without_layers_returns_input(rng):
    x = rng.random((3, 5))
    np.testing.assert_allclose(forward_sequence(DeepTensorNetwork(), x).numpy(), x)


def test_identity_sigmoid_layer_decodes_to_logistic_ratio(rng):
    net = DeepTensorNetwork((init_layer(rng, 2, noise=0.0, activation="sigmoid"),))
    x = rng.random(4)
    first, second = 1.0 / (1.0 + np.exp(-x)), 1.0 / (1.0 + np.exp(-(1.0 - x)))
    np.testing.assert_allclose(forward_sequence(net, x).numpy(), first / (first + second))


def test_propagate_applies_layers_in_order(rng):
    net = build_network(rng, depth=2, mpo_bond_dim=2, mpo_noise=0.3, activation="relu")
    emb = embed(rng.random(5))
    expected = net.layers[1].forward(net.layers[0].forward(emb))
    np.testing.assert_array_equal(propagate(net, emb).numpy(), expected.numpy())


def test_classify_needs_a_head(rng):
    with pytest.raises(HeadError):
        forward_classify(DeepTensorNetwork(), rng.random(3))


def test_local_dimensions_must_agree(rng):
    with pytest.raises(ConfigurationError):
        DeepTensorNetwork((init_layer(rng, 2, local_dim=3),))


def test_build_classifier_needs_head_bond(rng):
    with pytest.raises(ConfigurationError):
        build_network(rng, depth=1, mpo_bond_dim=2, num_classes=3)


def test_uniform_flag(rng):
    assert build_network(rng, depth=1, mpo_bond_dim=2, head_bond_dim=2, num_classes=2).uniform
    assert not build_network(
        rng, depth=1, mpo_bond_dim=2, head_bond_dim=2, num_classes=2, sites=4
    ).uniform


def test_parameter_names_and_count(rng):
    net = build_network(rng, depth=2, mpo_bond_dim=3, head_bond_dim=2, num_classes=5)
    names = list(net.parameters())
    assert names == [
        "layers.0.cores",
        "layers.0.boundary",
        "layers.1.cores",
        "layers.1.boundary",
        "head.cores",
        "head.class_tensor",
        "head.boundary",
    ]
    assert net.head_parameter_names() == names[4:]
    assert net.parameter_count() == 2 * (36 + 9) + (8 + 20 + 4)


def test_with_parameters_replaces_one_tensor(rng):
    net = build_network(rng, depth=1, mpo_bond_dim=2)
    zeros = np.zeros((2, 2))
    updated = net.with_parameters({"layers.0.boundary": zeros})
    np.testing.assert_array_equal(updated.layers[0].boundary.numpy(), zeros)
    np.testing.assert_array_equal(
        updated.layers[0].cores.numpy(), net.layers[0].cores.numpy()
    )
    with pytest.raises(ConfigurationError):
        net.with_parameters({"layers.4.cores": zeros})


def test_bind_records_every_parameter(rng):
    net = build_network(rng, depth=1, mpo_bond_dim=2, head_bond_dim=2, num_classes=2)
    tape = Tape()
    bound = net.bind(tape)
    assert sorted(tape.parameters) == sorted(net.parameters())
    assert all(value.tracked for value in bound.parameters().values())


def test_topology_round_trip(rng):
    net = build_network(
        rng, depth=2, mpo_bond_dim=2, head_bond_dim=3, num_classes=4, sites=5, residual=True
    )
    params = {name: value.numpy() for name, value in net.parameters().items()}
    rebuilt = DeepTensorNetwork.from_topology(net.topology(), params)
    x = rng.random(5)
    np.testing.assert_array_equal(
        forward_classify(rebuilt, x).numpy(), forward_classify(net, x).numpy()
    )


def test_unknown_topology_kind():
    with pytest.raises(UnknownTopologyError):
        DeepTensorNetwork.from_topology({"kind": "mlp"}, {})
    with pytest.raises(UnknownTopologyError):
        DeepTensorNetwork.from_topology({"kind": "dtn", "layers": []}, {})
