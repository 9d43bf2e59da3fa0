from __future__ import annotations

import numpy as np
import pytest

from dtn.embedding import decode
from dtn.embedding import embed
from dtn.embedding import l2_normalize
from dtn.embedding import random_embedding
from dtn.errors import FeatureRangeError
from dtn.errors import ShapeMismatchError
from dtn.errors import ZeroNormError


@pytest.mark.parametrize(
    "x,expected",
    [
        ([0.0], [[0.0, 1.0]]),
        ([1.0], [[1.0, 0.0]]),
        ([0.25], [[0.25, 0.75]]),
    ],
)
def test_embed(x, expected):
    np.testing.assert_array_equal(embed(x).numpy(), expected)


def test_embed_batch_shape():
    assert embed(np.full((3, 7), 0.5)).shape == (3, 7, 2)


@pytest.mark.parametrize("bad", [[-0.1], [1.5], [0.2, np.nan]])
def test_embed_rejects_out_of_range(bad):
    with pytest.raises(FeatureRangeError):
        embed(bad)


def test_embed_rejects_empty_input():
    with pytest.raises(ShapeMismatchError):
        embed(np.zeros((2, 0)))


@pytest.mark.parametrize(
    "psi,expected",
    [
        ([0.3, 0.7], 0.3),
        ([2.0, 2.0], 0.5),
        ([0.0, 1.0], 0.0),
        ([-1.0, 3.0], 0.25),
    ],
)
def test_decode(psi, expected):
    assert decode([psi]).numpy()[0] == pytest.approx(expected)


def test_decode_inverts_embed():
    x = np.array([[0.0, 0.1, 0.5, 0.9, 1.0]])
    np.testing.assert_allclose(decode(embed(x)).numpy(), x)


def test_decode_zero_site():
    with pytest.raises(ZeroNormError):
        decode([[0.0, 0.0]])


def test_l2_normalize():
    out = l2_normalize([[3.0, 4.0], [1.0, 0.0]]).numpy()
    np.testing.assert_allclose(out, [[0.6, 0.8], [1.0, 0.0]])
    with pytest.raises(ZeroNormError):
        l2_normalize([[0.0, 0.0]])


def test_random_embedding_is_normalized(rng):
    emb = random_embedding(rng, 5, local_dim=3).numpy()
    assert emb.shape == (5, 3)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=-1), np.ones(5))
