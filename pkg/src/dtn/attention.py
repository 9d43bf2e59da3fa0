"""Linear dot-attention written as an MPO layer.

The permutation MPO has a "before" vacuum, d² channel states and an "after"
vacuum. A swap opens at site i (before -> channel), the channel is carried
across, and closes at site l (channel -> after), so the traced chain is
Σ_{i<l} P_il. Sandwiching only the open/close entries between the key matrix
(output leg) and the query matrix (input leg) gives a layer whose output is

    m_j = c_j φ_j + (W^K)ᵀ Σ_{i≠j} q_i (k_i·q_j),
    c_j = Σ_{i<l; i,l≠j} (q_i·k_l)(k_i·q_l),

for L2-normalized embeddings, which differs from linear attention
ψ_j = Σ_l (q_j·k_l) q_l only by a local residual term.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import dataclass
from typing import Any

import numpy as np

from dtn.conf import make_rng
from dtn.errors import AttentionError
from dtn.mpo import MpoLayer
from dtn.mpo import forward
from dtn.tensor import Tensor

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-10
DEFAULT_TOLERANCE = 1e-10


@dataclass(frozen=True)
class PermutationMpo:
    core: np.ndarray
    boundary: np.ndarray
    # (a, a') blocks that open or close a swap; only these get the W^K/W^Q sandwich
    swap_blocks: np.ndarray

    @property
    def bond_dim(self) -> int:
        return self.core.shape[0]

    @property
    def local_dim(self) -> int:
        return self.core.shape[-1]


@dataclass(frozen=True)
class EquivalenceRow:
    sites: int
    local_dim: int
    trials: int
    max_deviation: float
    passed: bool


def _channel(d: int, x: int, y: int) -> int:
    return 1 + d * x + y


def build_permutation_mpo(d: int) -> PermutationMpo:
    """Core M̃[a, a', s, t] (s output leg, t input leg) and boundary G̃.

    Bond dimension d² + 2: before = 0, channel (x, y) = 1 + d·x + y,
    after = d² + 1.
    """
    if d < 2:
        raise AttentionError(f"local dimension must be >= 2, got {d}")
    bond = d * d + 2
    before, after = 0, bond - 1
    core = np.zeros((bond, bond, d, d))
    blocks = np.zeros((bond, bond), dtype=bool)
    eye = np.eye(d)
    for state in range(bond):
        core[state, state] = eye
    for x in range(d):
        for y in range(d):
            channel = _channel(d, x, y)
            core[before, channel, x, y] = 1.0
            core[channel, after, y, x] = 1.0
            blocks[before, channel] = blocks[channel, after] = True
    boundary = np.zeros((bond, bond))
    boundary[after, before] = 1.0
    return PermutationMpo(core, boundary, blocks)


def single_vacuum_permutation_mpo(d: int) -> PermutationMpo:
    """The single-vacuum variant with bond dimension d² + 1.

    It has no vacuum carry, so the traced chain is the swap for two sites but
    only P_1N plus products of adjacent block swaps for longer chains.
    """
    if d < 2:
        raise AttentionError(f"local dimension must be >= 2, got {d}")
    bond = d * d + 1
    core = np.zeros((bond, bond, d, d))
    blocks = np.zeros((bond, bond), dtype=bool)
    for t in range(d):
        for s in range(d):
            channel = d * t + s + 1
            core[0, channel, t, s] = 1.0
            core[channel, 0, s, t] = 1.0
            blocks[0, channel] = blocks[channel, 0] = True
    for state in range(1, bond):
        core[state, state] = np.eye(d)
    boundary = np.zeros((bond, bond))
    boundary[0, 0] = 1.0
    return PermutationMpo(core, boundary, blocks)


def _check_square(name: str, matrix: np.ndarray, d: int) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (d, d):
        raise AttentionError(f"{name} must be ({d}, {d}), got {matrix.shape}")
    return matrix


def assemble_attention_layer(wq: Any, wk: Any, permutation: PermutationMpo) -> MpoLayer:
    """Uniform linear layer with unnormalized contexts and no residual."""
    d = permutation.local_dim
    wq = _check_square("wq", wq, d)
    wk = _check_square("wk", wk, d)
    sandwiched = np.einsum("xs,abxy,yt->abst", wk, permutation.core, wq)
    core = np.where(permutation.swap_blocks[:, :, None, None], sandwiched, permutation.core)
    return MpoLayer(
        Tensor(core),
        boundary=Tensor(permutation.boundary),
        activation="linear",
        residual=False,
        normalize_output=False,
        normalize_contexts=False,
    )


def _check_normalized(emb: Any) -> np.ndarray:
    phi = np.asarray(emb.data if isinstance(emb, Tensor) else emb, dtype=np.float64)
    if phi.ndim != 2:
        raise AttentionError(f"embeddings must be (N, d), got {phi.shape}")
    norms = np.linalg.norm(phi, axis=-1)
    if np.any(np.abs(norms - 1.0) > NORMALIZATION_TOLERANCE):
        raise AttentionError("attention identities need L2-normalized embeddings")
    return phi


def _queries_keys(
    phi: np.ndarray, wq: np.ndarray, wk: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    return phi @ wq.T, phi @ wk.T


def linear_attention_reference(emb: Any, wq: Any, wk: Any) -> np.ndarray:
    """ψ_j = Σ_l (q_j·k_l) q_l."""
    phi = _check_normalized(emb)
    d = phi.shape[1]
    q, k = _queries_keys(phi, _check_square("wq", wq, d), _check_square("wk", wk, d))
    return (q @ k.T) @ q


def spectator_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """c_j = Σ_{i<l; i,l≠j} (q_i·k_l)(k_i·q_l) for every site j."""
    pair = (q @ k.T) * (k @ q.T)
    total = np.sum(np.triu(pair, k=1))
    involving = pair.sum(axis=1) - np.diag(pair)
    return total - involving


def attention_layer_output(emb: Any, wq: Any, wk: Any) -> np.ndarray:
    phi = _check_normalized(emb)
    layer = assemble_attention_layer(wq, wk, build_permutation_mpo(phi.shape[1]))
    return forward(layer, Tensor(phi)).numpy()


def verify_equivalence(emb: Any, wq: Any, wk: Any) -> float:
    """Largest deviation of the layer output from the two closed forms."""
    phi = _check_normalized(emb)
    d = phi.shape[1]
    wq = _check_square("wq", wq, d)
    wk = _check_square("wk", wk, d)
    m = attention_layer_output(phi, wq, wk)
    q, k = _queries_keys(phi, wq, wk)
    c = spectator_weights(q, k)
    overlaps = k @ q.T  # [i, j] = k_i·q_j
    others = overlaps.T @ q - np.diag(overlaps)[:, None] * q  # Σ_{i≠j} q_i (k_i·q_j)
    expected = c[:, None] * phi + others @ wk
    corrected = m - c[:, None] * phi + (np.diag(overlaps)[:, None] * q) @ wk
    reference = linear_attention_reference(phi, wq, wk) @ wk
    return float(max(np.max(np.abs(m - expected)), np.max(np.abs(corrected - reference))))


def attention_readout(
    m: Any, emb: Any, wq: Any, wk: Any, wv: Any | None = None
) -> np.ndarray:
    """Map the layer output back to linear-attention values.

    Removes the spectator term, adds the i = j term, undoes (W^K)ᵀ and, with
    a value matrix, applies W^V (W^Q)⁻¹.
    """
    phi = _check_normalized(emb)
    d = phi.shape[1]
    wq = _check_square("wq", wq, d)
    wk = _check_square("wk", wk, d)
    m = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    q, k = _queries_keys(phi, wq, wk)
    self_overlap = np.sum(k * q, axis=-1)
    corrected = m - spectator_weights(q, k)[:, None] * phi + (self_overlap[:, None] * q) @ wk
    try:
        values = np.linalg.solve(wk.T, corrected.T).T
        if wv is not None:
            wv = _check_square("wv", wv, d)
            values = (wv @ np.linalg.solve(wq, values.T)).T
    except np.linalg.LinAlgError as exc:
        raise AttentionError("readout needs invertible key and query matrices") from exc
    return values


def _random_instance(
    rng: np.random.Generator, sites: int, d: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    phi = rng.standard_normal((sites, d))
    phi /= np.linalg.norm(phi, axis=-1, keepdims=True)
    return phi, rng.standard_normal((d, d)), rng.standard_normal((d, d))


def verify_sweep(
    sites_range: Iterable[int],
    dims: Iterable[int],
    trials: int = 100,
    tolerance: float = DEFAULT_TOLERANCE,
    seed: int = 0,
) -> list[EquivalenceRow]:
    rng = make_rng(seed)
    rows = []
    dims = list(dims)
    for sites in sites_range:
        for d in dims:
            worst = max(
                verify_equivalence(*_random_instance(rng, sites, d)) for _ in range(trials)
            )
            row = EquivalenceRow(sites, d, trials, worst, worst < tolerance)
            logger.info(
                "N=%d d=%d max deviation %.3g %s",
                sites,
                d,
                worst,
                "ok" if row.passed else "FAILED",
            )
            rows.append(row)
    return rows


def dense_operator(core: np.ndarray, boundary: np.ndarray, sites: int) -> np.ndarray:
    """Σ Tr(G M^{s1 t1} ... M^{sN tN}) as a d^N × d^N matrix (outputs × inputs)."""
    d = core.shape[-1]
    chain = core
    for _ in range(1, sites):
        chain = np.einsum("abST,bcst->acSsTt", chain, core)
        rows = chain.shape[2] * chain.shape[3]
        chain = chain.reshape(chain.shape[0], chain.shape[1], rows, rows)
    operator = np.einsum("ba,abST->ST", boundary, chain)
    return operator.reshape(d**sites, d**sites)


def transposition_sum(sites: int, d: int) -> np.ndarray:
    """Σ_{i<j} P_ij on (C^d)^{⊗N}."""
    size = d**sites
    total = np.zeros((size, size))
    digits = np.array(np.unravel_index(np.arange(size), (d,) * sites)).T
    for i in range(sites):
        for j in range(i + 1, sites):
            swapped = digits.copy()
            swapped[:, [i, j]] = swapped[:, [j, i]]
            targets = np.ravel_multi_index(swapped.T, (d,) * sites)
            total[targets, np.arange(size)] += 1.0
    return total


def permutation_mpo_matches(sites: int, d: int) -> bool:
    permutation = build_permutation_mpo(d)
    dense = dense_operator(permutation.core, permutation.boundary, sites)
    return bool(np.array_equal(dense, transposition_sum(sites, d)))
