"""Independent brute-force references the package is checked against."""

from __future__ import annotations

import itertools
import struct
from collections.abc import Sequence

import numpy as np


def idx_bytes(values: np.ndarray, magic: int) -> bytes:
    header = struct.pack(">I", magic) + struct.pack(f">{values.ndim}I", *values.shape)
    return header + np.ascontiguousarray(values, dtype=np.uint8).tobytes()


def rule_bit(rule: int, left: int, centre: int, right: int) -> int:
    return (rule >> (4 * left + 2 * centre + right)) & 1


def ca_step_loop(state: Sequence[int], rule: int) -> list[int]:
    width = len(state)
    return [
        rule_bit(rule, state[(i - 1) % width], state[i], state[(i + 1) % width])
        for i in range(width)
    ]


def dense_mpo(cores: Sequence[np.ndarray], boundary: np.ndarray) -> np.ndarray:
    """Tr(G M^{s1 t1}...M^{sN tN}) as a tensor with axes (s1..sN, t1..tN)."""
    d = cores[0].shape[-1]
    bond = boundary.shape[0]
    chain = boundary.reshape(bond, bond, 1, 1)
    for core in cores:
        rows, cols = chain.shape[2] * d, chain.shape[3] * d
        chain = np.einsum("abxy,bcst->acxsyt", chain, core).reshape(bond, bond, rows, cols)
    return np.einsum("aaxy->xy", chain).reshape((d,) * (2 * len(cores)))


def weight_from_dense(operator: np.ndarray, phis: np.ndarray, site: int) -> np.ndarray:
    """Unnormalized H(site): the dense operator with every other leg closed by φ."""
    sites = len(phis)
    outs = [chr(ord("a") + j) for j in range(sites)]
    ins = [chr(ord("A") + j) for j in range(sites)]
    terms, operands = ["".join(outs + ins)], [operator]
    for j in range(sites):
        if j != site:
            terms += [outs[j], ins[j]]
            operands += [phis[j], phis[j]]
    subscripts = f"{','.join(terms)}->{outs[site]}{ins[site]}"
    return np.einsum(subscripts, *operands, optimize=True)


def normalized_weight(
    cores: Sequence[np.ndarray], boundary: np.ndarray, phis: np.ndarray, site: int
) -> np.ndarray:
    """H(site) with both contexts divided by their Frobenius norms."""
    bond = boundary.shape[0]
    thetas = [np.einsum("s,ijst,t->ij", phi, core, phi) for core, phi in zip(cores, phis)]
    left = np.eye(bond)
    for theta in thetas[:site]:
        left = left @ theta
    right = boundary
    for theta in reversed(thetas[site + 1 :]):
        right = theta @ right
    left = left / np.linalg.norm(left)
    right = right / np.linalg.norm(right)
    return np.einsum("ca,abst,bc->st", left, cores[site], right)


def dense_mps_logits(
    cores: Sequence[np.ndarray],
    class_tensor: np.ndarray,
    boundary: np.ndarray,
    phis: np.ndarray,
) -> np.ndarray:
    """Σ over all 2^N configurations of Tr(B A..A C^c A..A) Π φ."""
    sites, d = phis.shape
    middle = sites // 2
    logits = np.zeros(class_tensor.shape[0])
    for config in itertools.product(range(d), repeat=sites):
        weight = np.prod([phis[j, s] for j, s in enumerate(config)])
        left = boundary
        for j in range(middle):
            left = left @ cores[j][config[j]]
        right = np.eye(boundary.shape[0])
        for j in range(middle, sites):
            right = right @ cores[j][config[j]]
        for c in range(len(logits)):
            logits[c] += weight * np.trace(left @ class_tensor[c] @ right)
    return logits


def expm_taylor(matrix: np.ndarray, terms: int = 40) -> np.ndarray:
    result = np.eye(len(matrix))
    term = np.eye(len(matrix))
    for k in range(1, terms):
        term = term @ matrix / k
        result = result + term
    return result


def swap_matrix(d: int) -> np.ndarray:
    out = np.zeros((d * d, d * d))
    for a in range(d):
        for b in range(d):
            out[b * d + a, a * d + b] = 1.0
    return out


def attention_loop(
    phi: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray | None = None
) -> np.ndarray:
    sites, d = phi.shape
    q = [wq @ phi[j] for j in range(sites)]
    k = [wk @ phi[j] for j in range(sites)]
    v = q if wv is None else [wv @ phi[j] for j in range(sites)]
    out = np.zeros((sites, d))
    for j in range(sites):
        for l in range(sites):
            out[j] += float(q[j] @ k[l]) * v[l]
    return out


def unit_rows(rng: np.random.Generator, sites: int, d: int) -> np.ndarray:
    phi = rng.standard_normal((sites, d))
    return phi / np.linalg.norm(phi, axis=-1, keepdims=True)


def numeric_gradient(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[index] += step
        down[index] -= step
        grad[index] = (fn(up) - fn(down)) / (2 * step)
    return grad
