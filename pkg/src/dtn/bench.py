"""Forward-pass timings of a single MPO layer over chain length and bond
dimension."""

from __future__ import annotations

import csv
import logging
import time
from collections.abc import Iterable
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dtn.conf import make_rng
from dtn.embedding import embed
from dtn.mpo import cost_estimate
from dtn.mpo import forward
from dtn.mpo import init_layer

logger = logging.getLogger(__name__)

DEFAULT_SITES = (16, 32, 64, 128, 256, 512)
DEFAULT_BOND_DIMS = (8, 16)
DEFAULT_REPEATS = 5
MIN_R_SQUARED = 0.98
DOUBLING_RATIO_RANGE = (3.0, 6.0)


@dataclass(frozen=True)
class BenchRow:
    sites: int
    bond_dim: int
    rank: int
    seconds: float
    cost: int


def time_forward(
    sites: int,
    bond_dim: int,
    rank: int,
    rng: np.random.Generator,
    repeats: int = DEFAULT_REPEATS,
    batch: int = 1,
) -> BenchRow:
    """Best of `repeats` forward passes of a uniform layer with rank-`rank` G."""
    layer = init_layer(rng, bond_dim, boundary_rank=rank)
    emb = embed(rng.random((batch, sites)))
    forward(layer, emb)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        forward(layer, emb)
        best = min(best, time.perf_counter() - start)
    return BenchRow(sites, bond_dim, rank, best, cost_estimate(layer, sites))


def run_bench(
    sites: Iterable[int] = DEFAULT_SITES,
    bond_dims: Iterable[int] = DEFAULT_BOND_DIMS,
    rank: int = 1,
    repeats: int = DEFAULT_REPEATS,
    seed: int = 0,
) -> list[BenchRow]:
    rng = make_rng(seed)
    rows = []
    sites = list(sites)
    for bond_dim in bond_dims:
        for count in sites:
            row = time_forward(count, bond_dim, rank, rng, repeats)
            logger.info("N=%d D=%d rank=%d %.4fs", count, bond_dim, rank, row.seconds)
            rows.append(row)
    return rows


def linear_fit_r_squared(x: Sequence[float], y: Sequence[float]) -> float:
    """Coefficient of determination of the least-squares line through (x, y)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    residual = np.sum((y - (slope * x + intercept)) ** 2)
    total = np.sum((y - y.mean()) ** 2)
    return 1.0 if total == 0 else float(1.0 - residual / total)


def r_squared_by_bond(rows: Sequence[BenchRow]) -> dict[int, float]:
    """Linearity in N for every bond dimension."""
    fits = {}
    for bond_dim in sorted({row.bond_dim for row in rows}):
        subset = [row for row in rows if row.bond_dim == bond_dim]
        if len(subset) >= 2:
            fits[bond_dim] = linear_fit_r_squared(
                [row.sites for row in subset], [row.seconds for row in subset]
            )
    return fits


def doubling_ratios(rows: Sequence[BenchRow]) -> dict[tuple[int, int], float]:
    """time(2D) / time(D) keyed by (N, D) for every measured doubling."""
    times = {(row.sites, row.bond_dim): row.seconds for row in rows}
    return {
        (sites, bond_dim): times[(sites, 2 * bond_dim)] / seconds
        for (sites, bond_dim), seconds in times.items()
        if (sites, 2 * bond_dim) in times
    }


def check_scaling(rows: Sequence[BenchRow]) -> bool:
    """Linear in N, and roughly fourfold per bond-dimension doubling at the
    largest N."""
    fits = r_squared_by_bond(rows)
    linear = all(value > MIN_R_SQUARED for value in fits.values())
    ratios = doubling_ratios(rows)
    if ratios:
        largest = max(sites for sites, _ in ratios)
        low, high = DOUBLING_RATIO_RANGE
        quadratic = all(
            low <= ratio <= high for (sites, _), ratio in ratios.items() if sites == largest
        )
    else:
        quadratic = True
    return linear and quadratic


def write_bench_csv(rows: Sequence[BenchRow], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["N", "D", "rank", "seconds", "cost"])
        for row in rows:
            writer.writerow([row.sites, row.bond_dim, row.rank, f"{row.seconds:.6g}", row.cost])
