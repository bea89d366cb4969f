"""Brute-force Monte-Carlo moment estimation, used as a test oracle.

Nothing here imports :mod:`endp.layers`; samplers are written out by the
caller as straight-line draws of the random quantity being checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionMismatch
from .gaussian import GaussianVector
from .rng import keyed_generator

MIN_DRAWS = 10_000
CHUNK = 50_000

Sampler = Callable[[np.random.Generator, int], np.ndarray]


@dataclass(frozen=True)
class OracleReport:
    mean_rel_err: float
    cov_rel_err: float
    draws: int = 0
    seed: int = 0

    def passes(self, tol: float) -> bool:
        return self.mean_rel_err <= tol and self.cov_rel_err <= tol


def oracle_tolerance(base: float, dim: int) -> float:
    """Statistical tolerance for a fixed draw count; doubled above 50 dimensions."""
    return 2.0 * base if dim > 50 else base


def _merge(a, b):
    # Chan et al. pairwise combination of (count, mean, centred scatter)
    na, ma, sa = a
    nb, mb, sb = b
    n = na + nb
    delta = mb - ma
    mean = ma + delta * (nb / n)
    scatter = sa + sb + np.outer(delta, delta) * (na * nb / n)
    return n, mean, scatter


def mc_moments(sampler: Sampler, draws: int, seed: int) -> GaussianVector:
    """Empirical mean and (N - 1) covariance of ``draws`` outputs of ``sampler``.

    ``sampler(rng, count)`` returns a (count, d) array, one output vector per draw.
    Chunk statistics are reduced with a fixed pairwise tree so the estimate is
    reproducible for a given (draws, seed).
    """
    if draws < MIN_DRAWS:
        raise ValueError(f"the oracle needs at least {MIN_DRAWS} draws, got {draws}")
    parts = []
    for c, start in enumerate(range(0, draws, CHUNK)):
        count = min(CHUNK, draws - start)
        x = np.asarray(sampler(keyed_generator(seed, (c,)), count), dtype=np.float64)
        x = x.reshape(count, -1)
        m = x.mean(axis=0)
        xc = x - m
        parts.append((count, m, xc.T @ xc))
    while len(parts) > 1:
        merged = [_merge(parts[i], parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    n, mean, scatter = parts[0]
    return GaussianVector(mean, scatter / (n - 1))


def compare_layer(analytic: GaussianVector, oracle: GaussianVector,
                  draws: int = 0, seed: int = 0) -> OracleReport:
    if analytic.dim != oracle.dim:
        raise DimensionMismatch(f"analytic dim {analytic.dim} vs oracle dim {oracle.dim}")
    mean_err = np.linalg.norm(analytic.mean - oracle.mean) / max(np.linalg.norm(oracle.mean), 1e-12)
    cov_err = np.linalg.norm(analytic.cov - oracle.cov) / max(np.linalg.norm(oracle.cov), 1e-12)
    return OracleReport(float(mean_err), float(cov_err), draws, seed)
