"""Gaussian random vectors: representation, factorisation, sampling, moments, KL."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import EnsembleTooSmall, NonPositivePriorVariance, NotFactorizable, NotSymmetric, DimensionMismatch
from .rng import keyed_normals

SYMMETRY_TOL = 1e-9
PSD_TOL = 1e-8
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


def symmetry_error(cov: np.ndarray) -> float:
    """Largest absolute asymmetry, relative to max(1, max|cov|)."""
    cov = np.asarray(cov)
    if cov.size == 0:
        return 0.0
    scale = max(1.0, float(np.max(np.abs(cov))))
    return float(np.max(np.abs(cov - cov.T))) / scale


def psd_floor(cov: np.ndarray) -> float:
    """The most negative eigenvalue tolerated for ``cov``: -1e-8 * trace / d."""
    d = cov.shape[0]
    return -PSD_TOL * max(float(np.trace(cov)), 0.0) / max(d, 1)


class InvariantMonitor:
    """Thread-safe counters of symmetry/PSD checks run on propagated covariances."""

    def __init__(self):
        self._lock = threading.Lock()
        self.checks = 0
        self.failures = 0
        self.worst = 0.0

    def record(self, cov: np.ndarray) -> bool:
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        ok_all = True
        with self._lock:
            for c in cov:
                sym = symmetry_error(c)
                lo = float(np.linalg.eigvalsh(0.5 * (c + c.T))[0]) if c.size else 0.0
                ok = sym <= SYMMETRY_TOL and lo >= psd_floor(c)
                self.checks += 1
                if not ok:
                    self.failures += 1
                    ok_all = False
                    self.worst = min(self.worst, lo)
        return ok_all

    def reset(self):
        with self._lock:
            self.checks = self.failures = 0
            self.worst = 0.0

    def as_dict(self) -> dict:
        return {"checks": self.checks, "failures": self.failures, "worst_eigenvalue": self.worst}


MONITOR = InvariantMonitor()


@dataclass(frozen=True)
class GaussianVector:
    """Mean vector and full covariance.  The covariance is symmetrised on construction."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        cov = np.array(self.cov, dtype=np.float64)
        if cov.ndim != 2 or cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(f"mean has length {mean.size} but cov has shape {cov.shape}")
        cov = 0.5 * (cov + cov.T)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def point(cls, mean) -> "GaussianVector":
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        return cls(mean, np.zeros((mean.size, mean.size)))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.cov)[0]) if self.dim else 0.0

    def is_valid(self) -> bool:
        return symmetry_error(self.cov) <= SYMMETRY_TOL and self.min_eigenvalue() >= psd_floor(self.cov)

    def project_psd(self) -> "GaussianVector":
        """Clip negative eigenvalues at zero."""
        w, v = np.linalg.eigh(self.cov)
        return GaussianVector(self.mean, (v * np.clip(w, 0.0, None)) @ v.T)


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    jitter_used: float = 0.0


@dataclass(frozen=True)
class Ensemble:
    samples: np.ndarray
    seed: int
    source_dim: int = field(default=-1)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise DimensionMismatch("ensemble samples must be an N x d matrix")
        if samples.shape[0] < 2:
            raise EnsembleTooSmall(f"an ensemble needs N >= 2 members, got {samples.shape[0]}")
        object.__setattr__(self, "samples", samples)
        if self.source_dim < 0:
            object.__setattr__(self, "source_dim", samples.shape[1])

    @property
    def size(self) -> int:
        return self.samples.shape[0]


def cholesky(cov) -> CholeskyFactor:
    """Lower Cholesky factor, climbing a relative jitter ladder until it succeeds.

    The jitter is ``j * trace(cov) / d`` for ``j`` in ``JITTER_LADDER``; the first
    rung that factorises is recorded in ``jitter_used``.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] < 1:
        raise DimensionMismatch(f"expected a non-empty square matrix, got {cov.shape}")
    if symmetry_error(cov) > SYMMETRY_TOL:
        raise NotSymmetric(f"asymmetry {symmetry_error(cov):.3g} exceeds {SYMMETRY_TOL}")
    cov = 0.5 * (cov + cov.T)
    d = cov.shape[0]
    scale = float(np.trace(cov)) / d
    if not np.isfinite(scale):
        raise NotFactorizable("covariance contains non-finite entries")
    if scale <= 0.0:
        scale = 1.0
    eye = np.eye(d)
    for rung in JITTER_LADDER:
        jitter = rung * scale
        try:
            lower = np.linalg.cholesky(cov + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(lower) > 0):
            return CholeskyFactor(lower, jitter)
    raise NotFactorizable("jitter ladder exhausted; covariance is badly indefinite")


def _sampling_factor(g: GaussianVector) -> np.ndarray:
    try:
        return cholesky(g.cov).lower
    except NotFactorizable:
        # the ladder failed: repair by eigenvalue clipping, then factorise again
        return cholesky(g.project_psd().cov).lower


def sample_ensemble(g: GaussianVector, n: int, seed: int, key: tuple[int, ...] = ()) -> Ensemble:
    """Draw ``n`` rows ``mean + L eps_i`` with ``eps_i`` keyed on ``(seed, key, i)``."""
    if n < 2:
        raise EnsembleTooSmall(f"n must be >= 2, got {n}")
    if not np.any(g.cov):
        samples = np.broadcast_to(g.mean, (n, g.dim)).copy()
        return Ensemble(samples, seed, g.dim)
    lower = _sampling_factor(g)
    eps = keyed_normals(seed, key, n, g.dim)
    return Ensemble(g.mean + eps @ lower.T, seed, g.dim)


def ensemble_moments(e: Ensemble) -> GaussianVector:
    """Sample mean and (N - 1)-normalised sample covariance."""
    x = e.samples
    n = x.shape[0]
    if n < 2:
        raise EnsembleTooSmall(f"need N >= 2, got {n}")
    # shift by the first row so identical rows give exactly zero covariance
    shifted = x - x[0]
    offset = shifted.mean(axis=0)
    centred = shifted - offset
    return GaussianVector(x[0] + offset, centred.T @ centred / (n - 1))


def kl_gaussian_diag_prior(q_mean, q_cov, prior_var: float) -> float:
    """KL( N(q_mean, q_cov) || N(0, prior_var I) )."""
    if not prior_var > 0:
        raise NonPositivePriorVariance(f"prior variance must be positive, got {prior_var}")
    q_mean = np.asarray(q_mean, dtype=np.float64).reshape(-1)
    q_cov = np.asarray(q_cov, dtype=np.float64)
    d = q_mean.size
    if q_cov.shape != (d, d):
        raise DimensionMismatch(f"q_cov shape {q_cov.shape} does not match mean length {d}")
    factor = cholesky(q_cov)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor.lower))))
    return 0.5 * (np.trace(q_cov) / prior_var + q_mean @ q_mean / prior_var
                  - d + d * np.log(prior_var) - logdet)
