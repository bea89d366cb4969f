"""Moment propagation through the layers of a Bayesian CNN (numpy, float64).

These functions are the reference semantics.  The batched torch network in
:mod:`endp.network` computes the same quantities and is tested against them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import block_diag

from .errors import DimensionMismatch, EmptyList, GeometryMismatch, UnknownActivation
from .gaussian import Ensemble, GaussianVector, ensemble_moments, sample_ensemble

SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": lambda x: np.maximum(x, 0.0),
    "elu": _elu,
    "selu": lambda x: SELU_SCALE * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0))),
    "swish": lambda x: x * _sigmoid(x),
    "identity": lambda x: np.asarray(x, dtype=np.float64),
}

DERIVATIVES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": lambda x: (x > 0).astype(np.float64),
    "elu": _elu_grad,
    "selu": lambda x: SELU_SCALE * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0))),
    "swish": lambda x: _sigmoid(x) * (1.0 + x * (1.0 - _sigmoid(x))),
    "identity": lambda x: np.ones_like(x, dtype=np.float64),
}


def activation(name: str) -> Callable[[np.ndarray], np.ndarray]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise UnknownActivation(name) from None


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VariationalConvKernel:
    """vec(W) ~ N(mean, cov_factor cov_factor^T); one per output channel."""

    mean: np.ndarray
    cov_factor: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        factor = np.tril(np.asarray(self.cov_factor, dtype=np.float64))
        if factor.shape != (mean.size, mean.size):
            raise DimensionMismatch(f"cov_factor {factor.shape} vs mean length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov_factor", factor)

    @property
    def cov(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T

    def as_gaussian(self) -> GaussianVector:
        return GaussianVector(self.mean, self.cov)


@dataclass(frozen=True)
class VariationalDenseWeight:
    """Independent Gaussian weight vectors w_h ~ N(means[h], factors[h] factors[h]^T)."""

    means: np.ndarray     # (H, D)
    factors: np.ndarray   # (H, D, D), lower triangular

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        factors = np.tril(np.asarray(self.factors, dtype=np.float64))
        h, d = means.shape
        if factors.shape != (h, d, d):
            raise DimensionMismatch(f"factors {factors.shape} vs means {means.shape}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "factors", factors)

    @classmethod
    def from_variances(cls, means, variances) -> "VariationalDenseWeight":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        sd = np.sqrt(np.atleast_2d(np.asarray(variances, dtype=np.float64)))
        factors = np.einsum("hd,de->hde", sd, np.eye(means.shape[1]))
        return cls(means, factors)

    @property
    def covs(self) -> np.ndarray:
        return np.einsum("hij,hkj->hik", self.factors, self.factors)

    @property
    def n_out(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class PatchMatrix:
    X: np.ndarray
    in_shape: tuple[int, int, int]   # (channels, height, width)
    k: int
    stride: int

    @property
    def out_shape(self) -> tuple[int, int]:
        _, h, w = self.in_shape
        return ((h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1)


@dataclass(frozen=True)
class PoolPlan:
    kept_indices: np.ndarray
    p: int
    s: int
    in_shape: tuple[int, int]
    out_shape: tuple[int, int]


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def patch_indices(in_shape: tuple[int, int, int], k: int, stride: int = 1) -> np.ndarray:
    """Index matrix (positions x k*k*c) into the flattened c*h*w input.

    Columns are ordered channel-major, then kernel row, then kernel column,
    matching ``W.reshape(-1)`` for a (c, k, k) kernel.
    """
    c, h, w = in_shape
    if k < 1 or stride < 1 or h < k or w < k:
        raise GeometryMismatch(f"kernel {k} does not fit input {h}x{w}")
    if (h - k) % stride or (w - k) % stride:
        raise GeometryMismatch(f"(size - k) must be divisible by stride {stride} for {h}x{w}, k={k}")
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    ch, di, dj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    offsets = (ch * h * w + di * w + dj).reshape(-1)
    oi, oj = np.meshgrid(np.arange(oh) * stride, np.arange(ow) * stride, indexing="ij")
    starts = (oi * w + oj).reshape(-1)
    return starts[:, None] + offsets[None, :]


def im2col(image, k: int, stride: int = 1) -> PatchMatrix:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise GeometryMismatch(f"expected a c x h x w image, got shape {image.shape}")
    idx = patch_indices(image.shape, k, stride)
    return PatchMatrix(image.reshape(-1)[idx], tuple(image.shape), k, stride)


def conv_forward(x_patches: PatchMatrix, kernel: VariationalConvKernel) -> GaussianVector:
    X = x_patches.X
    if X.shape[1] != kernel.mean.size:
        raise DimensionMismatch(f"patch width {X.shape[1]} vs kernel length {kernel.mean.size}")
    XL = X @ kernel.cov_factor
    return GaussianVector(X @ kernel.mean, XL @ XL.T)


def conv_forward_random_input(x: GaussianVector, in_shape: tuple[int, int, int],
                              kernel: VariationalConvKernel, k: int,
                              stride: int = 1) -> GaussianVector:
    """Moments of X w when the input image x and the kernel w are independent Gaussians.

    ``x`` is a Gaussian over the flattened ``in_shape`` image.  The cross-covariance
    of patch rows i and j is gathered from ``x.cov``; memory is O((positions*k*k*c)^2).
    """
    if x.dim != int(np.prod(in_shape)):
        raise DimensionMismatch(f"input dim {x.dim} vs image shape {in_shape}")
    idx = patch_indices(in_shape, k, stride)
    if idx.shape[1] != kernel.mean.size:
        raise DimensionMismatch(f"patch width {idx.shape[1]} vs kernel length {kernel.mean.size}")
    m, cov_w = kernel.mean, kernel.cov
    xbar = x.mean[idx]                                      # (Q, P)
    S = x.cov[idx[:, :, None, None], idx[None, None, :, :]]  # (Q, P, Q, P)
    mean = xbar @ m
    cov = (np.einsum("a,iajb,b->ij", m, S, m)
           + xbar @ cov_w @ xbar.T
           + np.einsum("ab,iajb->ij", cov_w, S))
    return GaussianVector(mean, cov)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def activation_endp(z: GaussianVector, act: str, n: int, seed: int,
                    key: tuple[int, ...] = ()) -> GaussianVector:
    """Ensemble moments of act(z): sample, transform each member, re-estimate."""
    f = activation(act)
    ens = sample_ensemble(z, n, seed, key)
    return ensemble_moments(Ensemble(f(ens.samples), seed, z.dim))


def activation_taylor(z: GaussianVector, act: str) -> GaussianVector:
    """First-order linearisation at the mean (comparison backend)."""
    f = activation(act)
    d = DERIVATIVES[act](z.mean)
    return GaussianVector(f(z.mean), d[:, None] * z.cov * d[None, :])


# ---------------------------------------------------------------------------
# pooling, concatenation, fully connected, softmax
# ---------------------------------------------------------------------------

def pool_plan(mean_map: np.ndarray, p: int, s: int) -> PoolPlan:
    """Argmax of the mean within each p x p window; ties go to the lowest flat index."""
    mean_map = np.asarray(mean_map)
    h, w = mean_map.shape
    if p < 1 or s < 1 or h < p or w < p or (h - p) % s or (w - p) % s:
        raise GeometryMismatch(f"pool {p}/{s} does not tile a {h}x{w} map")
    oh, ow = (h - p) // s + 1, (w - p) // s + 1
    di, dj = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
    local = (di * w + dj).reshape(-1)           # increasing flat order within a window
    oi, oj = np.meshgrid(np.arange(oh) * s, np.arange(ow) * s, indexing="ij")
    windows = (oi * w + oj).reshape(-1)[:, None] + local[None, :]
    pick = np.argmax(mean_map.reshape(-1)[windows], axis=1)
    kept = windows[np.arange(windows.shape[0]), pick]
    return PoolPlan(kept, p, s, (h, w), (oh, ow))


def maxpool_moments(g: GaussianVector, p: int, s: int,
                    shape: tuple[int, int] | None = None) -> tuple[GaussianVector, PoolPlan]:
    if shape is None:
        side = int(round(np.sqrt(g.dim)))
        if side * side != g.dim:
            raise GeometryMismatch(f"dimension {g.dim} is not a square map; pass shape")
        shape = (side, side)
    if shape[0] * shape[1] != g.dim:
        raise GeometryMismatch(f"shape {shape} does not match dimension {g.dim}")
    plan = pool_plan(g.mean.reshape(shape), p, s)
    kept = plan.kept_indices
    return GaussianVector(g.mean[kept], g.cov[np.ix_(kept, kept)]), plan


def concat_channels(per_kernel: Sequence[GaussianVector]) -> GaussianVector:
    if len(per_kernel) == 0:
        raise EmptyList("concat_channels needs at least one Gaussian")
    mean = np.concatenate([g.mean for g in per_kernel])
    return GaussianVector(mean, block_diag(*[g.cov for g in per_kernel]))


def dense_forward(b: GaussianVector, w: VariationalDenseWeight) -> GaussianVector:
    """Output moments of f_h = w_h^T b for independent w_h and b (no bias)."""
    if w.means.shape[1] != b.dim:
        raise DimensionMismatch(f"weight length {w.means.shape[1]} vs input dim {b.dim}")
    M = w.means
    covs = w.covs
    mu_f = M @ b.mean
    cov = M @ b.cov @ M.T
    extra = np.einsum("hij,ji->h", covs, b.cov) + np.einsum("i,hij,j->h", b.mean, covs, b.mean)
    cov[np.diag_indices_from(cov)] += extra
    return GaussianVector(mu_f, cov)


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


def softmax_jacobian(mu: np.ndarray) -> np.ndarray:
    y = softmax(np.asarray(mu, dtype=np.float64))
    return np.diag(y) - np.outer(y, y)


def softmax_taylor(f: GaussianVector, K: int | None = None) -> GaussianVector:
    if K is not None and f.dim != K:
        raise DimensionMismatch(f"expected {K} logits, got {f.dim}")
    if f.dim < 2:
        raise DimensionMismatch("softmax needs at least two classes")
    y = softmax(f.mean)
    J = np.diag(y) - np.outer(y, y)
    return GaussianVector(y, J @ f.cov @ J.T)
