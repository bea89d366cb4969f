"""Variational free energy: expected NLL of the propagated output plus weighted KL."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import LabelOutOfRange, NonPositivePriorVariance
from .gaussian import GaussianVector, kl_gaussian_diag_prior
from .layers import VariationalConvKernel, VariationalDenseWeight

DEFAULT_VAR_FLOOR = 1e-3


@dataclass(frozen=True)
class ElboBreakdown:
    nll: float
    kl: float
    kl_scale: float
    total: float

    @classmethod
    def build(cls, nll: float, kl: float, kl_scale: float) -> "ElboBreakdown":
        return cls(float(nll), float(kl), float(kl_scale), float(nll) + float(kl_scale) * float(kl))


def expected_nll_batch(mu_y: torch.Tensor, var_y: torch.Tensor, labels: torch.Tensor,
                       var_floor: float = DEFAULT_VAR_FLOOR) -> torch.Tensor:
    """Per-example heteroscedastic Gaussian NLL of the one-hot target, shape (B,)."""
    k = mu_y.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    target = torch.nn.functional.one_hot(labels.long(), k).to(mu_y.dtype)
    v = var_y + var_floor
    return 0.5 * ((target - mu_y) ** 2 / v + torch.log(v)).sum(-1)


def expected_nll(y: GaussianVector, label: int, var_floor: float = DEFAULT_VAR_FLOOR) -> float:
    if not 0 <= label < y.dim:
        raise LabelOutOfRange(f"label {label} outside [0, {y.dim})")
    mu = torch.tensor(y.mean)[None]
    var = torch.as_tensor(np.diag(y.cov).copy())[None]
    return float(expected_nll_batch(mu, var, torch.tensor([label]), var_floor)[0])


def kl_from_factor(mean: torch.Tensor, lower: torch.Tensor, prior_var: float) -> torch.Tensor:
    """Summed KL(N(mean, L L^T) || N(0, prior_var I)) over leading batch dims."""
    if not prior_var > 0:
        raise NonPositivePriorVariance(f"prior variance must be positive, got {prior_var}")
    d = mean.shape[-1]
    diag = torch.diagonal(lower, dim1=-2, dim2=-1)
    trace = (lower ** 2).sum((-2, -1))
    logdet = 2.0 * torch.log(diag.abs()).sum(-1)
    kl = 0.5 * (trace / prior_var + (mean ** 2).sum(-1) / prior_var - d + d * math.log(prior_var) - logdet)
    return kl.sum()


def kl_from_variances(mean: torch.Tensor, var: torch.Tensor, prior_var: float) -> torch.Tensor:
    """Same as :func:`kl_from_factor` for diagonal covariances."""
    if not prior_var > 0:
        raise NonPositivePriorVariance(f"prior variance must be positive, got {prior_var}")
    d = mean.shape[-1]
    kl = 0.5 * ((var.sum(-1) + (mean ** 2).sum(-1)) / prior_var - d + d * math.log(prior_var)
                - torch.log(var).sum(-1))
    return kl.sum()


def parameter_kl(params: Iterable, prior_var: float) -> float:
    """Sum of per-kernel and per-neuron KL terms for numpy parameter containers."""
    total = 0.0
    for p in params:
        if isinstance(p, VariationalConvKernel):
            total += kl_gaussian_diag_prior(p.mean, p.cov, prior_var)
        elif isinstance(p, VariationalDenseWeight):
            for m, c in zip(p.means, p.covs):
                total += kl_gaussian_diag_prior(m, c, prior_var)
        else:
            raise TypeError(f"unsupported parameter container {type(p).__name__}")
    return total


def total_objective(outputs: Sequence[GaussianVector], labels: Sequence[int], params: Iterable,
                    prior_var: float = 1.0, kl_scale: float = 1.0,
                    var_floor: float = DEFAULT_VAR_FLOOR) -> ElboBreakdown:
    if len(outputs) == 0:
        raise ValueError("batch must be non-empty")
    if len(outputs) != len(labels):
        raise ValueError("outputs and labels differ in length")
    nll = float(np.mean([expected_nll(y, int(t), var_floor) for y, t in zip(outputs, labels)]))
    return ElboBreakdown.build(nll, parameter_kl(params, prior_var), kl_scale)
