"""Test-time corruptions: clamped Gaussian noise and targeted FGSM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import rng
from .errors import NonFiniteGradient


@dataclass(frozen=True)
class AttackConfig:
    kind: str                    # "gaussian" (level = sigma^2) or "fgsm_targeted" (level = epsilon)
    level: float
    target_class: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "fgsm_targeted"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.level < 0:
            raise ValueError("attack level must be non-negative")
        if self.kind == "fgsm_targeted" and self.target_class is None:
            raise ValueError("targeted FGSM needs a target_class")

    @property
    def column(self) -> str:
        tag = "gaussian" if self.kind == "gaussian" else "fgsm"
        return f"acc_{tag}_{self.level:g}"


def gaussian_noise(shape, sigma_sq: float, seed: int, first_index: int = 0) -> np.ndarray:
    """N(0, sigma_sq) noise; row r is keyed on (seed, first_index + r) via whole-block draws."""
    shape = tuple(shape)
    n, width = shape[0], int(np.prod(shape[1:]))
    eps = rng.keyed_normals(seed, (rng.NOISE,), n, width, start=first_index)
    return (np.sqrt(sigma_sq) * eps).reshape(shape)


def gaussian_corrupt(images, sigma_sq: float, seed: int, first_index: int = 0) -> np.ndarray:
    """Add i.i.d. N(0, sigma_sq) per pixel and clamp to [0, 1]."""
    if sigma_sq < 0:
        raise ValueError("sigma_sq must be non-negative")
    images = np.asarray(images)
    if sigma_sq == 0:
        return images.copy()
    noisy = images + gaussian_noise(images.shape, sigma_sq, seed, first_index)
    return np.clip(noisy, 0.0, 1.0).astype(images.dtype)


def hcv_sigma(fraction: float, pixel_max: float = 1.0, reading: str = "three_sigma") -> float:
    """Noise standard deviation for a noise level quoted as a fraction of the HCV.

    ``three_sigma`` (default): the highest conceivable value is the data ceiling
    and equals three noise standard deviations, so sigma = fraction * pixel_max / 3.
    ``direct``: sigma = fraction * pixel_max.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if pixel_max <= 0:
        raise ValueError("pixel_max must be positive")
    if reading == "three_sigma":
        return fraction * pixel_max / 3.0
    if reading == "direct":
        return fraction * pixel_max
    raise ValueError(f"unknown HCV reading {reading!r}")


def fgsm_step(images: torch.Tensor, grad: torch.Tensor, epsilon: float, targeted: bool = True) -> torch.Tensor:
    """One signed-gradient step, clamped to [0, 1]; targeted steps descend the loss."""
    direction = -1.0 if targeted else 1.0
    return torch.clamp(images + direction * epsilon * torch.sign(grad), 0.0, 1.0)


def input_gradient(model, images: torch.Tensor, labels: torch.Tensor, fixed_seed: int = 0,
                   var_floor: float = 1e-3, micro_batch: int = 16, purpose: int = rng.EVAL) -> torch.Tensor:
    """Gradient of the summed per-example loss w.r.t. the input, under frozen ensemble noise.

    The noise is the one keyed by ``(purpose, fixed_seed)``; with the defaults it is the
    same draw the evaluator uses, so the attacker sees exactly the network being scored.
    """
    grads = []
    for s in range(0, images.shape[0], micro_batch):
        x = images[s:s + micro_batch].detach().clone().to(model.dtype).requires_grad_(True)
        losses, _ = model.example_losses(x, labels[s:s + micro_batch], purpose, fixed_seed, var_floor)
        (g,) = torch.autograd.grad(losses.sum(), x)
        grads.append(g)
    grad = torch.cat(grads)
    if not torch.isfinite(grad).all():
        raise NonFiniteGradient("input gradient contains non-finite values")
    return grad


def fgsm_targeted(model, images, target_class: int, epsilon: float, fixed_seed: int = 0,
                  var_floor: float = 1e-3) -> torch.Tensor:
    """Targeted FGSM: clamp(x - eps * sign(grad_x L(target)))."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    images = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if epsilon == 0:
        return images.clone()
    targets = torch.full((images.shape[0],), int(target_class), dtype=torch.long)
    grad = input_gradient(model, images, targets, fixed_seed, var_floor)
    return fgsm_step(images.to(grad.dtype), grad, epsilon).to(images.dtype)
