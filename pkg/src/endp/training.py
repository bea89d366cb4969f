"""Minimising the variational free energy with frozen-noise reparameterised gradients."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt
from . import rng
from .data import BatchPlan
from .errors import NonFiniteGradient
from .gaussian import MONITOR, InvariantMonitor
from .network import EnDPNet
from .objective import DEFAULT_VAR_FLOOR, ElboBreakdown
from .records import ExperimentRecord

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    global_seed: int = 0
    kl_scale: float | None = None        # None -> 1 / number of training examples
    prior_var: float = 1.0
    var_floor: float = DEFAULT_VAR_FLOOR
    loss: str | None = None              # None -> "nll" for EnDP, "ce" for the baseline
    micro_batch: int = 4
    audit: bool = True                   # run symmetry/PSD checks on propagated covariances

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.micro_batch < 1:
            raise ValueError("epochs must be >= 0 and batch sizes positive")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss not in (None, "nll", "ce"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def resolved_kl_scale(self, n_train: int) -> float:
        return 1.0 / max(n_train, 1) if self.kl_scale is None else float(self.kl_scale)


def make_optimizer(model: EnDPNet, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999))


def objective(model: EnDPNet, images: torch.Tensor, labels: torch.Tensor, step: int, config: TrainConfig,
              kl_scale: float, backward: bool = False, monitor: InvariantMonitor | None = None,
              purpose: int = rng.TRAIN) -> ElboBreakdown:
    """Batch objective under the ensemble noise keyed by ``step``; optionally accumulate grads."""
    B = images.shape[0]
    nll_sum = 0.0
    for s in range(0, B, config.micro_batch):
        x, y = images[s:s + config.micro_batch], labels[s:s + config.micro_batch]
        losses, pred = model.example_losses(x, y, purpose, step, config.var_floor, config.loss)
        part = losses.sum() / B
        if backward:
            part.backward()
        nll_sum += float(losses.detach().sum())
        if monitor is not None and pred.cov_y is not None:
            monitor.record(pred.cov_f.detach().numpy())
            monitor.record(pred.cov_y.detach().numpy())
    kl = model.kl(config.prior_var)
    if backward and kl.requires_grad:
        (kl_scale * kl).backward()
    return ElboBreakdown.build(nll_sum / B, float(kl.detach()), kl_scale)


def grad_step(model: EnDPNet, optimizer: torch.optim.Optimizer, images, labels, step: int,
              config: TrainConfig, kl_scale: float,
              monitor: InvariantMonitor | None = None) -> tuple[EnDPNet, ElboBreakdown]:
    """One optimizer update; returns the loss breakdown evaluated before the update."""
    images = torch.as_tensor(images)
    labels = torch.as_tensor(labels)
    optimizer.zero_grad(set_to_none=False)
    elbo = objective(model, images, labels, step, config, kl_scale, backward=True, monitor=monitor)
    for p in model.parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradient(f"non-finite gradient at step {step} (loss {elbo.total})")
    if monitor is not None and model.is_endp:
        for cov in model.audit_covariances(images[0], rng.TRAIN, step):
            monitor.record(cov)
    optimizer.step()
    return model, elbo


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    passed: bool
    coordinates: int
    analytic: np.ndarray = field(repr=False, default=None)
    numeric: np.ndarray = field(repr=False, default=None)


def _candidates(model: EnDPNet) -> list[tuple[str, int]]:
    out = []
    for name, p in model.named_parameters():
        mask = np.ones(tuple(p.shape), dtype=bool)
        if p.dim() >= 2 and p.shape[-1] == p.shape[-2] and "raw" in name:
            mask &= np.tril(np.ones(p.shape[-2:], dtype=bool))   # strict upper part is unused
        out += [(name, int(i)) for i in np.flatnonzero(mask.reshape(-1))]
    return out


def check_gradients(model: EnDPNet, images, labels, tolerance: float, coordinates: int = 100,
                    seed: int = 0, rel_step: float = 1e-6, kl_scale: float = 1e-3,
                    config: TrainConfig | None = None) -> GradCheckReport:
    """Compare autograd with central differences on a random subset of coordinates.

    Runs on a float64 copy of ``model`` with the ensemble noise frozen (step 0).
    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-3 * max_j |a_j|).
    """
    config = config or TrainConfig(micro_batch=max(1, len(labels)))
    m = copy.deepcopy(model).double()
    m.dtype = torch.float64
    images = torch.as_tensor(images, dtype=torch.float64)
    labels = torch.as_tensor(labels)
    params = dict(m.named_parameters())
    cands = _candidates(m)
    pick = rng.keyed_generator(seed, (0xC4EC,)).choice(len(cands), size=min(coordinates, len(cands)), replace=False)
    chosen = [cands[i] for i in sorted(pick)]

    m.zero_grad()
    objective(m, images, labels, 0, config, kl_scale, backward=True)
    analytic = np.array([params[n].grad.reshape(-1)[i].item() for n, i in chosen])

    def f() -> float:
        with torch.no_grad():
            return objective(m, images, labels, 0, config, kl_scale).total

    numeric = np.empty(len(chosen))
    for j, (n, i) in enumerate(chosen):
        flat = params[n].data.view(-1)
        orig = flat[i].item()
        h = rel_step * max(1.0, abs(orig))
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        numeric[j] = (up - down) / (2 * h)
    floor = 1e-3 * max(np.max(np.abs(analytic)), 1e-12)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(worst, tolerance, bool(worst <= tolerance), len(chosen), analytic, numeric)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: EnDPNet
    optimizer: torch.optim.Optimizer
    epoch: int = 0        # epochs completed
    step: int = 0         # optimizer steps taken


def new_state(model: EnDPNet, config: TrainConfig) -> TrainState:
    return TrainState(model, make_optimizer(model, config))


def resume_state(path) -> tuple[TrainState, ckpt.Checkpoint]:
    ck = ckpt.load(path)
    model = ckpt.restore_model(ck)
    return TrainState(model, ckpt.restore_optimizer(ck, model), ck.epoch, ck.step), ck


EvalHook = Callable[[EnDPNet, int], dict]


def train(state: TrainState, plan: BatchPlan, config: TrainConfig, run_id: str = "run",
          eval_hook: EvalHook | None = None, checkpoint_dir=None,
          monitor: InvariantMonitor | None = None) -> tuple[EnDPNet, list[ExperimentRecord]]:
    """Run ``config.epochs`` epochs from ``state.epoch``; one record and checkpoint per epoch."""
    if len(plan.data) == 0:
        raise ValueError("training set is empty")
    monitor = monitor if monitor is not None else (MONITOR if config.audit else None)
    kl_scale = config.resolved_kl_scale(len(plan.data))
    records = []
    model = state.model
    ensemble = model.geom[0]["ensemble"] if model.is_endp else 0
    while state.epoch < config.epochs:
        epoch = state.epoch
        model.train()
        t0 = time.perf_counter()
        sums = np.zeros(3)
        count = 0
        for images, labels in plan.batches(epoch):
            _, elbo = grad_step(model, state.optimizer, torch.from_numpy(images), torch.from_numpy(labels),
                                state.step, config, kl_scale, monitor)
            state.step += 1
            n = len(labels)
            sums += n * np.array([elbo.nll, elbo.kl, elbo.total])
            count += n
        wall = time.perf_counter() - t0
        state.epoch += 1
        nll, kl, total = (sums / count).tolist()
        metrics = eval_hook(model, epoch) if eval_hook else {}
        rec = ExperimentRecord(run_id=run_id, seed=config.global_seed, epoch=epoch + 1, ensemble_size=ensemble,
                               nll=nll, kl=kl, kl_scale=kl_scale, total=total, wall_time_s=wall, **metrics)
        records.append(rec)
        log.info("epoch %d  total %.4f  nll %.4f  kl %.1f  %.1fs", epoch + 1, total, nll, kl, wall)
        if checkpoint_dir is not None:
            ck = ckpt.capture(model, state.optimizer, state.epoch, state.step, asdict(config))
            ckpt.save(ck, Path(checkpoint_dir) / f"epoch_{state.epoch:03d}.ckpt")
            ckpt.save(ck, Path(checkpoint_dir) / "last.ckpt")
    return model, records
