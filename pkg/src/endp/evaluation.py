"""Accuracy under clean, noisy and adversarial conditions, plus the variance signal."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

from .data import Dataset
from .network import EnDPNet, Prediction
from .robustness import AttackConfig, fgsm_targeted, gaussian_corrupt


def accuracy(pred: Prediction, labels: np.ndarray) -> float:
    return float((pred.labels.numpy() == np.asarray(labels)).mean())


def variance_split(pred: Prediction, labels: np.ndarray) -> tuple[float, float]:
    """Mean predicted-class variance over correct and over misclassified examples."""
    if pred.var_y is None:
        return math.nan, math.nan
    chosen = pred.labels
    var = pred.var_y.gather(1, chosen[:, None]).squeeze(1).numpy()
    correct = chosen.numpy() == np.asarray(labels)
    vc = float(var[correct].mean()) if correct.any() else math.nan
    vi = float(var[~correct].mean()) if (~correct).any() else math.nan
    return vc, vi


def corrupt(model: EnDPNet, images: np.ndarray, cond: AttackConfig, var_floor: float = 1e-3,
            chunk: int = 256) -> np.ndarray:
    if cond.kind == "gaussian":
        return gaussian_corrupt(images, cond.level, cond.seed)
    out = [fgsm_targeted(model, torch.from_numpy(images[s:s + chunk]), cond.target_class, cond.level,
                         cond.seed, var_floor).numpy()
           for s in range(0, len(images), chunk)]
    return np.concatenate(out).astype(images.dtype)


def evaluate(model: EnDPNet, ds: Dataset, conditions: Sequence[AttackConfig] = (), batch: int = 64,
             var_floor: float = 1e-3, attack_subset: int | None = None) -> dict:
    """Metrics keyed like :class:`ExperimentRecord` fields (conditions and extra as dicts).

    ``attack_subset`` scores the corrupted conditions on that many leading examples only;
    clean accuracy and the variance split always use the whole set.
    """
    model.eval()
    images, labels = ds.images, ds.labels
    clean = model.predict(torch.from_numpy(images), batch)
    vc, vi = variance_split(clean, labels)
    out = {"acc_clean": accuracy(clean, labels), "var_correct": vc, "var_incorrect": vi,
           "conditions": {}, "extra": {}}
    if attack_subset is not None:
        images, labels = images[:attack_subset], labels[:attack_subset]
    for cond in conditions:
        pred = model.predict(torch.from_numpy(corrupt(model, images, cond, var_floor)), batch)
        out["conditions"][cond.column] = accuracy(pred, labels)
        if cond.kind == "fgsm_targeted":
            others = labels != cond.target_class
            hit = float((pred.labels.numpy()[others] == cond.target_class).mean()) if others.any() else math.nan
            out["extra"][f"hit_fgsm_{cond.level:g}"] = hit
    return out
