"""Command-line harness: ``endp {train,eval,attack,sweep-n,check-grad}``.

Every command reads a YAML experiment config (``--config``) and writes its
outputs under ``--out`` (default ``run.out`` from the config).  Set
``ENDP_THREADS`` to cap torch's intra-op thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ExperimentConfig, load_config
from .data import Dataset, load_cifar10, load_idx, load_mnist, subset_and_batch
from .errors import ConfigError, EnDPError
from .evaluation import corrupt, evaluate
from .gaussian import InvariantMonitor
from .network import EnDPNet
from .records import ExperimentRecord, write_records
from .robustness import AttackConfig
from .training import check_gradients, new_state, train

log = logging.getLogger("endp")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _apply_threads() -> None:
    raw = os.environ.get("ENDP_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ConfigError(f"ENDP_THREADS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise ConfigError("ENDP_THREADS must be >= 1")
        torch.set_num_threads(n)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    upd = {}
    if getattr(args, "seed", None) is not None:
        upd["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        upd["out"] = args.out
    if upd:
        cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update=upd)})
    return cfg


def check_paths(cfg: ExperimentConfig) -> None:
    """Fail before any output is written if a dataset path is missing."""
    missing = [str(p) for p in cfg.data.paths() if not p.exists()]
    if missing:
        raise ConfigError("dataset path(s) not found: " + ", ".join(missing))


def load_split(cfg: ExperimentConfig, split: str) -> Dataset:
    d = cfg.data
    if d.dataset == "mnist":
        ds = load_mnist(d.mnist_dir, split)
    elif d.dataset == "idx":
        pair = (d.train_images, d.train_labels) if split == "train" else (d.test_images, d.test_labels)
        ds = load_idx(*pair, name="idx", split=split)
    else:
        ds = load_cifar10(d.cifar_train if split == "train" else d.cifar_test, split)
    ds.num_classes = cfg.model.num_classes
    if len(ds) and int(ds.labels.max()) >= ds.num_classes:
        raise ConfigError(f"{split} labels reach {int(ds.labels.max())} but the model has {ds.num_classes} classes")
    if tuple(ds.images.shape[1:]) != tuple(cfg.model.input_shape):
        raise ConfigError(f"{split} images have shape {ds.images.shape[1:]}, model expects {cfg.model.input_shape}")
    return ds


def eval_set(cfg: ExperimentConfig) -> Dataset:
    ds = load_split(cfg, "test")
    limit = cfg.eval.subset or cfg.data.test_subset
    return ds.take(np.arange(min(limit, len(ds)))) if limit else ds


def build_model(cfg: ExperimentConfig) -> EnDPNet:
    dtype = torch.float64 if cfg.model.dtype == "float64" else torch.float32
    return EnDPNet(cfg.model.network_spec(), cfg.run.seed, dtype)


def _eval_metrics(model, ds, conditions, cfg) -> dict:
    t0 = time.perf_counter()
    out = evaluate(model, ds, conditions, cfg.eval.batch, cfg.train.var_floor, cfg.eval.attack_subset)
    out["extra"]["eval_time_s"] = time.perf_counter() - t0
    return out


def _print_table(records) -> None:
    if not records:
        print("(no records)")
        return
    keys = ["epoch", "ensemble_size", "total", "acc_clean"]
    extra = list(records[-1].conditions)
    print("  ".join(f"{k:>14}" for k in keys + extra))
    for r in records:
        vals = [getattr(r, k) for k in keys] + [r.conditions.get(k, float("nan")) for k in extra]
        print("  ".join(f"{v:>14.4f}" if isinstance(v, float) else f"{v:>14}" for v in vals))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def train_run(cfg: ExperimentConfig, out: Path, monitor: InvariantMonitor | None = None):
    train_ds = load_split(cfg, "train")
    test_ds = eval_set(cfg)
    tc = cfg.train_config()
    plan = subset_and_batch(train_ds, cfg.data.train_subset, tc.batch_size, cfg.run.seed)
    model = build_model(cfg)
    conditions = cfg.eval.conditions()

    def hook(m, epoch):
        if cfg.eval.per_epoch or epoch == tc.epochs - 1:
            return _eval_metrics(m, test_ds, conditions, cfg)
        return {}

    state = new_state(model, tc)
    monitor = monitor if monitor is not None else InvariantMonitor()
    model, records = train(state, plan, tc, cfg.run.name, hook, out / "checkpoints",
                           monitor if tc.audit else None)
    return model, records, monitor


def cmd_train(args) -> int:
    cfg = _config(args)
    check_paths(cfg)
    out = Path(cfg.run.out)
    model, records, monitor = train_run(cfg, out)
    if not records:    # epochs = 0 still leaves a loadable checkpoint
        ckpt.save(ckpt.capture(model, None, 0, 0, cfg.train_config().__dict__), out / "checkpoints" / "last.ckpt")
    write_records(records, out)
    (out / "monitor.json").write_text(json.dumps({"checks": monitor.checks, "failures": monitor.failures}) + "\n")
    _print_table(records)
    print(f"invariant checks: {monitor.checks}  failures: {monitor.failures}")
    return 0


def _load_checkpoint_model(path) -> EnDPNet:
    model = ckpt.restore_model(ckpt.load(path))
    model.eval()
    return model


def _need_checkpoint(args) -> None:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")


def cmd_eval(args) -> int:
    _need_checkpoint(args)
    cfg = _config(args)
    check_paths(cfg)
    model = _load_checkpoint_model(args.checkpoint)
    ds = eval_set(cfg)
    m = _eval_metrics(model, ds, cfg.eval.conditions(), cfg)
    rec = ExperimentRecord(run_id=cfg.run.name, seed=cfg.run.seed, epoch=0,
                           ensemble_size=model.geom[0]["ensemble"] if model.is_endp else 0, **m)
    write_records([rec], cfg.run.out, "eval")
    print(json.dumps(rec.row(), indent=1, default=str))
    return 0


def dump_images(images: np.ndarray, labels: np.ndarray, out: Path, info: dict) -> None:
    """Flat little-endian float32 array plus a JSON manifest describing it."""
    out.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(images, dtype="<f4")
    (out / "images.bin").write_bytes(arr.tobytes())
    manifest = {"dtype": "float32", "byte_order": "little", "shape": list(arr.shape), "layout": "NCHW",
                "labels": [int(v) for v in labels], **info}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def cmd_attack(args) -> int:
    _need_checkpoint(args)
    cfg = _config(args)
    check_paths(cfg)
    model = _load_checkpoint_model(args.checkpoint)
    ds = eval_set(cfg)
    target = cfg.eval.target_class if args.target is None else args.target
    levels = args.epsilon if args.epsilon else cfg.eval.fgsm
    conds = [AttackConfig("fgsm_targeted", float(e), target, cfg.eval.noise_seed) for e in levels]
    m = _eval_metrics(model, ds, conds, cfg)
    rec = ExperimentRecord(run_id=cfg.run.name, seed=cfg.run.seed, epoch=0,
                           ensemble_size=model.geom[0]["ensemble"] if model.is_endp else 0, **m)
    out = Path(cfg.run.out)
    write_records([rec], out, "attack")
    if args.dump:
        cond = conds[-1]
        adv = corrupt(model, ds.images, cond, cfg.train.var_floor)
        dump_images(adv, ds.labels, out, {"epsilon": cond.level, "target_class": target})
    print(json.dumps(rec.row(), indent=1, default=str))
    return 0


def cmd_sweep_n(args) -> int:
    values = list(args.n)
    if len(set(values)) != len(values):
        raise ConfigError(f"duplicate N values in {values}")
    if any(n < 2 for n in values):
        raise ConfigError("every N must be >= 2")
    cfg = _config(args)
    check_paths(cfg)
    if cfg.model.kind != "endp":
        raise ConfigError("sweep-n needs an endp model")
    out = Path(cfg.run.out)
    rows = []
    for n in values:
        conv = [c.model_copy(update={"ensemble_size": n}) for c in cfg.model.conv]
        sub = cfg.model_copy(update={
            "model": cfg.model.model_copy(update={"conv": conv}),
            "eval": cfg.eval.model_copy(update={"gaussian": [], "fgsm": []}),
        })
        _, records, _ = train_run(sub, out / f"n_{n}")
        if not records:
            raise ConfigError("sweep-n needs train.epochs >= 1")
        last = records[-1]
        rows.append(ExperimentRecord(
            run_id=f"{cfg.run.name}-n{n}", seed=cfg.run.seed, epoch=last.epoch, ensemble_size=n,
            nll=last.nll, kl=last.kl, kl_scale=last.kl_scale, total=last.total, acc_clean=last.acc_clean,
            var_correct=last.var_correct, var_incorrect=last.var_incorrect,
            wall_time_s=float(np.mean([r.wall_time_s for r in records]))))
    write_records(rows, out, "sweep")
    _print_table(rows)
    return 0


def cmd_check_grad(args) -> int:
    cfg = _config(args)
    check_paths(cfg)
    if args.checkpoint:
        model = _load_checkpoint_model(args.checkpoint)
    else:
        model = build_model(cfg)
    ds = load_split(cfg, "train")
    count = min(args.batch, len(ds))
    rep = check_gradients(model, ds.images[:count], ds.labels[:count], args.tolerance, args.coordinates,
                          cfg.run.seed)
    print(f"max relative error {rep.max_rel_err:.3e} over {rep.coordinates} coordinates "
          f"(tolerance {rep.tolerance:g}): {'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="endp", description="Ensemble density propagation experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--out", help="override run.out (output directory)")
        sp.add_argument("--checkpoint", required=False, help="checkpoint file" if checkpoint else argparse.SUPPRESS)
        return sp

    common(sub.add_parser("train", help="train a model and write records + checkpoints"))
    common(sub.add_parser("eval", help="evaluate a checkpoint under the configured conditions"), True)
    at = common(sub.add_parser("attack", help="targeted FGSM against a checkpoint"), True)
    at.add_argument("--epsilon", type=float, nargs="+", help="override eval.fgsm levels")
    at.add_argument("--target", type=int, help="override eval.target_class")
    at.add_argument("--dump", action="store_true", help="write images.bin + manifest.json (last epsilon)")
    sw = common(sub.add_parser("sweep-n", help="train one model per ensemble size"))
    sw.add_argument("--n", type=int, nargs="+", required=True, help="ensemble sizes")
    cg = common(sub.add_parser("check-grad", help="finite-difference gradient check"), True)
    cg.add_argument("--tolerance", type=float, default=1e-2)
    cg.add_argument("--coordinates", type=int, default=100)
    cg.add_argument("--batch", type=int, default=2, help="number of training images used")
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "attack": cmd_attack, "sweep-n": cmd_sweep_n,
            "check-grad": cmd_check_grad}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _apply_threads()
        return COMMANDS[args.command](args)
    except (EnDPError, ValueError, OSError, KeyError, IndexError) as exc:
        print(f"endp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
