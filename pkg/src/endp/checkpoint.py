"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"ENDPCKPT"
    4 bytes   uint32 format_version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header (sorted keys, no whitespace)
    ...       array payload, concatenated in header order

The header holds ``format_version`` (first key written), the NetworkSpec, the
model seed and dtype, epoch and step counters (the only RNG state: all draws are
keyed on them), optimizer hyper-parameters, the training config, and an
``arrays`` table of ``{name, dtype, shape, offset, nbytes}`` entries whose
offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .network import EnDPNet, NetworkSpec

MAGIC = b"ENDPCKPT"
FORMAT_VERSION = 1

_DTYPES = {torch.float32: "float32", torch.float64: "float64"}


@dataclass
class Checkpoint:
    spec: NetworkSpec
    model_seed: int
    dtype: str
    epoch: int
    step: int
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_hparams: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def to_bytes(ck: Checkpoint) -> bytes:
    arrays = [(f"param/{k}", v) for k, v in ck.params.items()]
    arrays += [(f"optim/{k}", v) for k, v in ck.optimizer.items()]
    table, payload, offset = [], [], 0
    for name, arr in arrays:
        arr = np.asarray(arr)   # tobytes() is C-order; ascontiguousarray would turn 0-d into 1-d
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        payload.append(data)
        offset += len(data)
    header = {
        "format_version": ck.format_version,
        "spec": ck.spec.to_dict(),
        "model_seed": ck.model_seed,
        "dtype": ck.dtype,
        "epoch": ck.epoch,
        "step": ck.step,
        "optimizer_hparams": ck.optimizer_hparams,
        "train_config": ck.train_config,
        "arrays": table,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", ck.format_version, len(blob)) + blob + b"".join(payload)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not an endp checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {version} is not supported (expected {FORMAT_VERSION})")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    params, optim = {}, {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        chunk = raw[start:start + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"array {entry['name']} truncated")
        arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"]).newbyteorder("<")).reshape(entry["shape"]).copy()
        kind, name = entry["name"].split("/", 1)
        (params if kind == "param" else optim)[name] = arr
    return Checkpoint(NetworkSpec.from_dict(header["spec"]), header["model_seed"], header["dtype"],
                      header["epoch"], header["step"], params, optim, header["optimizer_hparams"],
                      header["train_config"], version)


def save(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw)


# -- model / optimizer <-> checkpoint ------------------------------------------

def capture(model: EnDPNet, optimizer: torch.optim.Optimizer | None, epoch: int, step: int,
            train_config: dict | None = None) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    optim, hparams = {}, {}
    if optimizer is not None:
        sd = optimizer.state_dict()
        group = sd["param_groups"][0]
        hparams = {k: (list(v) if isinstance(v, tuple) else v) for k, v in group.items()
                   if k != "params" and isinstance(v, (int, float, bool, tuple, str, type(None)))}
        hparams["name"] = type(optimizer).__name__.lower()
        for idx, state in sorted(sd["state"].items()):
            for key, val in sorted(state.items()):
                optim[f"{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
    return Checkpoint(model.spec, model.seed, _DTYPES[model.dtype], epoch, step, params, optim,
                      hparams, train_config or {})


def restore_model(ck: Checkpoint) -> EnDPNet:
    dtype = torch.float64 if ck.dtype == "float64" else torch.float32
    model = EnDPNet(ck.spec, ck.model_seed, dtype)
    state = {k: torch.from_numpy(v) for k, v in ck.params.items()}
    model.load_state_dict(state, strict=True)
    return model


def restore_optimizer(ck: Checkpoint, model: EnDPNet) -> torch.optim.Optimizer:
    hp = dict(ck.optimizer_hparams)
    name = hp.pop("name", "adam")
    if name != "adam":
        raise CheckpointError(f"unsupported optimizer {name!r}")
    opt = torch.optim.Adam(model.parameters(), lr=hp.get("lr", 1e-3), betas=tuple(hp.get("betas", (0.9, 0.999))),
                           eps=hp.get("eps", 1e-8))
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for key, arr in ck.optimizer.items():
        idx, field_name = key.split("/", 1)
        state.setdefault(int(idx), {})[field_name] = torch.from_numpy(arr)
    sd["state"] = state
    opt.load_state_dict(sd)
    return opt
