"""Experiment configuration: YAML with nested sections, validated strictly."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .network import ConvSpec, NetworkSpec
from .robustness import AttackConfig
from .training import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RunSection(_Strict):
    name: str = "run"
    seed: int = Field(0, ge=0, lt=2 ** 64)
    out: str = "runs/default"


class DataSection(_Strict):
    dataset: Literal["mnist", "idx", "cifar10"] = "mnist"
    mnist_dir: Optional[str] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    cifar_train: list[str] = []
    cifar_test: list[str] = []
    train_subset: Optional[int] = Field(None, ge=1)
    test_subset: Optional[int] = Field(None, ge=1)

    def paths(self) -> list[Path]:
        if self.dataset == "mnist":
            if not self.mnist_dir:
                raise ConfigError("data.mnist_dir is required for dataset 'mnist'")
            return [Path(self.mnist_dir)]
        if self.dataset == "idx":
            got = [self.train_images, self.train_labels, self.test_images, self.test_labels]
            if any(p is None for p in got):
                raise ConfigError("dataset 'idx' needs train_images, train_labels, test_images, test_labels")
            return [Path(p) for p in got]
        if not self.cifar_train or not self.cifar_test:
            raise ConfigError("dataset 'cifar10' needs cifar_train and cifar_test file lists")
        return [Path(p) for p in self.cifar_train + self.cifar_test]


class ConvSection(_Strict):
    kernels: int = Field(ge=1)
    size: int = Field(ge=1)
    activation: Literal["relu", "elu", "selu", "swish", "identity"] = "relu"
    ensemble_size: Union[int, Literal["auto"]] = 200
    pool: Optional[tuple[int, int]] = (2, 2)

    @field_validator("ensemble_size")
    @classmethod
    def _n(cls, v):
        if isinstance(v, int) and v < 2:
            raise ValueError("ensemble_size must be >= 2")
        return v


class ModelSection(_Strict):
    kind: Literal["endp", "baseline"] = "endp"
    input_shape: tuple[int, int, int] = (1, 28, 28)
    conv: list[ConvSection] = [ConvSection(kernels=32, size=5)]
    num_classes: int = Field(10, ge=2)
    dense_cov: Literal["diag", "full"] = "diag"
    init_delta: float = Field(0.05, gt=0)
    dtype: Literal["float32", "float64"] = "float32"

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(self.input_shape, [ConvSpec(**c.model_dump()) for c in self.conv],
                           self.num_classes, self.kind, self.dense_cov, self.init_delta)


class TrainSection(_Strict):
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, ge=0)
    optimizer: Literal["adam"] = "adam"
    kl_scale: Optional[float] = Field(None, ge=0)
    prior_var: float = Field(1.0, gt=0)
    var_floor: float = Field(1e-3, gt=0)
    loss: Optional[Literal["nll", "ce"]] = None
    micro_batch: int = Field(4, ge=1)
    audit: bool = True


class EvalSection(_Strict):
    gaussian: list[float] = [0.1, 0.2]
    fgsm: list[float] = [0.1, 0.2]
    target_class: int = Field(3, ge=0)
    noise_seed: int = Field(0, ge=0)
    per_epoch: bool = False
    subset: Optional[int] = Field(None, ge=1)
    attack_subset: Optional[int] = Field(None, ge=1)   # noise/FGSM scored on this many leading images
    batch: int = Field(64, ge=1)

    @field_validator("gaussian", "fgsm")
    @classmethod
    def _levels(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("levels must be non-negative")
        return v

    def conditions(self) -> list[AttackConfig]:
        out = [AttackConfig("gaussian", float(s), None, self.noise_seed) for s in self.gaussian]
        out += [AttackConfig("fgsm_targeted", float(e), self.target_class, self.noise_seed) for e in self.fgsm]
        return out


class ExperimentConfig(_Strict):
    run: RunSection = RunSection()
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()

    def train_config(self) -> TrainConfig:
        return TrainConfig(global_seed=self.run.seed, **self.train.model_dump())


def parse_config(obj: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(obj or {})
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return parse_config(obj)
