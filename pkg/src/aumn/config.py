"""Run configuration: YAML file + ``section.key=value`` overrides.

The checked-in ``configs/default.yaml`` is the desk-scale synthetic setup;
``configs/fullscale.yaml`` carries the published hyper-parameters for full-size
features. Unknown keys are rejected so typos fail before any work starts.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import yaml

from .data import SyntheticSpec
from .errors import ValidationError
from .inference import InferenceConfig
from .losses import AblationFlags, LossWeights
from .model import ModelDims
from .training import TrainConfig

SECTIONS = ("model", "train", "inference", "synthetic", "runtime")


@dataclass
class ModelSection:
    F: int = 32
    K: int = 7
    m: int = 4
    r: int | None = None
    kernel: int = 3

    def dims(self, D: int, C: int) -> ModelDims:
        return ModelDims(D=D, F=self.F, C=C, K=self.K, m=self.m, r=self.r, kernel=self.kernel)


@dataclass
class TrainSection:
    learning_rate: float = 1e-4
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    alpha: float = 0.01
    beta: float = 0.02
    gamma_rgb: float = 0.05
    gamma_flow: float = 0.03
    sparsity: bool = True
    diversity: bool = True
    homogeneity: bool = True
    self_attention: bool = True

    def flags(self) -> AblationFlags:
        return AblationFlags(self.sparsity, self.diversity, self.homogeneity, self.self_attention)

    def config(self, stream: str, flags: AblationFlags | None = None, seed: int | None = None) -> TrainConfig:
        gamma = self.gamma_flow if stream == "flow" else self.gamma_rgb
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            steps=self.steps,
            seed=self.seed if seed is None else seed,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            weights=LossWeights(self.alpha, self.beta, gamma),
            flags=flags or self.flags(),
        )


@dataclass
class InferenceSection:
    eta_cls: float = 0.1
    eta_act: Any = "mean"
    nms_iou: float = 0.3
    theta: float = 0.3

    def config(self, segment_seconds: float) -> InferenceConfig:
        if self.eta_act == "mean":
            eta_act = None
        elif isinstance(self.eta_act, (int, float)) and not isinstance(self.eta_act, bool):
            eta_act = float(self.eta_act)
        else:
            raise ValidationError(f"inference.eta_act must be 'mean' or a number, got {self.eta_act!r}")
        return InferenceConfig(self.eta_cls, eta_act, self.nms_iou, self.theta, segment_seconds)


@dataclass
class RuntimeSection:
    workers: int = 0  # 0: all available cores

    def worker_count(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    synthetic: dict = field(default_factory=dict)
    runtime: RuntimeSection = field(default_factory=RuntimeSection)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**self.synthetic)

    def validate(self) -> None:
        """Build every derived object once so invalid values surface early."""
        spec = self.synthetic_spec()
        self.model.dims(spec.D, spec.C)
        self.train.config("rgb")
        self.train.config("flow")
        self.inference.config(spec.segment_seconds)
        if self.runtime.workers < 0:
            raise ValidationError("runtime.workers must be >= 0")

    def set_seed(self, seed: int) -> None:
        self.train.seed = seed
        self.synthetic["seed"] = seed


def _apply_section(section_name: str, target, values: dict) -> None:
    if target is None:
        return
    names = {f.name: f for f in dataclasses.fields(target)}
    for key, value in values.items():
        if key not in names:
            raise ValidationError(f"unknown config key {section_name}.{key}")
        setattr(target, key, _coerce(section_name, key, value, getattr(target, key)))


def _coerce(section: str, key: str, value, current):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{section}.{key} must be true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, (int, float)) and current is not None:
        raise ValidationError(f"{section}.{key} must be numeric, got {value!r}")
    return value


_SYNTHETIC_FIELDS = {f.name for f in dataclasses.fields(SyntheticSpec)}


def _merge(config: RunConfig, payload: dict) -> None:
    for section, values in (payload or {}).items():
        if section not in SECTIONS:
            raise ValidationError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ValidationError(f"config section {section!r} must be a mapping")
        if section == "synthetic":
            unknown = set(values) - _SYNTHETIC_FIELDS
            if unknown:
                raise ValidationError(f"unknown config key synthetic.{sorted(unknown)[0]}")
            config.synthetic.update(values)
        else:
            _apply_section(section, getattr(config, section), values)


def parse_override(text: str) -> tuple[str, str, Any]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ValidationError(f"override must look like section.key=value, got {text!r}")
    path, raw = text.split("=", 1)
    section, key = path.split(".", 1)
    return section, key, yaml.safe_load(raw) if raw else ""


def default_config_text(name: str = "default.yaml") -> str:
    return resources.files("aumn").joinpath("configs", name).read_text()


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    config = RunConfig()
    _merge(config, yaml.safe_load(default_config_text()))
    if path is not None:
        try:
            payload = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: invalid YAML ({exc})") from exc
        _merge(config, payload)
    for text in overrides:
        section, key, value = parse_override(text)
        _merge(config, {section: {key: value}})
    config.validate()
    return config
