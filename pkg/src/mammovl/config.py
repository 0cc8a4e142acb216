"""Layered run configuration: built-in defaults < YAML file < command-line overrides.

A config file is a mapping of sections::

    augmentation: {target_size: [128, 80]}
    train: {epochs: 10, base_lr: 0.01, batch_size: 16}
    loss: {mode: final_paper}
    factor: {epochs: 20}
    eval: {quantile: 0.95}
    synthetic: {n_studies: 600}
    model: {image: {pool: avgmax}}

Every key must exist in the defaults; anything else is a :class:`ConfigError`
naming the dotted key.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .encoders import DEFAULT_MODEL_SPEC
from .exceptions import ConfigError, ValidationError
from .factor import FactorConfig
from .losses import MODES
from .preprocessing import AugmentationConfig
from .pretraining import TrainConfig
from .synthetic import SyntheticSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    mode: str = "final_paper"
    lambda_image: float = 1.0
    lambda_text: float = 1.0
    text_pair_weight: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("loss.mode", f"must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    quantile: float = 0.95
    iou_thresholds: tuple[float, ...] = (0.25, 0.5)
    conf_threshold: float = 0.05
    fraction: float = 1.0
    retrieval_batch: int = 16
    view: str = "CC"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))
        if not 0 < self.quantile < 1:
            raise ValidationError("eval.quantile must lie in (0, 1)")
        if not 0 < self.fraction <= 1:
            raise ValidationError("eval.fraction must lie in (0, 1]")


_TRAIN_LOSS_FIELDS = {"loss_mode", "lambda_image", "lambda_text", "text_pair_weight"}

SECTIONS = {
    "augmentation": AugmentationConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "factor": FactorConfig,
    "eval": EvalConfig,
    "synthetic": SyntheticSpec,
}


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if cls is TrainConfig and f.name in _TRAIN_LOSS_FIELDS:
            continue  # lives in the loss section
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


def default_config() -> dict:
    cfg = {name: _defaults(cls) for name, cls in SECTIONS.items()}
    cfg["model"] = copy.deepcopy(DEFAULT_MODEL_SPEC)
    return cfg


# replaced wholesale rather than merged key by key
FREE_FORM = {"synthetic.priors", "synthetic.split_sizes"}
# encoder options depend on the encoder type, so their keys are not checked
OPEN = {"model.image", "model.text"}


def _merge_checked(base: dict, override: Mapping, prefix: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(dotted)
        if not (isinstance(base[key], dict) and isinstance(value, Mapping)) or dotted in FREE_FORM:
            out[key] = dict(value) if isinstance(value, Mapping) else value
        elif dotted in OPEN:
            same_type = value.get("type", base[key].get("type")) == base[key].get("type")
            out[key] = {**base[key], **value} if same_type else dict(value)
        else:
            out[key] = _merge_checked(base[key], value, dotted + ".")
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """``"train.epochs=3"`` -> (["train", "epochs"], 3); the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(item, "override must look like section.key=value")
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if len(path) < 2:
        raise ConfigError(key, "override key must be section.key")
    return path, yaml.safe_load(raw)


def _nest(path: list[str], value) -> dict:
    out: Any = value
    for p in reversed(path):
        out = {p: out}
    return out


@dataclass
class GlobalConfig:
    """Resolved configuration; ``sources`` records where each layer came from."""

    data: dict
    sources: tuple = ()

    @classmethod
    def resolve(cls, path=None, overrides: Iterable[str] | Mapping | None = None) -> "GlobalConfig":
        data, sources = default_config(), ["defaults"]
        if path is not None:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
            if not isinstance(doc, Mapping):
                raise ConfigError(str(path), "config file must hold a mapping")
            data = _merge_checked(data, doc)
            sources.append(str(path))
        if overrides:
            items = overrides.items() if isinstance(overrides, Mapping) else (parse_override(o) for o in overrides)
            for key, value in items:
                key = key.split(".") if isinstance(key, str) else key
                data = _merge_checked(data, _nest(key, value))
            sources.append("command line")
        out = cls(data, tuple(sources))
        out.validate()
        return out

    def validate(self) -> None:
        for name in SECTIONS:
            try:
                getattr(self, name)()
            except ConfigError:
                raise
            except (ValidationError, TypeError, ValueError) as e:
                raise ConfigError(name, f"invalid section ({e})") from e

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(**self.data["augmentation"])

    def loss(self) -> LossConfig:
        return LossConfig(**self.data["loss"])

    def train(self) -> TrainConfig:
        loss = self.data["loss"]
        return TrainConfig(**self.data["train"], loss_mode=loss["mode"], lambda_image=loss["lambda_image"],
                           lambda_text=loss["lambda_text"], text_pair_weight=loss["text_pair_weight"])

    def factor(self) -> FactorConfig:
        return FactorConfig(**self.data["factor"])

    def eval(self) -> EvalConfig:
        return EvalConfig(**self.data["eval"])

    def synthetic(self) -> SyntheticSpec:
        return SyntheticSpec(**self.data["synthetic"])

    def model(self) -> dict:
        return copy.deepcopy(self.data["model"])

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True, default=list)

    def log(self) -> None:
        log.info("resolved config (%s):\n%s", " < ".join(self.sources), self.to_json())


def write_config(cfg: GlobalConfig, path) -> Path:
    path = Path(path)
    path.write_text(cfg.to_json() + "\n")
    return path
