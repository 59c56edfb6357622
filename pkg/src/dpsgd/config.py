"""Run configuration: a YAML document validated before any computation."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from dpsgd.errors import ConfigurationError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PrivacySection(_Section):
    epsilon: Optional[float] = Field(default=None, gt=0)
    delta: Optional[float] = Field(default=None, gt=0, lt=1)
    noise_multiplier: Optional[float] = Field(default=None, ge=0)
    steps: Optional[int] = Field(default=None, ge=0)
    clip_norm: float = Field(default=1.0, gt=0)
    conversion: Literal["improved", "classic"] = "improved"
    # Only needed by `calibrate` when no data section describes the dataset.
    dataset_size: Optional[int] = Field(default=None, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)


class ModelSection(_Section):
    architecture: Literal["linear", "mlp", "tinyconv"] = "linear"
    hidden: List[int] = Field(default_factory=list)
    channels: Tuple[int, int] = (16, 32)
    group_count: int = Field(default=8, ge=1)
    weight_standardization: bool = False


class AugmentSection(_Section):
    pad_pixels: int = Field(default=4, ge=0)
    crop_size: Optional[Tuple[int, int]] = None
    horizontal_flip: bool = True


class DataSection(_Section):
    source: Literal["blobs", "idx"] = "blobs"
    n: int = Field(default=2000, ge=1)
    test_n: int = Field(default=2000, ge=1)
    classes: int = Field(default=2, ge=2)
    dim: int = Field(default=10, ge=1)
    separation: float = Field(default=4.0, ge=0)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    valid_fraction: Optional[float] = Field(default=None, gt=0, lt=1)
    standardize: bool = True
    augment: Optional[AugmentSection] = None


class TrainSection(_Section):
    learning_rate: float = Field(default=1.0, gt=0)
    batch_size: int = Field(default=256, ge=1)
    accumulation_steps: int = Field(default=1, ge=1)
    devices: int = Field(default=1, ge=1)
    augmult: int = Field(default=1, ge=1)
    eval_cadence: int = Field(default=10, ge=0)
    ema_decay: float = Field(default=0.9999, gt=0, lt=1)


class SweepSection(_Section):
    noise_multiplier: Optional[List[float]] = None
    steps: Optional[List[int]] = None
    learning_rate: Optional[List[float]] = None
    batch_size: Optional[List[int]] = None
    augmult: Optional[List[int]] = None

    def grid(self) -> Dict[str, list]:
        return {k: v for k, v in self.model_dump().items() if v is not None}


class Phase1Section(_Section):
    learning_rate: Optional[List[float]] = None
    clip_norm: Optional[List[float]] = None
    steps: Optional[List[int]] = None
    canary: Optional[List[Literal["blank", "noise", "mislabel"]]] = None
    models_per_arm: int = Field(default=50, ge=2)


class AuditSection(_Section):
    dataset_size: int = Field(default=16, ge=1)
    canary: Literal["blank", "noise", "mislabel", "none"] = "blank"
    canary_label: int = Field(default=0, ge=0)
    models_per_arm: int = Field(default=1000, ge=2)
    holdout_fraction: float = Field(default=0.2, gt=0, lt=1)
    confidence: float = Field(default=0.999, gt=0.5, lt=1)
    learning_rate: float = Field(default=0.5, gt=0)
    clip_norm: float = Field(default=0.1, gt=0)
    steps: int = Field(default=10, ge=1)
    phase1: Optional[Phase1Section] = None


class RunConfig(_Section):
    seed: int = Field(default=0, ge=0)
    privacy: PrivacySection = Field(default_factory=PrivacySection)
    model: ModelSection = Field(default_factory=ModelSection)
    data: DataSection = Field(default_factory=DataSection)
    train: TrainSection = Field(default_factory=TrainSection)
    sweep: Optional[SweepSection] = None
    audit: Optional[AuditSection] = None

    @field_validator("privacy", "model", "data", "train", mode="before")
    @classmethod
    def _none_is_default(cls, v):
        return {} if v is None else v

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        canonical = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class _StrictLoader(yaml.SafeLoader):
    """Safe loader that rejects duplicate mapping keys."""


def _construct_mapping(loader, node, deep=False):
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise ConfigurationError(f"duplicate config key {key!r} (line {key_node.start_mark.line + 1})")
        seen.add(key)
    return loader.construct_mapping(node, deep)


_StrictLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def apply_override(doc: dict, assignment: str) -> dict:
    """Applies ``section.key=value`` (value parsed as YAML) to a raw config mapping."""
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigurationError(f"override {assignment!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse override value {raw!r}: {exc}") from None
    doc = copy.deepcopy(doc)
    node = doc
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        if not isinstance(child, dict):
            raise ConfigurationError(f"override {assignment!r}: {key!r} is not a section")
        node = child
    node[keys[-1]] = value
    return doc


def parse_config(doc: Any, overrides: Optional[List[str]] = None) -> RunConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a mapping of sections")
    for item in overrides or []:
        doc = apply_override(doc, item)
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigurationError(f"invalid config: {problems}") from None


def load_config(path, overrides: Optional[List[str]] = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    try:
        doc = yaml.load(text, Loader=_StrictLoader)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from None
    return parse_config(doc, overrides)
