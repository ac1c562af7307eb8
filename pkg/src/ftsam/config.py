"""Experiment configuration: a YAML tree validated with unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending key."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Strict):
    source: Literal["synthetic", "idx"] = "synthetic"
    classes: int = Field(10, ge=2)
    train_per_class: int = Field(500, ge=1)
    test_per_class: int = Field(100, ge=1)
    image_size: int = Field(16, ge=4)
    noise: float = Field(0.1, ge=0)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    limit_train: Optional[int] = Field(None, ge=1)
    limit_test: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, name):
                    raise ConfigError(f"dataset.{name} is required when dataset.source is 'idx'", f"dataset.{name}")
        return self


class TriggerConfig(_Strict):
    kind: Literal["patch", "blend", "sinusoid"] = "patch"
    size: int = Field(3, ge=1)
    value: float = Field(1.0, ge=0, le=1)
    alpha: float = Field(0.1, ge=0, le=1)
    pattern_seed: Optional[int] = None
    delta: float = Field(20 / 255, ge=0, le=1)
    frequency: float = 6.0


class PlanConfig(_Strict):
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    snapshot_every: int = Field(0, ge=0)


class AttackConfig(_Strict):
    name: str = "badnets"
    trigger: TriggerConfig = TriggerConfig()
    mode: Literal["all-to-one", "all-to-all"] = "all-to-one"
    target: int = Field(0, ge=0)
    ratio: float = Field(0.1, ge=0, le=1)
    train: PlanConfig = PlanConfig()


class DefenseConfig(_Strict):
    benign_fraction: float = Field(0.05, gt=0, le=1)
    train: PlanConfig = PlanConfig()
    rho: Optional[float] = Field(None, ge=0)
    adaptive: bool = True
    exclude: List[str] = []
    gamma: Optional[float] = Field(None, ge=0)
    rho_list: List[float] = [0.0, 1.0, 2.0, 4.0, 8.0]


class DiagnoseConfig(_Strict):
    layer: Optional[str] = None
    tac_pairs: int = Field(500, ge=1)


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    model: Literal["small-cnn", "mlp"] = "small-cnn"
    dataset: DatasetConfig = DatasetConfig()
    attack: AttackConfig = AttackConfig()
    defense: DefenseConfig = DefenseConfig()
    diagnose: DiagnoseConfig = DiagnoseConfig()
    output: Optional[str] = None

    @model_validator(mode="after")
    def _target_in_range(self):
        if self.attack.target >= self.dataset.classes:
            raise ConfigError(
                f"attack.target {self.attack.target} outside [0, {self.dataset.classes})", "attack.target"
            )
        return self

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        """sha256 over the canonical JSON form; ``output`` is excluded."""
        d = self.to_dict()
        d.pop("output", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def lock_text(self) -> str:
        d = self.to_dict()
        d.pop("output", None)
        return json.dumps({"config": d, "digest": self.digest()}, sort_keys=True, indent=2) + "\n"


def parse_config(data: dict) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(p) for p in err["loc"]) or None
        ctx_err = err.get("ctx", {}).get("error")
        if isinstance(ctx_err, ConfigError):
            raise ConfigError(str(ctx_err), ctx_err.field) from None
        msg = "unknown key" if err["type"] == "extra_forbidden" else err["msg"]
        raise ConfigError(f"{field}: {msg}", field) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist", "config")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if isinstance(data, dict) and "config" in data and "digest" in data:
        data = data["config"]  # a config.lock file
    return parse_config(data)


def with_overrides(cfg: ExperimentConfig, seed: Optional[int] = None) -> ExperimentConfig:
    if seed is None:
        return cfg
    return cfg.model_copy(update={"seed": int(seed)})


def derive_seed(master: int, label: str) -> int:
    """Stage seed: first 8 bytes of sha256("<master>/<label>")."""
    return int.from_bytes(hashlib.sha256(f"{master}/{label}".encode()).digest()[:8], "little")
