"""Experiment configuration (TOML), validated with strict schemas."""
from __future__ import annotations

import hashlib
import json
import os
import sys
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    family: Literal["linear", "pdnet"] = "pdnet"
    n_layers: int = 10
    n_channels: int = 40
    tau: Optional[float] = None
    gamma: Optional[float] = None
    lambda_init: float = 0.01


class DataSection(_Strict):
    source: str = "synthetic"
    patch_size: int = 32
    n_train: int = 12
    n_test: int = 4


class TaskSection(_Strict):
    kind: Literal["T1", "T2", "T3", "T4", "SR", "MRI"]
    name: Optional[str] = None
    sigma: Optional[float] = None
    strength: Optional[float] = None
    kernel_size: Optional[int] = None
    kernel_path: Optional[str] = None
    mask_path: Optional[str] = None
    drop_rate: Optional[float] = None
    factor: Optional[int] = None
    acceleration: Optional[int] = None


class InnerSection(_Strict):
    mode: Literal["sup", "unsup"] = "unsup"
    steps: Optional[int] = None
    optimizer: Literal["gd", "adam"] = "adam"
    step_size: Optional[float] = None
    reg_lambda: float = 1.0


class OuterSection(_Strict):
    step_size: float = 1e-3
    epochs: int = 200
    batch_size: Optional[int] = None


class ToySection(_Strict):
    grid: int = 8
    length_scale: float = 2.0
    mask_size: int = 3
    anchor_limit: int = 5
    test_anchor: Tuple[int, int] = (5, 5)
    n_train: int = 64
    n_test: int = 64
    finetune_steps: int = 20


class FinetuneSection(_Strict):
    checkpoint: Optional[str] = None
    task: TaskSection = TaskSection(kind="SR", factor=2)
    mode: Literal["sup", "unsup"] = "unsup"
    steps: int = 50
    optimizer: Literal["gd", "adam"] = "adam"
    step_size: float = 1e-3
    reg_lambda: float = 0.0


class BayesCheckSection(_Strict):
    instances: int = 100
    side: int = 4
    diagonal_instances: int = 20
    identity_instances: int = 10
    tolerance: float = 1e-8


class ExperimentConfig(_Strict):
    experiment: Literal["toy", "train", "finetune", "eval", "bayes-check"]
    seed: int
    output_dir: str = "runs/out"
    record_wall_clock: bool = False
    checkpoint_every: int = 0
    model: ModelSection = ModelSection()
    data: DataSection = DataSection()
    tasks: List[TaskSection] = [
        TaskSection(kind="T1", sigma=0.1),
        TaskSection(kind="T2", strength=0.1),
        TaskSection(kind="T3", kernel_size=5),
        TaskSection(kind="T4", drop_rate=0.3),
    ]
    inner: InnerSection = InnerSection()
    outer: OuterSection = OuterSection()
    toy: ToySection = ToySection()
    finetune: FinetuneSection = FinetuneSection()
    bayes_check: BayesCheckSection = BayesCheckSection()

    @model_validator(mode="after")
    def _paths_exist(self):
        paths = []
        if self.data.source != "synthetic":
            paths.append(self.data.source)
        for t in list(self.tasks) + [self.finetune.task]:
            paths += [p for p in (t.kernel_path, t.mask_path) if p]
        if self.experiment in ("finetune", "eval"):
            if not self.finetune.checkpoint:
                raise ValueError(f"{self.experiment} needs finetune.checkpoint")
            paths.append(self.finetune.checkpoint)
        missing = [p for p in paths if not os.path.exists(p)]
        if missing:
            raise ValueError(f"referenced path(s) do not exist: {', '.join(missing)}")
        return self


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a TOML config, or the ``config`` entry of a run manifest (JSON)."""
    try:
        if str(path).endswith(".json"):
            with open(path) as fh:
                raw = json.load(fh)
            raw = raw.get("config", raw)
        else:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config(raw)


def config_dict(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that affects results (the output location does not)."""
    raw = config_dict(cfg)
    raw.pop("output_dir", None)
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
