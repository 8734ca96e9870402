"""Run configuration: nested dataclasses loaded from commented JSON.

Every section is validated on load and unknown keys are rejected, so a
typo fails before any compute starts.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from ..dso import DsoConfig
from ..model.lpt import ModelConfig
from ..sampler import LangevinConfig
from ..trainer import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class TaskConfig:
    kind: str = "table"
    symbols: str = "ACGT"
    length: int = 8
    eos: bool = False
    oracle_seed: int = 0
    oracle_path: str | None = None
    dataset_path: str | None = None
    n_offline: int = 1000
    offline_pool: float = 0.5
    noise_pct: float = 0.0
    feasible_frac: float = 0.1

    def __post_init__(self):
        if self.kind not in ("table", "constrained", "oracle_file"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if not 0 < self.offline_pool <= 1:
            raise ConfigError("offline_pool must be in (0, 1]")
        if not 0 < self.feasible_frac < 1:
            raise ConfigError("feasible_frac must be in (0, 1)")
        if self.noise_pct < 0:
            raise ConfigError("noise_pct must be non-negative")
        if self.kind == "oracle_file" and not self.oracle_path:
            raise ConfigError("task kind 'oracle_file' needs oracle_path")


def _model_section():
    return {"k_tokens": 2, "k_dim": 16, "embed": 32, "heads": 2, "layers": 2, "ffn_mult": 2,
            "prior": "unet", "prior_hidden": 32, "predictor_hidden": 32,
            "predictor_layers": 3, "sigma2": 1.0}


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out_dir: str | None = None
    cache_dir: str | None = None
    threads: int = 1
    task: TaskConfig = field(default_factory=TaskConfig)
    model: dict = field(default_factory=_model_section)
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(mode="pretrain", epochs=10))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(mode="finetune", epochs=5))
    online: TrainConfig = field(default_factory=lambda: TrainConfig(
        mode="online", lr_max=3e-4, lr_min=7.5e-5, epochs=3))
    dso: DsoConfig = field(default_factory=DsoConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {"task": TaskConfig, "langevin": LangevinConfig, "pretrain": TrainConfig,
             "finetune": TrainConfig, "online": TrainConfig, "dso": DsoConfig}
_MODES = {"pretrain": "pretrain", "finetune": "finetune", "online": "online"}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def model_config(section: dict, properties) -> tuple[ModelConfig, float]:
    """Split the model section into a ModelConfig and the regression sigma2."""
    sec = dict(section)
    sigma2 = float(sec.pop("sigma2", 1.0))
    sec["properties"] = properties
    return _build(ModelConfig, sec, "model"), sigma2


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    base = RunConfig()
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            merged = dataclasses.asdict(getattr(base, key))
            merged.update(value)
            if key in _MODES:
                merged.setdefault("mode", _MODES[key])
                if merged["mode"] != _MODES[key]:
                    raise ConfigError(f"{key}: mode must be {_MODES[key]!r}")
            kwargs[key] = _build(_SECTIONS[key], merged, key)
        elif key == "model":
            if not isinstance(value, dict):
                raise ConfigError("model: expected an object")
            merged = dict(base.model)
            allowed = set(merged)
            unknown = sorted(set(value) - allowed)
            if unknown:
                raise ConfigError(f"model: unknown keys {unknown}")
            merged.update(value)
            model_config(merged, [])  # validate now
            kwargs[key] = merged
        else:
            kwargs[key] = value
    cfg = RunConfig(**kwargs)
    if cfg.dso.budget < cfg.dso.m_proposals:
        raise ConfigError("dso.budget must be >= dso.m_proposals")
    return cfg


def strip_comments(text):
    """Drop whole-line ``//`` or ``#`` comments before JSON parsing."""
    return "\n".join("" if re.match(r"\s*(//|#)", line) else line for line in text.splitlines())


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(strip_comments(text))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return from_dict(data)


def override(cfg: RunConfig, **changes) -> RunConfig:
    """Copy of ``cfg`` with dotted-key overrides, e.g. ``**{"dso.max_iters": 1}``."""
    data = cfg.to_dict()
    for dotted, value in changes.items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return from_dict(data)
