from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MllmClientConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model_name: str = "gemma3-27b"
    timeout: float = 120.0
    max_retries: int = 3
    temperature: float = 0.0
    concurrency: int = 4
    image_mode: str = "base64"  # or "url"

    def __post_init__(self):
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ConfigError("timeout must be > 0")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.image_mode not in ("base64", "url"):
            raise ConfigError(f"unknown image_mode {self.image_mode!r}")


@dataclass(frozen=True)
class GraphConfig:
    k_semantic: int = 10
    alpha: float = 0.5
    k_cooccur: int = 10
    layers: int = 1
    symmetrize: bool = False
    use_cooccur: bool = True

    def __post_init__(self):
        if self.k_semantic < 1 or self.k_cooccur < 1:
            raise ConfigError("k_semantic and k_cooccur must be >= 1")
        # -1 disables the threshold (pure KNN); otherwise alpha lives in [0, 1]
        if not (self.alpha == -1.0 or 0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1] (or -1 to disable), got {self.alpha}")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2048
    learning_rate: float = 0.001
    d: int = 64
    d1: int = 256
    max_epochs: int = 1000
    patience: int = 20
    seed: int = 2024
    leaky_slope: float = 0.01
    weight_decay: float = 0.0

    def __post_init__(self):
        for name in ("batch_size", "d", "d1", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 < self.leaky_slope < 1:
            raise ConfigError("leaky_slope must be in (0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    dataset: str = "Baby"
    interactions: str = "interactions.tsv"
    items: str = "items.jsonl"
    workdir: str = "work"
    kcore: int = 5
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 2024
    behavior_cap: int = 50
    separator: str = ". "
    mllm: MllmClientConfig = field(default_factory=MllmClientConfig)
    encoder: str = "stub"  # "stub" | "file"
    encoder_dim: int = 32
    encoder_path: str = ""
    graph: GraphConfig = field(default_factory=GraphConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ks: tuple[int, ...] = (10, 20)
    alpha_grid: tuple[float, ...] = (0.4, 0.5, 0.6, 0.7)
    k_cooccur_grid: tuple[int, ...] = (5, 10, 15, 20)

    def __post_init__(self):
        if not self.dataset:
            raise ConfigError("dataset name must be nonempty")
        if self.encoder not in ("stub", "file"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.encoder == "file" and not self.encoder_path:
            raise ConfigError("encoder 'file' requires encoder_path")
        if self.kcore < 1 or self.behavior_cap < 1 or self.encoder_dim < 1:
            raise ConfigError("kcore, behavior_cap and encoder_dim must be >= 1")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("ks must be a nonempty list of positive integers")


# flat key -> (section, field); section None means top level
_SECTIONS = {"mllm": MllmClientConfig, "graph": GraphConfig, "train": TrainConfig}
_FLAT_KEYS: dict[str, tuple[str | None, str]] = {}
for _f in dataclasses.fields(PipelineConfig):
    if _f.name not in _SECTIONS:
        _FLAT_KEYS[_f.name] = (None, _f.name)
for _section, _cls in _SECTIONS.items():
    for _f in dataclasses.fields(_cls):
        _FLAT_KEYS[f"{_section}_{_f.name}"] = (_section, _f.name)
# the MllmClientConfig fields already carry a model_ prefix; accept the short form too
_FLAT_KEYS["mllm_model"] = ("mllm", "model_name")

FLAT_KEYS = tuple(sorted(_FLAT_KEYS))


def _coerce(value: Any, template: Any) -> Any:
    if isinstance(template, tuple):
        if not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(value)
    return value


def config_from_dict(flat: dict[str, Any], base_dir: Path | None = None) -> PipelineConfig:
    """Build a PipelineConfig from flat keys such as ``graph_alpha`` or ``train_d1``.

    Relative paths are made absolute against ``base_dir`` when given.
    """
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    defaults = PipelineConfig()
    for key, value in flat.items():
        if key not in _FLAT_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name = _FLAT_KEYS[key]
        if section is None:
            top[name] = _coerce(value, getattr(defaults, name))
        else:
            sections[section][name] = value
    try:
        for s, cls in _SECTIONS.items():
            top[s] = cls(**sections[s])
        cfg = PipelineConfig(**top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if base_dir is not None:
        updates = {}
        for name in ("interactions", "items", "workdir", "encoder_path"):
            raw = getattr(cfg, name)
            if raw and not Path(raw).expanduser().is_absolute():
                updates[name] = str((base_dir / raw).resolve())
        cfg = dataclasses.replace(cfg, **updates)
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat mapping of keys to values")
    return config_from_dict(data, base_dir=path.resolve().parent)


def config_to_dict(cfg: PipelineConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, (section, name) in _FLAT_KEYS.items():
        if key == "mllm_model":
            continue
        obj = cfg if section is None else getattr(cfg, section)
        value = getattr(obj, name)
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def stable_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
