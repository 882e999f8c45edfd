"""Run configuration: one YAML file, every field overridable from the command line."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import DEFAULT_SLICE_FRACTION, PhantomSpec
from .errors import ConfigError, MissingInputError
from .evaluation import DEFAULT_BINS
from .losses import LossConfig
from .trainer import TrainConfig


@dataclass
class PhantomSection:
    n_healthy: int = 70
    n_anomalous: int = 30
    slices_per_volume: int = 12
    height: int = 64
    width: int = 64
    severity: float = 1.0
    noise_sigma: float = 0.01
    n_train: int = 40
    validation_fraction: float = 1 / 3
    structure_factor: float = 0.5
    cavity_factor: float = 0.8


@dataclass
class DataSection:
    manifest: str | None = None  # default: <out>/data/manifest.json
    target_width: int | None = None
    slice_fraction: float = DEFAULT_SLICE_FRACTION


@dataclass
class TrainSection:
    objective: str = "wgan_gp_l1"
    profile: str = "desk"
    steps: int | None = None
    batch_size: int | None = None
    base_filters: int | None = None
    critic_filters: int | None = None
    conditional_critic: bool = True
    learning_rate: float = 2.0e-4
    adam_beta1: float | None = None
    adam_beta2: float | None = None
    l1_weight: float = 100.0
    gp_lambda: float = 10.0
    critic_steps: int = 5
    checkpoint_every: int = 0


@dataclass
class ReconstructSection:
    splits: list = field(default_factory=lambda: ["validation", "test"])
    montages: bool = True


@dataclass
class EvaluateSection:
    bins: int = DEFAULT_BINS
    positive_cdrs: list | None = None  # validation positives for selection; None = every CDR > 0


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    phantom: PhantomSection = field(default_factory=PhantomSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    reconstruct: ReconstructSection = field(default_factory=ReconstructSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    # ---- derived views

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def manifest_path(self) -> Path:
        return Path(self.data.manifest) if self.data.manifest else self.out_dir / "data" / "manifest.json"

    def phantom_spec(self) -> PhantomSpec:
        p = self.phantom
        return PhantomSpec(
            seed=self.seed,
            n_healthy=p.n_healthy,
            n_anomalous=p.n_anomalous,
            slices_per_volume=p.slices_per_volume,
            slice_size=(p.height, p.width),
            severity=p.severity,
            noise_sigma=p.noise_sigma,
            n_train=p.n_train,
            validation_fraction=p.validation_fraction,
            structure_factor=p.structure_factor,
            cavity_factor=p.cavity_factor,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            loss=LossConfig(t.objective, t.l1_weight, t.gp_lambda, t.critic_steps),
            profile=t.profile,
            steps=t.steps,
            batch_size=t.batch_size,
            base_filters=t.base_filters,
            critic_filters=t.critic_filters,
            conditional_critic=t.conditional_critic,
            learning_rate=t.learning_rate,
            adam_beta1=t.adam_beta1,
            adam_beta2=t.adam_beta2,
            seed=self.seed,
            checkpoint_every=t.checkpoint_every,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig) if f.default_factory is not dataclasses.MISSING}
TOP_LEVEL = {f.name for f in fields(RunConfig) if f.name not in SECTIONS}


_TYPES = {"int": int, "float": float, "bool": bool, "str": str, "list": list}


def _coerce(value, type_str: str, key: str):
    """Check ``value`` against a field annotation such as ``"int | None"``."""
    names = [t.strip() for t in type_str.split("|")]
    if value is None:
        if "None" in names:
            return None
        raise ConfigError(f"{key}: value required")
    base = _TYPES[names[0]]
    if base is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if base is int and isinstance(value, bool) or not isinstance(value, base):
        raise ConfigError(f"{key}: expected {names[0]}, got {value!r}")
    return value


def _field(obj, name, dotted):
    for f in fields(obj):
        if f.name == name:
            return f
    raise ConfigError(f"unknown config key {dotted!r}")


def _set(cfg: RunConfig, dotted: str, value) -> None:
    parts = dotted.split(".")
    if len(parts) == 1 and parts[0] in TOP_LEVEL:
        target = cfg
    elif len(parts) == 2 and parts[0] in SECTIONS:
        target = getattr(cfg, parts[0])
    else:
        raise ConfigError(f"unknown config key {dotted!r}")
    f = _field(target, parts[-1], dotted)
    setattr(target, f.name, _coerce(value, f.type, dotted))


def apply_mapping(cfg: RunConfig, doc: dict) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("config file must contain a mapping")
    for key, val in doc.items():
        if key in SECTIONS:
            if val is None:
                continue
            if not isinstance(val, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            for sub, sval in val.items():
                _set(cfg, f"{key}.{sub}", sval)
        else:
            _set(cfg, key, val)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        apply_mapping(cfg, doc)
    for key, val in (overrides or {}).items():
        _set(cfg, key, val)
    return cfg


def flag_keys() -> list[str]:
    """Dotted key of every overridable field, e.g. ``train.steps``."""
    keys = sorted(TOP_LEVEL)
    for sec, factory in SECTIONS.items():
        keys += [f"{sec}.{f.name}" for f in fields(factory())]
    return keys


def parse_flag_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {text!r}: {exc}") from exc
