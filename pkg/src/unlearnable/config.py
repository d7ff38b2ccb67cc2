"""Experiment configuration: JSON documents mapped onto dataclasses, plus seed derivation."""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .optim import SgdConfig

MASK64 = 2**64 - 1
SCALES = ("desk", "full")
DATA_SOURCES = ("synthetic", "cifar10", "files")
POISONS = ("none", "random-noise", "regions", "one-pixel", "samplewise-random", "adversarial")
ATTACKS = ("none", "ortho-proj", "adv-train", "class-avg-sub")


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(root, stage):
    """Per-stage seed: splitmix64 of the root seed mixed with a hash of the stage name."""
    key = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:8], "little")
    return splitmix64((int(root) & MASK64) ^ key)


@dataclass
class DataSection:
    source: str = "synthetic"
    k: int = 10
    n_per_class: int = 600
    h: int = 16
    w: int = 16
    noise: float = 0.15
    path: str = None        # cifar10 directory
    train_path: str = None  # UNLN-DATA files for source "files"
    test_path: str = None

    def validate(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.source == "cifar10":
            _require_path("data.path", self.path, directory=True)
        if self.source == "files":
            _require_path("data.train_path", self.train_path)
            _require_path("data.test_path", self.test_path)


@dataclass
class PoisonSection:
    variant: str = "random-noise"
    eps: float = 8 / 255
    patches: int = 4
    constraint: str = "linf"
    steps: int = 30
    step_size: float = None

    def validate(self):
        if self.variant not in POISONS:
            raise ConfigError(f"poison.variant must be one of {POISONS}, got {self.variant!r}")
        if not self.eps >= 0:
            raise ConfigError("poison.eps must be non-negative")


@dataclass
class PgdSection:
    eps: float = 8 / 255
    steps: int = 3
    step_size: float = None


@dataclass
class AttackSection:
    name: str = "none"
    linear: dict = field(default_factory=dict)  # SgdConfig overrides for the projection's linear model
    sgd: dict = field(default_factory=dict)     # SgdConfig overrides for adversarial training
    pgd: PgdSection = field(default_factory=PgdSection)

    def validate(self):
        if self.name not in ATTACKS:
            raise ConfigError(f"attack.name must be one of {ATTACKS}, got {self.name!r}")
        _sgd_from(self.linear, "attack.linear")
        _sgd_from(self.sgd, "attack.sgd")


@dataclass
class ProbeSection:
    perturbations: bool = True
    images: bool = True
    weights: bool = True
    steps: int = 500


@dataclass
class DfrSection:
    enabled: bool = True
    fraction: float = 0.1

    def validate(self):
        if not 0 < self.fraction <= 1:
            raise ConfigError("dfr.fraction must lie in (0, 1]")


@dataclass
class ExperimentConfig:
    seed: int = 0
    scale: str = "desk"
    output: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    victim: dict = field(default_factory=dict)  # SgdConfig overrides
    attack: AttackSection = field(default_factory=AttackSection)
    probes: ProbeSection = field(default_factory=ProbeSection)
    dfr: DfrSection = field(default_factory=DfrSection)

    def validate(self):
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if not 0 <= int(self.seed) <= MASK64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for section in (self.data, self.poison, self.attack, self.dfr):
            section.validate()
        _sgd_from(self.victim, "victim")
        return self

    def victim_sgd(self):
        return _sgd_from(self.victim, "victim", seed=derive_seed(self.seed, "victim"))

    def to_dict(self):
        return dataclasses.asdict(self)

    def canonical_json(self):
        """Sorted, whitespace-free JSON of everything except the output location."""
        doc = self.to_dict()
        doc.pop("output")
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def run_id(self):
        """Content address of the experiment (first 16 hex digits of its SHA-256)."""
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def _sgd_from(overrides, where, seed=None):
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where} must be a mapping of SGD settings")
    names = {f.name for f in dataclasses.fields(SgdConfig)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]}")
    kw = dict(overrides)
    if "milestones" in kw:
        kw["milestones"] = tuple(kw["milestones"])
    if seed is not None and "seed" not in kw:
        kw["seed"] = seed
    try:
        return SgdConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _require_path(key, path, directory=False):
    if not path:
        raise ConfigError(f"{key} is required for this data source")
    ok = os.path.isdir(path) if directory else os.path.isfile(path)
    if not ok:
        raise ConfigError(f"{key} points to a missing {'directory' if directory else 'file'}: {path}")


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key not in fields:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{key}")
        default = fields[key].default_factory() if fields[key].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, f"{where + '.' if where else ''}{key}")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(doc):
    return _build(ExperimentConfig, doc, "").validate()


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)
