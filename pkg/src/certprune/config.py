"""Run configuration: JSON in, fully resolved and validated RunConfig out.

Unknown keys are rejected with their full key path.  Epsilon values may be
written as rational strings such as "2/255" and are kept exact.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from fractions import Fraction

from .network import ARCH_PRESETS
from .pruning import METHODS as PRUNE_METHODS
from .training import METHODS as TRAIN_METHODS, REGULARIZERS, TrainConfig


class ConfigError(ValueError):
    pass


def parse_fraction(value, where):
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number or 'a/b' string, got {value!r}")
    if isinstance(value, (int, float)):
        return Fraction(value).limit_denominator(10 ** 9) if isinstance(value, float) else Fraction(value)
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"{where}: cannot parse {value!r} as a rational number") from None
    raise ConfigError(f"{where}: expected a number or 'a/b' string, got {type(value).__name__}")


def frac_str(f):
    f = Fraction(f)
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


@dataclass
class DatasetSpec:
    kind: str = "two-moons"
    n: int = 1000
    noise: float = 0.1
    seed: int = 0
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    subset: int = 200
    train_subset: int = 0


@dataclass
class ArchConfig:
    name: str = "mlp"
    params: dict = field(default_factory=dict)


@dataclass
class PruneVariant:
    name: str = "IMP"
    method: str = "magnitude"
    regularizer: str = "none"
    reg_weight: float = 0.01
    slim_l1: float = 0.0


@dataclass
class PruningSpec:
    rate: float = 0.2
    rounds: int = 8
    finetune: bool = False
    prune_linear: bool = True
    saliency_batch: int = 256
    variants: list = field(default_factory=lambda: [PruneVariant()])


@dataclass
class VerifierSpec:
    eps: Fraction = Fraction(1, 20)
    n_samples: int = 100
    time_budget: float = 600.0
    max_subdomains: int = 2000
    batch: int = 32
    pgd_steps: int = 20
    pgd_restarts: int = 1


@dataclass
class OracleSpec:
    nets: int = 20
    queries: int = 50
    hidden_min: int = 4
    hidden_max: int = 8
    max_layers: int = 2
    eps: list = field(default_factory=lambda: [0.005, 0.02, 0.05, 0.1, 0.2])
    min_width: float = 1e-6
    seed: int = 0


@dataclass
class RunConfig:
    preset: str = "desk"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: dict = field(default_factory=dict)  # TrainConfig overrides on top of the preset
    pruning: PruningSpec = field(default_factory=PruningSpec)
    verifier: VerifierSpec = field(default_factory=VerifierSpec)
    oracle: OracleSpec = field(default_factory=OracleSpec)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output: str = "runs"

    def train_config(self, variant=None, seed=0):
        method = self.train.get("method", "ibp-certified")
        reg = variant.regularizer if variant else self.train.get("regularizer", "none")
        over = {k: v for k, v in self.train.items() if k not in ("method", "regularizer")}
        if variant is not None:
            over["reg_weight"] = variant.reg_weight if reg != "none" else 0.0
            over["slim_l1"] = variant.slim_l1
        over["seed"] = seed
        return TrainConfig.preset(self.preset, method, reg, **over)

    def to_dict(self):
        d = _to_plain(self)
        return d

    def digest(self):
        d = self.to_dict()
        d.pop("output", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _to_plain(obj):
    if isinstance(obj, Fraction):
        return frac_str(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _check_scalar(value, default, where):
    if isinstance(default, Fraction):
        return parse_fraction(value, where)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected bool, got {type(value).__name__}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected int, got {type(value).__name__}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {type(value).__name__}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {type(value).__name__}")
        return value
    return value


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(raw).__name__}")
    obj = cls()
    known = {f.name for f in fields(cls)}
    for key, value in raw.items():
        path = f"{where}.{key}" if where else key
        if key not in known:
            raise ConfigError(f"{path}: unknown key")
        default = getattr(obj, key)
        if hasattr(default, "__dataclass_fields__"):
            value = _build(type(default), value, path)
        elif key == "variants":
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{path}: expected a non-empty list of variants")
            value = [_build(PruneVariant, v, f"{path}[{i}]") for i, v in enumerate(value)]
        elif key == "train":
            value = _parse_train(value, path)
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list")
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object")
        else:
            value = _check_scalar(value, default, path)
        setattr(obj, key, value)
    return obj


def _parse_train(raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    out = {}
    for key, value in raw.items():
        path = f"{where}.{key}"
        if key not in _TRAIN_FIELDS or key == "seed":
            raise ConfigError(f"{path}: unknown key")
        default = _TRAIN_FIELDS[key].default
        if key == "milestones":
            if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
                raise ConfigError(f"{path}: expected a list of ints")
            out[key] = tuple(value)
        else:
            out[key] = _check_scalar(value, default, path)
    return out


def validate(cfg, base_dir="."):
    ds = cfg.dataset
    if cfg.preset not in ("desk", "paper"):
        raise ConfigError(f"preset: expected desk or paper, got {cfg.preset!r}")
    if ds.kind == "two-moons":
        if ds.n < 2 or ds.noise < 0:
            raise ConfigError("dataset: need n >= 2 and noise >= 0")
    elif ds.kind == "idx":
        for key in ("images", "labels", "test_images", "test_labels"):
            path = getattr(ds, key)
            if not path:
                raise ConfigError(f"dataset.{key}: required for idx datasets")
            full = path if os.path.isabs(path) else os.path.join(base_dir, path)
            if not os.path.exists(full):
                raise ConfigError(f"dataset.{key}: file not found: {path}")
            setattr(ds, key, os.path.abspath(full))
    else:
        raise ConfigError(f"dataset.kind: expected two-moons or idx, got {ds.kind!r}")
    if cfg.arch.name not in ARCH_PRESETS:
        raise ConfigError(f"arch.name: expected one of {sorted(ARCH_PRESETS)}, got {cfg.arch.name!r}")
    if not cfg.seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in cfg.seeds):
        raise ConfigError("seeds: expected a non-empty list of non-negative ints")
    p = cfg.pruning
    if not 0 < p.rate < 1:
        raise ConfigError("pruning.rate: must be in (0, 1)")
    if p.rounds < 0:
        raise ConfigError("pruning.rounds: must be >= 0")
    names = set()
    for i, v in enumerate(p.variants):
        if v.method not in PRUNE_METHODS:
            raise ConfigError(f"pruning.variants[{i}].method: expected one of {PRUNE_METHODS}")
        if v.regularizer not in REGULARIZERS:
            raise ConfigError(f"pruning.variants[{i}].regularizer: expected one of {REGULARIZERS}")
        if v.name in names or not v.name or "/" in v.name:
            raise ConfigError(f"pruning.variants[{i}].name: must be unique, non-empty, without '/'")
        names.add(v.name)
    if cfg.train.get("method", "ibp-certified") not in TRAIN_METHODS:
        raise ConfigError(f"train.method: expected one of {TRAIN_METHODS}")
    if cfg.verifier.eps < 0:
        raise ConfigError("verifier.eps: must be >= 0")
    try:
        for s in cfg.seeds[:1]:
            cfg.train_config(p.variants[0], s)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    return cfg


def parse_config_dict(raw, base_dir=".", preset=None, seeds=None):
    cfg = _build(RunConfig, raw, "")
    if preset is not None:
        cfg.preset = preset
    if seeds is not None:
        cfg.seeds = list(seeds)
    return validate(cfg, base_dir)


def parse_config(path, preset=None, seeds=None):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config_dict(raw, os.path.dirname(os.path.abspath(path)), preset, seeds)


def dump_effective(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
