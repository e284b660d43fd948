"""Experiment configuration: YAML on disk, validated dataclasses in memory.

Unknown keys and ill-typed values raise :class:`ConfigError` naming the field
path (``model.hidden[1]``). ``canonical`` gives a stable serialization used
for hashing configs into checkpoints and results.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

EXPERIMENTS = ("lr_schedule", "init_scales", "per_param_reg", "learn_data", "tied_reg",
               "chaos_sweep", "memory_bench")


class ConfigError(ValueError):
    pass


@dataclass
class ModelSpec:
    kind: str = "mlp"
    hidden: list[int] = field(default_factory=lambda: [20, 20, 20])


@dataclass
class DataSpec:
    source: str = "synthetic"
    n_train: int = 500
    n_valid: int = 200
    features: int = 64
    classes: int = 10
    separation: float = 1.0
    tasks: int = 1
    seed: int = 0


@dataclass
class InitSpec:
    alpha: float = 0.5
    gamma: float = 0.9
    log_init_scale: typing.Optional[float] = None
    log_l2: float = -8.0
    log_tie: float = -6.0


@dataclass
class SweepSpec:
    log10_alpha_min: float = -2.0
    log10_alpha_max: float = 1.0
    points: int = 31


@dataclass
class BenchSpec:
    gammas: list[str] = field(default_factory=lambda: ["1/2", "7/8", "9/10", "49/50", "1/1"])
    steps: int = 10000
    elements: int = 100
    seed: int = 0


@dataclass
class ExperimentConfig:
    experiment: str = "lr_schedule"
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    init: InitSpec = field(default_factory=InitSpec)
    T: int = 100
    batch_size: int = 10
    meta_iters: int = 20
    seeds: int = 3
    eval_seeds: int = 5
    meta_step: float = 0.04
    frac_bits: int = 32
    objective: str = "valid"
    learn: list[str] = field(default_factory=lambda: ["alpha"])
    sweep: SweepSpec = field(default_factory=SweepSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)
    output_dir: str = "out"

    def validate(self) -> "ExperimentConfig":
        def need(cond, path, msg):
            if not cond:
                raise ConfigError(f"{path}: {msg}")
        need(self.experiment in EXPERIMENTS, "experiment", f"must be one of {EXPERIMENTS}")
        need(self.model.kind in ("mlp", "logistic"), "model.kind", "must be 'mlp' or 'logistic'")
        for k, h in enumerate(self.model.hidden):
            need(h > 0, f"model.hidden[{k}]", "must be positive")
        need(self.data.source in ("synthetic", "mnist"), "data.source",
             "must be 'synthetic' or 'mnist'")
        need(self.data.classes >= 2, "data.classes", "need at least 2 classes")
        need(self.data.n_train >= self.data.classes, "data.n_train", "must be >= data.classes")
        need(self.data.n_valid >= 1, "data.n_valid", "must be positive")
        need(self.data.features >= 1, "data.features", "must be positive")
        need(self.data.tasks >= 1, "data.tasks", "must be positive")
        need(self.T >= 0, "T", "must be nonnegative")
        need(1 <= self.batch_size, "batch_size", "must be positive")
        need(self.meta_iters >= 0, "meta_iters", "must be nonnegative")
        need(self.seeds >= 1, "seeds", "must be positive")
        need(self.eval_seeds >= 1, "eval_seeds", "must be positive")
        need(self.meta_step > 0, "meta_step", "must be positive")
        need(8 <= self.frac_bits <= 48, "frac_bits", "must be in [8, 48]")
        need(self.objective in ("train", "valid"), "objective", "must be 'train' or 'valid'")
        for k, name in enumerate(self.learn):
            need(name in ("alpha", "gamma", "theta"), f"learn[{k}]",
                 "must be 'alpha', 'gamma' or 'theta'")
        need(self.init.alpha > 0, "init.alpha", "must be positive")
        need(0 < self.init.gamma < 1, "init.gamma", "must lie in (0, 1)")
        need(self.sweep.points >= 3, "sweep.points", "need at least 3 points")
        need(self.sweep.log10_alpha_min < self.sweep.log10_alpha_max, "sweep.log10_alpha_max",
             "must exceed sweep.log10_alpha_min")
        need(self.bench.steps >= 1, "bench.steps", "must be positive")
        need(self.bench.elements >= 1, "bench.elements", "must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical().encode()).digest()

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _build(cls, raw, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"{where}: unknown field")
    kwargs = {}
    for name in names & set(raw):
        kwargs[name] = _coerce(hints[name], raw[name], f"{path}.{name}" if path else name)
    return cls(**kwargs)


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        (item,) = typing.get_args(tp)
        return [_coerce(item, v, f"{path}[{k}]") for k, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, (str, int)) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return str(value)
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(raw: dict) -> ExperimentConfig:
    """Build a config, filling unspecified fields from the experiment's defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a mapping")
    experiment = raw.get("experiment", "lr_schedule")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: must be one of {EXPERIMENTS}")
    base = defaults(experiment).to_dict()
    # validate field names/types against the raw input first so paths stay exact
    _build(ExperimentConfig, raw, "")
    return _build(ExperimentConfig, _merge(base, raw), "").validate()


def load(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return from_dict(raw or {})


def defaults(experiment: str) -> ExperimentConfig:
    """Desk-scale defaults for each experiment."""
    cfg = ExperimentConfig(experiment=experiment)
    if experiment == "lr_schedule":
        cfg.objective = "train"
        cfg.learn = ["alpha"]
    elif experiment == "init_scales":
        cfg.learn = ["theta"]
        cfg.init.alpha = 0.3
        cfg.batch_size = 50
    elif experiment == "per_param_reg":
        cfg.model = ModelSpec("logistic", [])
        cfg.data = DataSpec(n_train=100, n_valid=500, features=64, classes=10, separation=2.0)
        cfg.learn = ["theta"]
        cfg.init.alpha = 0.5
        cfg.init.log_l2 = -6.0
        cfg.batch_size = 50
        cfg.T = 100
    elif experiment == "learn_data":
        cfg.model = ModelSpec("logistic", [])
        cfg.data = DataSpec(n_train=10, n_valid=500, features=64, classes=10, separation=3.0)
        cfg.learn = ["theta"]
        cfg.init.alpha = 0.5
        cfg.init.log_init_scale = -30.0
        cfg.meta_step = 0.1
        cfg.T = 50
        cfg.seeds = 1
        cfg.eval_seeds = 1
    elif experiment == "tied_reg":
        cfg.model = ModelSpec("mlp", [10])
        cfg.data = DataSpec(n_train=20, n_valid=200, features=16, classes=4, separation=2.0,
                            tasks=4)
        cfg.learn = ["theta"]
        cfg.init.alpha = 0.5
        cfg.init.log_tie = -4.0
        cfg.batch_size = 20
        cfg.T = 50
        cfg.meta_step = 0.1
    elif experiment == "chaos_sweep":
        cfg.model = ModelSpec("mlp", [20, 20])
        cfg.data = DataSpec(n_train=200, n_valid=100, features=16, classes=4, separation=1.5)
        cfg.T = 50
        cfg.batch_size = 200
        cfg.objective = "train"
        cfg.meta_iters = 0
        cfg.seeds = 1
        cfg.sweep = SweepSpec(-1.0, 2.5, 36)
    elif experiment == "memory_bench":
        cfg.meta_iters = 0
    else:
        raise ConfigError(f"experiment: must be one of {EXPERIMENTS}")
    return cfg.validate()
