"""Experiment configuration: INI-style sections, one per pipeline stage.

Example::

    [experiment]
    seed = 0
    trials = 3
    max_iters = 50
    time_mode = deterministic

    [dataset.blobs]
    kind = synthetic
    samples = 200
    features = 20
    classes = 3
    separation = 4.0

    [attacks]
    select = all

    [evaluation]
    norms = l0, l2, linf
    thetas = 0, 1, 2
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import SyntheticSpec
from .model import AdvTrainConfig, TrainConfig
from .surface import norm_name, parse_norm


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSource:
    name: str
    kind: str = "synthetic"
    synthetic: SyntheticSpec | None = None
    path: str | None = None
    label_column: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"dataset {self.name}: kind must be 'synthetic' or 'csv'")
        if self.kind == "csv" and (not self.path or not self.label_column):
            raise ConfigError(f"dataset {self.name}: csv datasets need path and label_column")
        if self.kind == "synthetic" and self.synthetic is None:
            object.__setattr__(self, "synthetic", SyntheticSpec())


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple[DatasetSource, ...] = (DatasetSource("blobs"),)
    seed: int = 0
    trials: int = 3
    max_iters: int = 50
    time_mode: str = "deterministic"
    test_fraction: float = 0.5
    attack_samples: int = 100
    hidden: tuple[int, ...] = (32,)
    train: TrainConfig = TrainConfig()
    advtrain: AdvTrainConfig | None = None
    attacks: str = "all"
    rr_epsilon: float = 0.05
    step_l0: float = 1.0
    step_l2: float = 0.05
    step_linf: float = 0.01
    cw_tradeoff: float = 1.0
    norms: tuple[float, ...] = (0.0, 2.0, np.inf)
    thetas: tuple[float, ...] = (0.0, 1.0, 2.0)
    grid_points: int = 101
    threshold: float = 0.01
    alpha: float = 0.01
    paper_parity: bool = True
    save_trajectories: bool = True
    workers: int = 1
    out: str = "results"

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        if self.time_mode not in ("wall", "deterministic"):
            raise ConfigError("time_mode must be 'wall' or 'deterministic'")
        if not self.datasets:
            raise ConfigError("at least one dataset is required")
        if len({d.name for d in self.datasets}) != len(self.datasets):
            raise ConfigError("dataset names must be unique")
        if any(t < 0 for t in self.thetas):
            raise ConfigError("theta must be non-negative")
        if self.paper_parity and any(t > 2 for t in self.thetas):
            raise ConfigError("theta must lie in [0, 2] when paper_parity is set")
        if self.attack_samples < 1 or self.grid_points < 2 or self.workers < 1:
            raise ConfigError("attack_samples, grid_points and workers must be positive")
        object.__setattr__(self, "norms", tuple(parse_norm(p) for p in self.norms))
        object.__setattr__(self, "thetas", tuple(float(t) for t in self.thetas))

    @property
    def robust(self) -> bool:
        return self.advtrain is not None

    @property
    def step_sizes(self) -> dict:
        return {0.0: self.step_l0, 2.0: self.step_l2, np.inf: self.step_linf}

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "datasets":
                value = [asdict(d) for d in value]
            elif f.name in ("train", "advtrain"):
                value = None if value is None else asdict(value)
            elif f.name == "norms":
                value = [norm_name(p) for p in value]
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    def config_hash(self) -> str:
        """Hash of every parameter that can change results (output location and worker count excluded)."""
        payload = {k: v for k, v in self.to_dict().items() if k not in ("out", "workers")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


_BOOL = configparser.RawConfigParser.BOOLEAN_STATES


def _coerce(name: str, raw: str, current):
    try:
        if isinstance(current, bool):
            if raw.lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[raw.lower()]
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def _apply(section, obj_fields: dict, names, where: str) -> dict:
    out = {}
    for key, raw in section.items():
        if key not in names:
            raise ConfigError(f"[{where}] unknown key {key!r}")
        out[key] = _coerce(f"[{where}] {key}", raw, obj_fields[key])
    return out


def _stage_configs(parser, kw: dict) -> None:
    train_defaults = asdict(TrainConfig())
    if parser.has_section("train"):
        kw["train"] = TrainConfig(**{**train_defaults, **_apply(parser["train"], train_defaults,
                                                                 train_defaults.keys(), "train")})
    if parser.has_section("advtrain"):
        sec = dict(parser["advtrain"])
        enabled = _BOOL.get(sec.pop("enabled", "true").lower(), True)
        adv_defaults = asdict(AdvTrainConfig())
        base = asdict(kw.get("train", TrainConfig()))
        adv = {**adv_defaults, **base, **_apply(sec, adv_defaults, adv_defaults.keys(), "advtrain")}
        kw["advtrain"] = AdvTrainConfig(**adv) if enabled else None


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    known = {"experiment", "model", "train", "advtrain", "attacks", "evaluation"}
    for name in parser.sections():
        if name not in known and not name.startswith("dataset."):
            raise ConfigError(f"unknown section [{name}]")

    kw = {}
    defaults = ExperimentConfig()
    top = {f.name: getattr(defaults, f.name) for f in fields(ExperimentConfig)}

    if parser.has_section("experiment"):
        allowed = {"seed", "trials", "max_iters", "time_mode", "test_fraction", "paper_parity",
                   "save_trajectories", "workers", "out"}
        kw.update(_apply(parser["experiment"], top, allowed, "experiment"))

    datasets = []
    for name in parser.sections():
        if not name.startswith("dataset."):
            continue
        sec = dict(parser[name])
        label = name.split(".", 1)[1]
        kind = sec.pop("kind", "synthetic")
        if kind == "csv":
            path = sec.pop("path", None)
            if path and base_dir is not None and not Path(path).is_absolute():
                path = str((base_dir / path).resolve())
            datasets.append(DatasetSource(label, "csv", None, path, sec.pop("label_column", None)))
            if sec:
                raise ConfigError(f"[{name}] unknown keys {sorted(sec)}")
        else:
            spec_defaults = asdict(SyntheticSpec())
            spec = _apply(sec, spec_defaults, spec_defaults.keys(), name)
            datasets.append(DatasetSource(label, "synthetic", SyntheticSpec(**spec)))
    if datasets:
        kw["datasets"] = tuple(datasets)

    if parser.has_section("model"):
        sec = dict(parser["model"])
        if "hidden" in sec:
            kw["hidden"] = _ints(sec.pop("hidden"))
        if sec:
            raise ConfigError(f"[model] unknown keys {sorted(sec)}")

    try:
        _stage_configs(parser, kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    if parser.has_section("attacks"):
        allowed = {"select", "attack_samples", "rr_epsilon", "step_l0", "step_l2", "step_linf", "cw_tradeoff"}
        sec = _apply(parser["attacks"], {**top, "select": "all"}, allowed, "attacks")
        if "select" in sec:
            kw["attacks"] = sec.pop("select")
        kw.update(sec)

    if parser.has_section("evaluation"):
        sec = dict(parser["evaluation"])
        if "norms" in sec:
            try:
                kw["norms"] = tuple(parse_norm(p.strip()) for p in sec.pop("norms").split(",") if p.strip())
            except ValueError as exc:
                raise ConfigError(f"[evaluation] norms: {exc}") from None
        if "thetas" in sec:
            try:
                kw["thetas"] = _floats(sec.pop("thetas"))
            except ValueError:
                raise ConfigError("[evaluation] thetas must be comma-separated numbers") from None
        kw.update(_apply(sec, top, {"grid_points", "threshold", "alpha"}, "evaluation"))

    try:
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a config back into the INI format accepted by :func:`parse_config`."""
    lines = ["[experiment]"]
    for key in ("seed", "trials", "max_iters", "time_mode", "test_fraction", "paper_parity",
                "save_trajectories", "workers", "out"):
        lines.append(f"{key} = {getattr(cfg, key)}")
    for ds in cfg.datasets:
        lines += ["", f"[dataset.{ds.name}]", f"kind = {ds.kind}"]
        if ds.kind == "csv":
            lines += [f"path = {ds.path}", f"label_column = {ds.label_column}"]
        else:
            lines += [f"{k} = {v}" for k, v in asdict(ds.synthetic).items()]
    lines += ["", "[model]", "hidden = " + ", ".join(str(h) for h in cfg.hidden)]
    lines += ["", "[train]"] + [f"{k} = {v}" for k, v in asdict(cfg.train).items()]
    if cfg.advtrain is not None:
        lines += ["", "[advtrain]", "enabled = true"]
        lines += [f"{k} = {v}" for k, v in asdict(cfg.advtrain).items() if k not in asdict(cfg.train)]
    lines += ["", "[attacks]", f"select = {cfg.attacks}"]
    for key in ("attack_samples", "rr_epsilon", "step_l0", "step_l2", "step_linf", "cw_tradeoff"):
        lines.append(f"{key} = {getattr(cfg, key)}")
    lines += ["", "[evaluation]", "norms = " + ", ".join(norm_name(p) for p in cfg.norms),
              "thetas = " + ", ".join(f"{t:g}" for t in cfg.thetas)]
    for key in ("grid_points", "threshold", "alpha"):
        lines.append(f"{key} = {getattr(cfg, key)}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    from dataclasses import replace

    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})
