"""Versioned YAML experiment configs with strict keys and a resolved echo."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import yaml

SCHEMA_VERSION = 1
COMMANDS = ("simulate", "loss-eval", "rate-study", "exit-study", "decompose-check", "wald", "train",
            "validate", "verify-all")


class ConfigError(ValueError):
    pass


@dataclass
class ProblemSection:
    name: str = "P1"
    options: dict = field(default_factory=dict)
    tables: dict | None = None  # declarative polynomial problem, overrides name


@dataclass
class CandidateSection:
    kind: str = "exact"  # exact | file | perturbed | zero
    file: str | None = None
    eps: float = 0.0
    bump_center: list | None = None
    bump_width: float = 0.5


@dataclass
class GridSection:
    h: float | None = None
    h_list: list | None = None


@dataclass
class SamplingSection:
    n_paths: int = 1000
    seed: int = 0
    x0: Any = "uniform"  # point (list) or "uniform"


@dataclass
class OutputSection:
    directory: str = "out"
    formats: list = field(default_factory=lambda: ["csv", "json"])
    per_path: bool = False
    increments: bool = False  # debug: dump every Brownian increment (simulate only)


@dataclass
class RefineSection:
    R: int = 64
    max_steps: int | None = None


@dataclass
class StudySection:
    quantity: str = "dynamical"
    p_list: list = field(default_factory=lambda: [1, 2])
    functional: str = "dw_sq"
    eps_list: list | None = None  # plateau variant of rate-study


@dataclass
class TrainSection:
    width: int = 16
    batch_paths: int = 256
    iterations: int = 2000
    learning_rate: float = 0.2
    decay: float = 0.99885
    gradient_mode: str = "forward_sensitivity"
    fd_step: float = 1e-5
    eval_every: int = 200
    init_scale: float = 1.0
    fixed_dataset: bool = False


@dataclass
class ValidateSection:
    n_samples: int = 256


@dataclass
class VerifySection:
    scale: str = "full"
    criteria: list = field(default_factory=lambda: list(range(1, 13)))


@dataclass
class ExperimentConfig:
    command: str
    version: int = SCHEMA_VERSION
    problem: ProblemSection = field(default_factory=ProblemSection)
    candidate: CandidateSection = field(default_factory=CandidateSection)
    weight: dict = field(default_factory=lambda: {"type": "unit"})
    grid: GridSection = field(default_factory=GridSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    output: OutputSection = field(default_factory=OutputSection)
    refine: RefineSection = field(default_factory=RefineSection)
    study: StudySection = field(default_factory=StudySection)
    train: TrainSection = field(default_factory=TrainSection)
    validate: ValidateSection = field(default_factory=ValidateSection)
    verify: VerifySection = field(default_factory=VerifySection)
    chunk_size: int = 16384

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


def _build(cls, doc, where: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = fields[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _require(cond, field_name, msg):
    if not cond:
        raise ConfigError(f"{field_name}: {msg}")


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def check(cfg: ExperimentConfig) -> ExperimentConfig:
    _require(cfg.version == SCHEMA_VERSION, "version", f"unsupported schema version {cfg.version!r}")
    _require(cfg.command in COMMANDS, "command", f"must be one of {COMMANDS}")
    s = cfg.sampling
    _require(isinstance(s.n_paths, int) and s.n_paths >= 2, "sampling.n_paths", "integer >= 2 required")
    _require(isinstance(s.seed, int) and s.seed >= 0, "sampling.seed", "non-negative integer required")
    _require(s.x0 == "uniform" or (isinstance(s.x0, list) and all(_is_num(v) for v in s.x0)),
             "sampling.x0", "a list of coordinates or 'uniform'")
    g = cfg.grid
    if g.h is not None:
        _require(_is_num(g.h) and 0 < g.h < 1, "grid.h", "must lie in (0, 1)")
    if g.h_list is not None:
        _require(isinstance(g.h_list, list) and all(_is_num(v) and 0 < v < 1 for v in g.h_list),
                 "grid.h_list", "list of stepsizes in (0, 1)")
    _require(cfg.candidate.kind in ("exact", "file", "perturbed", "zero"), "candidate.kind",
             "one of exact, file, perturbed, zero")
    if cfg.candidate.kind == "file":
        _require(bool(cfg.candidate.file), "candidate.file", "path required for kind=file")
    _require(isinstance(cfg.refine.R, int) and cfg.refine.R >= 2 and cfg.refine.R & (cfg.refine.R - 1) == 0,
             "refine.R", "power of two >= 2 required")
    _require(cfg.verify.scale in ("full", "quick"), "verify.scale", "'full' or 'quick'")
    _require(isinstance(cfg.chunk_size, int) and cfg.chunk_size >= 1, "chunk_size", "positive integer")
    _require(isinstance(cfg.weight, dict) and "type" in cfg.weight, "weight", "mapping with a 'type'")
    return cfg


def parse(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a mapping")
    _require("command" in doc, "command", "missing")
    return check(_build(ExperimentConfig, doc, ""))


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from None
    return parse(doc)
