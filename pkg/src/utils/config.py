"""
Experiment Configuration — Flat `key = value` Files into Typed Dataclasses.

File format (parsed with python-dotenv):

    # comments start with '#'
    sim.n = 1000
    sim.scheme = LS
    model.hidden_width = 221
    train.gamma_wd = 0.01
    sweep.gamma_wd = 0, 0.01, 1
    search.lr = 1e-3, 1e-4

The prefix before the first dot selects the section:
  sim.*     → SimConfig
  model.*   → HyperParams (architecture, grid, interpolation)
  train.*   → HyperParams (optimization, objective, weights)
  split.*   → train/val/test fractions
  sweep.*   → SweepConfig
  search.*  → SearchSpace (budget, seed, and one candidate list per hyperparameter)
  theory.*  → TheoryConfig
  paths.*   → input files (dataset, truth, checkpoint, covariates)
  run.*     → master seed, output directory, log level

Values are coerced from the dataclass annotations. Any unknown key or value
that fails coercion/validation raises ConfigError with the key and its line.
"""
from __future__ import annotations

import dataclasses
import logging
import os
import re
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

from dotenv import dotenv_values, load_dotenv

from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)

ENV_LOG_LEVEL = "SURVCAUS_LOG_LEVEL"
ENV_OUT_DIR = "SURVCAUS_OUT_DIR"


class Scheme(str, Enum):
    LS = "LS"
    NLS = "NLS"


class Assignment(str, Enum):
    INDEX_BASED = "index_based"
    LOGISTIC = "logistic"


class GridType(str, Enum):
    KM = "km"
    EQUIDISTANT = "equidistant"


class WeightMode(str, Enum):
    UNIFORM = "uniform"
    PROPENSITY = "propensity"
    LEARNED = "learned"


class EarlyStopMetric(str, Enum):
    OBJECTIVE = "objective"
    NLL = "nll"


class CensoredTail(str, Enum):
    ZERO = "zero"          # censored row beyond τ_m contributes 0
    INCLUDE = "include"    # use the beyond-horizon mass probs[m+1]


class Interpolation(str, Enum):
    STEP = "step"
    LINEAR = "linear"


DEFAULT_EPSILON = {Scheme.LS: 0.8, Scheme.NLS: 1.8}


def _section(name: str, **kwargs) -> Any:
    return field(metadata={"section": name}, **kwargs)


# ── Sections ──────────────────────────────────────────────────────────────────

@dataclass
class SimConfig:
    n: int = 1000
    p: int = 25
    rho: float = 0.1
    p_wd: float = 4.0
    scheme: Scheme = Scheme.LS
    alpha: float = 2.0
    lam: float = 1.0
    epsilon: Optional[float] = None
    censor_target: float = 0.30
    assignment: Assignment = Assignment.INDEX_BASED
    active_covariates: Optional[int] = None
    standardize_covariates: bool = True
    tau_quantile: float = 0.95
    seed: int = 0

    @property
    def effective_epsilon(self) -> float:
        return DEFAULT_EPSILON[Scheme(self.scheme)] if self.epsilon is None else float(self.epsilon)

    def validate(self) -> "SimConfig":
        if self.n < 10:
            raise ConfigError(f"must be >= 10, got {self.n}", key="sim.n")
        if self.p < 2:
            raise ConfigError(f"must be >= 2, got {self.p}", key="sim.p")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"must be in [0, 1), got {self.rho}", key="sim.rho")
        if self.p_wd < 0:
            raise ConfigError(f"must be >= 0, got {self.p_wd}", key="sim.p_wd")
        if self.alpha <= 0:
            raise ConfigError(f"must be > 0, got {self.alpha}", key="sim.alpha")
        if self.lam <= 0:
            raise ConfigError(f"must be > 0, got {self.lam}", key="sim.lambda")
        if not 0.0 < self.censor_target < 1.0:
            raise ConfigError(f"must be in (0, 1), got {self.censor_target}", key="sim.censor_target")
        if self.active_covariates is not None and not 1 <= self.active_covariates <= self.p:
            raise ConfigError(f"must be in 1..p, got {self.active_covariates}", key="sim.active_covariates")
        if not 0.0 < self.tau_quantile < 1.0:
            raise ConfigError(f"must be in (0, 1), got {self.tau_quantile}", key="sim.tau_quantile")
        return self


@dataclass
class HyperParams:
    # model.*
    n_durations: int = _section("model", default=20)
    grid_type: GridType = _section("model", default=GridType.KM)
    horizon_quantile: float = _section("model", default=0.95)
    phi_depth: int = _section("model", default=2)
    psi_depth: int = _section("model", default=2)
    hidden_width: int = _section("model", default=221)
    embed_dim: Optional[int] = _section("model", default=None)
    interpolation: Interpolation = _section("model", default=Interpolation.LINEAR)
    # train.*
    lr: float = _section("train", default=1e-3)
    batch_size: int = _section("train", default=256)
    max_epochs: int = _section("train", default=100)
    patience: int = _section("train", default=10)
    min_improvement: float = _section("train", default=1e-5)
    lambda_r: float = _section("train", default=1e-3)
    lambda_w: float = _section("train", default=0.0)
    gamma_wd: float = _section("train", default=0.0)
    sinkhorn_eps: Optional[float] = _section("train", default=None)
    sinkhorn_eps_scale: float = _section("train", default=0.05)
    sinkhorn_max_iter: int = _section("train", default=200)
    sinkhorn_tol: float = _section("train", default=1e-6)
    weight_mode: WeightMode = _section("train", default=WeightMode.PROPENSITY)
    early_stop_metric: EarlyStopMetric = _section("train", default=EarlyStopMetric.OBJECTIVE)
    censored_tail: CensoredTail = _section("train", default=CensoredTail.ZERO)
    clip_norm: float = _section("train", default=10.0)
    max_retries: int = _section("train", default=2)
    record_seconds: bool = _section("train", default=False)
    seed: int = _section("train", default=0)

    @property
    def z_dim(self) -> int:
        return self.hidden_width if self.embed_dim is None else self.embed_dim

    def replace(self, **changes) -> "HyperParams":
        return dataclasses.replace(self, **changes).validate()

    def as_dict(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in data:
                kwargs[f.name] = _coerce(data[f.name], hints[f.name], f.name)
        return cls(**kwargs).validate()

    def validate(self) -> "HyperParams":
        positive_ints = ("n_durations", "hidden_width", "batch_size", "max_epochs",
                         "sinkhorn_max_iter", "max_retries")
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, name)}", key=_key_of(name))
        if self.n_durations < 2:
            raise ConfigError(f"must be >= 2, got {self.n_durations}", key="model.n_durations")
        if self.phi_depth < 1 or self.psi_depth < 0:
            raise ConfigError("phi_depth must be >= 1 and psi_depth >= 0", key="model.phi_depth")
        if self.embed_dim is not None and self.embed_dim < 1:
            raise ConfigError(f"must be >= 1, got {self.embed_dim}", key="model.embed_dim")
        try:
            self.interpolation = Interpolation(self.interpolation)
        except ValueError:
            raise ConfigError(f"must be step or linear, got {self.interpolation!r}", key="model.interpolation")
        if not 0.0 < self.horizon_quantile <= 1.0:
            raise ConfigError(f"must be in (0, 1], got {self.horizon_quantile}", key="model.horizon_quantile")
        if self.lr <= 0:
            raise ConfigError(f"must be > 0, got {self.lr}", key="train.lr")
        if self.patience < 0:
            raise ConfigError(f"must be >= 0, got {self.patience}", key="train.patience")
        for name in ("lambda_r", "lambda_w", "gamma_wd", "min_improvement"):
            if getattr(self, name) < 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)}", key=_key_of(name))
        if self.sinkhorn_eps is not None and self.sinkhorn_eps <= 0:
            raise ConfigError(f"must be > 0, got {self.sinkhorn_eps}", key="train.sinkhorn_eps")
        if self.sinkhorn_eps_scale <= 0 or self.sinkhorn_tol <= 0 or self.clip_norm <= 0:
            raise ConfigError("sinkhorn_eps_scale, sinkhorn_tol and clip_norm must be > 0",
                              key="train.sinkhorn_eps_scale")
        return self


@dataclass
class SweepConfig:
    gamma_wd: tuple[float, ...] = (0.0,)
    p_wd: tuple[float, ...] = ()
    replicates: int = 1
    workers: int = 1
    ablation: bool = True
    seed: int = 0

    def validate(self) -> "SweepConfig":
        if not self.gamma_wd or any(g < 0 for g in self.gamma_wd):
            raise ConfigError("needs at least one value, all >= 0", key="sweep.gamma_wd")
        if any(p < 0 for p in self.p_wd):
            raise ConfigError("values must be >= 0", key="sweep.p_wd")
        if self.replicates < 1:
            raise ConfigError(f"must be >= 1, got {self.replicates}", key="sweep.replicates")
        if self.workers < 1:
            raise ConfigError(f"must be >= 1, got {self.workers}", key="sweep.workers")
        return self


@dataclass
class SearchSpace:
    """Discrete candidate lists keyed by HyperParams field name."""
    budget: int = 10
    seed: int = 0
    candidates: dict[str, tuple] = field(default_factory=dict)

    def validate(self) -> "SearchSpace":
        if self.budget < 1:
            raise ConfigError(f"must be >= 1, got {self.budget}", key="search.budget")
        for name, values in self.candidates.items():
            if not values:
                raise ConfigError("candidate list is empty", key=f"search.{name}")
        return self


@dataclass
class TheoryConfig:
    n_pairs: int = 100
    n_x: int = 200
    n_pinsker_pairs: int = 500
    cells: int = 2000
    perturbation: float = 0.5
    tolerance: float = 1e-6
    seed: int = 0

    def validate(self) -> "TheoryConfig":
        for name in ("n_pairs", "n_x", "n_pinsker_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", key=f"theory.{name}")
        if self.cells < 10:
            raise ConfigError(f"must be >= 10, got {self.cells}", key="theory.cells")
        if self.perturbation < 0:
            raise ConfigError(f"must be >= 0, got {self.perturbation}", key="theory.perturbation")
        return self


@dataclass
class PathsConfig:
    dataset: Optional[str] = None
    truth: Optional[str] = None
    checkpoint: Optional[str] = None
    covariates: Optional[str] = None


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    hyper: HyperParams = field(default_factory=HyperParams)
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    search: SearchSpace = field(default_factory=SearchSpace)
    theory: TheoryConfig = field(default_factory=TheoryConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    out_dir: str = "runs"
    seed: Optional[int] = None
    log_level: str = "INFO"
    source: Optional[str] = None

    def with_seed(self, seed: int) -> "RunConfig":
        """Apply one master seed to every section."""
        return dataclasses.replace(
            self,
            seed=seed,
            sim=dataclasses.replace(self.sim, seed=seed),
            hyper=dataclasses.replace(self.hyper, seed=seed),
            sweep=dataclasses.replace(self.sweep, seed=seed),
            search=dataclasses.replace(self.search, seed=seed),
            theory=dataclasses.replace(self.theory, seed=seed),
        )

    def with_out_dir(self, out_dir: Union[str, Path]) -> "RunConfig":
        return dataclasses.replace(self, out_dir=str(out_dir))

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        """Paths in a config file are relative to the file's directory."""
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self.source is not None:
            candidate = Path(self.source).parent / p
            if candidate.exists() or not p.exists():
                return candidate
        return p


# ── Coercion ──────────────────────────────────────────────────────────────────

_ALIASES = {"sim.lambda": "sim.lam"}
_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _plain(value: Any) -> Any:
    return value.value if isinstance(value, Enum) else value


def _key_of(name: str) -> str:
    for f in dataclasses.fields(HyperParams):
        if f.name == name:
            return f"{f.metadata['section']}.{name}"
    return name


def _coerce(raw: Any, typ: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)

    if origin is Union:
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("", "none", "auto"):
            return None
        return _coerce(text, inner[0], key)
    if origin is tuple:
        items = [s for s in (part.strip() for part in text.split(",")) if s]
        return tuple(_coerce(item, args[0], key) for item in items)
    if isinstance(typ, type) and issubclass(typ, Enum):
        for member in typ:
            if text.lower() == str(member.value).lower():
                return member
        raise ConfigError(f"expected one of {[m.value for m in typ]}, got {text!r}", key=key)
    if typ is bool:
        if text.lower() in _BOOL_TRUE:
            return True
        if text.lower() in _BOOL_FALSE:
            return False
        raise ConfigError(f"expected a boolean, got {text!r}", key=key)
    if typ is int:
        try:
            value = float(text)
        except ValueError:
            raise ConfigError(f"expected an integer, got {text!r}", key=key)
        if not value.is_integer():
            raise ConfigError(f"expected an integer, got {text!r}", key=key)
        return int(value)
    if typ is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"expected a number, got {text!r}", key=key)
    return text


def _coerce_scalar_list(text: str, key: str) -> tuple:
    """Candidate list whose element type follows the matching HyperParams field."""
    name = key.split(".", 1)[1]
    hints = typing.get_type_hints(HyperParams)
    if name not in hints:
        raise ConfigError("not a hyperparameter", key=key)
    typ = hints[name]
    return tuple(_coerce(item.strip(), typ, key) for item in text.split(",") if item.strip())


def _line_numbers(path: Path) -> dict[str, int]:
    pattern = re.compile(r"^\s*(?:export\s+)?([^=#\s]+)\s*=")
    lines = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        match = pattern.match(line)
        if match:
            lines.setdefault(match.group(1), lineno)
    return lines


def _build_section(cls, values: dict[str, str], prefix_of) -> Any:
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix_of(f)
        if key in values:
            kwargs[f.name] = _coerce(values[key], hints[f.name], key)
    return cls(**kwargs)


def parse_config(values: dict[str, Optional[str]], source: Optional[str] = None,
                 lines: Optional[dict[str, int]] = None) -> RunConfig:
    """Build a RunConfig from flat dotted keys. `lines` maps keys to file lines for errors."""
    lines = lines or {}
    values = {_ALIASES.get(k, k): ("" if v is None else v) for k, v in values.items()}

    known = set()
    for cls, prefix in ((SimConfig, "sim"), (SweepConfig, "sweep"), (TheoryConfig, "theory"),
                        (PathsConfig, "paths")):
        known |= {f"{prefix}.{f.name}" for f in dataclasses.fields(cls)}
    known |= {_key_of(f.name) for f in dataclasses.fields(HyperParams)}
    known |= {"split.fractions", "run.seed", "run.out_dir", "run.log_level",
              "search.budget", "search.seed"}
    hyper_names = {f.name for f in dataclasses.fields(HyperParams)}

    def line_of(key: Optional[str]) -> Optional[int]:
        if key is None:
            return None
        for k, v in lines.items():
            if _ALIASES.get(k, k) == key:
                return v
        return None

    try:
        for key in values:
            if key in known:
                continue
            if key.startswith("search.") and key.split(".", 1)[1] in hyper_names:
                continue
            raise ConfigError("unknown key", key=key)

        sim = _build_section(SimConfig, values, lambda f: f"sim.{f.name}").validate()
        hyper = _build_section(HyperParams, values, lambda f: _key_of(f.name)).validate()
        sweep = _build_section(SweepConfig, values, lambda f: f"sweep.{f.name}").validate()
        theory = _build_section(TheoryConfig, values, lambda f: f"theory.{f.name}").validate()
        paths = _build_section(PathsConfig, values, lambda f: f"paths.{f.name}")

        candidates = {
            key.split(".", 1)[1]: _coerce_scalar_list(text, key)
            for key, text in values.items()
            if key.startswith("search.") and key not in ("search.budget", "search.seed")
        }
        search = SearchSpace(
            budget=_coerce(values.get("search.budget", "10"), int, "search.budget"),
            seed=_coerce(values.get("search.seed", "0"), int, "search.seed"),
            candidates=candidates,
        ).validate()

        fractions = (0.6, 0.2, 0.2)
        if "split.fractions" in values:
            fractions = _coerce(values["split.fractions"], tuple[float, ...], "split.fractions")
            if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
                raise ConfigError(f"need 3 positive fractions summing to 1, got {fractions}",
                                  key="split.fractions")

        config = RunConfig(
            sim=sim, hyper=hyper, split_fractions=tuple(fractions), sweep=sweep, search=search,
            theory=theory, paths=paths,
            out_dir=values.get("run.out_dir") or os.getenv(ENV_OUT_DIR, "runs"),
            log_level=(values.get("run.log_level") or os.getenv(ENV_LOG_LEVEL, "INFO")).upper(),
            source=source,
        )
        if "run.seed" in values:
            config = config.with_seed(_coerce(values["run.seed"], int, "run.seed"))
        return config
    except ConfigError as e:
        if e.line is None and e.key is not None and line_of(e.key) is not None:
            raise ConfigError(str(e).split(f"{e.key}: ", 1)[-1], key=e.key, line=line_of(e.key)) from None
        raise


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Read a config file (or return defaults when `path` is None).

    An optional `.env` in the working directory is loaded first so that
    SURVCAUS_LOG_LEVEL / SURVCAUS_OUT_DIR can supply defaults.
    """
    load_dotenv(override=False)
    if path is None:
        return parse_config({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = dotenv_values(path, interpolate=False, encoding="utf-8")
    logger.debug(f"Loaded {len(values)} keys from {path}")
    return parse_config(dict(values), source=str(path), lines=_line_numbers(path))


def format_hyper(hyper: HyperParams, header: Optional[str] = None) -> str:
    """Render HyperParams as `model.* / train.*` lines that `load_config` reads back."""
    lines = [f"# {header}"] if header else []
    for name, value in hyper.as_dict().items():
        if value is None:
            text = "none"
        elif isinstance(value, bool):
            text = str(value).lower()
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{_key_of(name)} = {text}")
    return "\n".join(lines) + "\n"
