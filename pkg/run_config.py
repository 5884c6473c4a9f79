"""
Run configuration: typed hyperparameter models and layered option resolution.

Every long flag of the CLI is described once in OPTIONS. The same table
drives argparse, `key=value` config files and `DGMIL_*` environment
variables, so the three layers always agree on names and types.

Precedence: command-line flag > config file > environment / .env > default.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ConfigError

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = "0.1.0"
MODES = ("reproducible", "fast")
ENV_PREFIX = "DGMIL_"

M = TypeVar("M", bound=BaseModel)


def derive_seed(seed: int, *key: int) -> int:
    """64-bit child seed for the sub-stream identified by `key`."""
    state = np.random.SeedSequence(seed, spawn_key=tuple(key)).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def build_config(model_cls: Type[M], values: Mapping[str, Any]) -> M:
    """Instantiate a pydantic config, turning validation failures into ConfigError."""
    try:
        return model_cls(**values)
    except ValidationError as exc:
        problems = []
        for error in exc.errors():
            where = ".".join(str(part) for part in error["loc"]).replace("_", "-")
            problems.append(f"--{where}: {error['msg']}" if where else error["msg"])
        raise ConfigError(f"invalid {model_cls.__name__}: " + "; ".join(problems)) from exc


class TrainingConfig(BaseModel):
    """Head-training hyperparameters (Adam with cosine decay, early stop)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(200, ge=1)
    lr: float = Field(0.01, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    patience: int = Field(10, ge=1)
    min_delta: float = Field(1e-4, ge=0)
    batch_size: Optional[int] = Field(None, ge=1)


class RefinementConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    clusters: int = Field(10, ge=1)
    ratio: float = Field(0.10, gt=0, le=0.5)
    max_rounds: int = Field(20, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)
    mode: Literal["reproducible", "fast"] = "reproducible"
    training: TrainingConfig = TrainingConfig()

    @field_validator("ratio")
    @classmethod
    def _finite_ratio(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("ratio must be finite")
        return value


# ---------------------------------------------------------------------------
# Option table


def parse_bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def parse_optional_int(text: str) -> Optional[int]:
    if str(text).strip().lower() in ("", "none", "full"):
        return None
    return int(text)


def parse_mode(text: str) -> str:
    if text not in MODES:
        raise ValueError(f"mode must be one of {', '.join(MODES)}")
    return text


@dataclass(frozen=True)
class Option:
    """One long flag, usable from the command line, a config file or the environment."""

    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    commands: Tuple[str, ...]

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")

    @property
    def env_var(self) -> str:
        return ENV_PREFIX + self.dest.upper()

    @property
    def is_flag(self) -> bool:
        return self.parse is parse_bool


ALL = ("generate", "train", "eval", "ablate")
TRAINING = ("train", "ablate")

OPTIONS: List[Option] = [
    Option("seed", int, 0, "root RNG seed", ALL),
    Option("mode", parse_mode, "reproducible", "reproducible (bitwise repeatable) or fast (threaded)", ALL),
    # paths
    Option("out", str, None, "output file or directory", ALL),
    Option("train", str, None, "training feature file (DGMF or CSV)", TRAINING),
    Option("test", str, None, "test feature file (DGMF or CSV)", ("eval", "ablate")),
    Option("bundle", str, None, "model bundle written by train", ("eval",)),
    Option("round-log", str, None, "JSON-lines round log (default: <out>.rounds.jsonl)", ("train",)),
    Option("curves", str, None, "write ROC/FROC curve points to this CSV", ("eval",)),
    Option("plot", str, None, "write a PNG figure to this path", ("eval", "ablate")),
    # refinement / training
    Option("clusters", int, 10, "K-means cluster count M", TRAINING),
    Option("ratio", float, 0.10, "extreme-instance ratio q in (0, 0.5]", TRAINING),
    Option("max-rounds", int, 20, "maximum refinement rounds", TRAINING),
    Option("epochs", int, 200, "head-training epochs", TRAINING),
    Option("lr", float, 0.01, "initial Adam learning rate", TRAINING),
    Option("batch-size", parse_optional_int, None, "minibatch size (default: full batch)", TRAINING),
    Option("patience", int, 10, "epochs of stalled loss before early stop", TRAINING),
    Option("min-delta", float, 1e-4, "loss decrease counted as progress", TRAINING),
    # ablation
    Option("axis", str, "ratio", "sweep axis: ratio, clusters or strategy", ("ablate",)),
    Option("values", str, None, "comma-separated grid values (default: the axis' standard grid)", ("ablate",)),
    Option("strategy", str, "dgmil", "strategy run in every cell of a ratio/clusters sweep", ("ablate",)),
    Option("jobs", int, 1, "grid cells run concurrently", ("ablate",)),
    # synthetic data
    Option("d", int, 32, "feature dimension before distractors", ("generate",)),
    Option("g", int, 10, "negative phenotype count", ("generate",)),
    Option("n-neg-bags", int, 50, "negative training bags", ("generate",)),
    Option("n-pos-bags", int, 50, "positive training bags", ("generate",)),
    Option("n-test-neg-bags", parse_optional_int, None, "negative test bags (default: n-neg-bags)", ("generate",)),
    Option("n-test-pos-bags", parse_optional_int, None, "positive test bags (default: n-pos-bags)", ("generate",)),
    Option("bag-size", int, 200, "instances per bag", ("generate",)),
    Option("witness-rate", float, 0.05, "fraction of positive instances in a positive bag", ("generate",)),
    Option("separation", float, 8.0, "positive displacement in average-sigma units", ("generate",)),
    Option("phenotype-spread", float, 10.0, "radius of the phenotype-mean sphere in average-sigma units",
           ("generate",)),
    Option("entangle", parse_bool, False, "mix features through a random ill-conditioned matrix", ("generate",)),
    Option("distractor-dims", int, 0, "pure-noise dimensions appended", ("generate",)),
    Option("csv", parse_bool, False, "also write train.csv / test.csv", ("generate",)),
]

OPTIONS_BY_NAME: Dict[str, Option] = {option.name: option for option in OPTIONS}


def options_for(command: str) -> List[Option]:
    return [option for option in OPTIONS if command in option.commands]


def _convert(option: Option, raw: str, source: str) -> Any:
    try:
        return option.parse(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{source}: bad value {raw!r} for {option.name} ({exc})") from exc


def read_config_file(path: str) -> Dict[str, str]:
    """Parse a flat `key=value` file; `#` starts a comment."""
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config file {path} is not UTF-8 text (byte {exc.start})") from exc

    entries: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lstrip("-")
        if key not in OPTIONS_BY_NAME:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        entries[key] = value
    return entries


class RunConfig(BaseModel):
    """Fully resolved options for one subcommand; embedded in every primary output."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    command: str
    version: str = ARTIFACT_VERSION
    options: Dict[str, Any]

    def __getitem__(self, name: str) -> Any:
        return self.options[name.replace("-", "_")]

    @property
    def seed(self) -> int:
        return self.options["seed"]

    @property
    def mode(self) -> str:
        return self.options["mode"]

    def to_record(self) -> Dict[str, Any]:
        return self.model_dump()

    def training_config(self) -> TrainingConfig:
        return build_config(TrainingConfig, {
            "epochs": self["epochs"],
            "lr": self["lr"],
            "batch_size": self["batch_size"],
            "patience": self["patience"],
            "min_delta": self["min_delta"],
        })

    def refinement_config(self) -> RefinementConfig:
        return build_config(RefinementConfig, {
            "clusters": self["clusters"],
            "ratio": self["ratio"],
            "max_rounds": self["max_rounds"],
            "seed": self.seed,
            "mode": self.mode,
            "training": self.training_config(),
        })

    def pick(self, names: Sequence[str]) -> Dict[str, Any]:
        return {name: self.options[name] for name in names}


def resolve_run_config(command: str, given: Mapping[str, Any], config_path: Optional[str] = None,
                       environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Merge defaults, environment, config file and explicit flags for `command`."""
    options = options_for(command)
    values: Dict[str, Any] = {option.dest: option.default for option in options}

    for option in options:
        if environ and option.env_var in environ:
            values[option.dest] = _convert(option, environ[option.env_var], option.env_var)

    if config_path:
        for key, raw in read_config_file(config_path).items():
            option = OPTIONS_BY_NAME[key]
            if command not in option.commands:
                logger.debug("config key %s does not apply to %s; ignored", key, command)
                continue
            values[option.dest] = _convert(option, raw, f"config file {config_path}")

    for option in options:
        if option.dest in given:
            values[option.dest] = given[option.dest]

    if values["seed"] < 0 or values["seed"] >= 2**64:
        raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {values['seed']}")
    return RunConfig(command=command, options=dict(sorted(values.items())))
