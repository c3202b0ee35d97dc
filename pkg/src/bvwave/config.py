"""Project paths and the typed run configuration (YAML)."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigurationError
from .mesh_fem import MAX_LEVEL, MIN_LEVEL
from .pdap import PdapSettings, SubproblemSettings
from .wave_solver import SchemeParams

logger = logging.getLogger(__name__)


def _resolve_repo_root() -> Path:
    """Return the repository root based on this file location."""
    current = Path(__file__).resolve()
    for parent in current.parents:
        if (parent / "configs").is_dir() and (parent / "requirements.txt").exists():
            return parent
    # src/bvwave/config.py -> repository two levels up
    return current.parents[2]


REPO_ROOT: Path = _resolve_repo_root()
CONFIG_DIR: Path = REPO_ROOT / "configs"
DEFAULT_CONFIG_PATH: Path = CONFIG_DIR / "reference.yml"
OUTPUT_DIR: Path = REPO_ROOT / "output"

COMMANDS = ("solve", "pdap", "convergence")
SOLVE_SCENARIOS = ("zero", "standing_wave", "reference", "random")
PDAP_SCENARIOS = ("reference", "zero")


def ensure_directories(base: Path) -> dict[str, Path]:
    """Create one output folder per command below base."""
    paths = {command: base / command for command in COMMANDS}
    for path in paths.values():
        path.mkdir(parents=True, exist_ok=True)
    return paths


@dataclass(frozen=True)
class DiscretizationConfig:
    level: int = 5
    levels: tuple[int, ...] = (3, 4, 5, 6)
    k_ref: int = 7
    k_ref_time: int | None = None
    sigma: float = 0.25
    epsilon0: float = 0.5
    c2: float = 1.0
    final_time: float = 2.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(self.levels))
        for k in (self.level, self.k_ref, *self.levels):
            if not MIN_LEVEL <= k <= MAX_LEVEL:
                raise ConfigurationError(f"Level {k} outside [{MIN_LEVEL}, {MAX_LEVEL}]")
        if not self.levels:
            raise ConfigurationError("discretization.levels must not be empty")
        if any(b < a for a, b in zip(self.levels, self.levels[1:])):
            raise ConfigurationError(f"discretization.levels must be ascending, got {list(self.levels)}")
        if self.k_ref_time is not None and self.k_ref_time < self.k_ref:
            raise ConfigurationError("discretization.k_ref_time cannot be below k_ref")
        if self.final_time <= 0.0:
            raise ConfigurationError("discretization.final_time must be positive")
        self.scheme()

    def scheme(self) -> SchemeParams:
        return SchemeParams(sigma=self.sigma, epsilon0=self.epsilon0, c2=self.c2)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "reference"
    phi: str = "corrected"
    alpha: float = 6e-3

    def __post_init__(self) -> None:
        if self.name not in SOLVE_SCENARIOS:
            raise ConfigurationError(f"Unknown scenario {self.name!r}; expected one of {SOLVE_SCENARIOS}")
        if self.phi not in ("corrected", "printed"):
            raise ConfigurationError(f"scenario.phi must be 'corrected' or 'printed', got {self.phi!r}")
        if self.alpha <= 0.0:
            raise ConfigurationError("scenario.alpha must be positive")


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "output"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ConfigurationError("output.seed must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    command: str = "convergence"
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    pdap: PdapSettings = field(default_factory=PdapSettings)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigurationError(f"Unknown command {self.command!r}; expected one of {COMMANDS}")

    @property
    def output_dir(self) -> Path:
        return Path(self.output.directory)

    def to_dict(self) -> dict:
        data = asdict(self)
        subproblem = data["pdap"].pop("subproblem")
        data["subproblem"] = subproblem
        data["discretization"]["levels"] = list(self.discretization.levels)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigurationError("Configuration must be a mapping of sections")
        known = {"command", "discretization", "scenario", "pdap", "subproblem", "output"}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown configuration sections: {sorted(unknown)}")
        command = data.get("command", "convergence")
        if not isinstance(command, str):
            raise ConfigurationError("command must be a string")
        subproblem = _build_section(SubproblemSettings, data.get("subproblem"), "subproblem")
        return cls(
            command=command,
            discretization=_build_section(DiscretizationConfig, data.get("discretization"), "discretization"),
            scenario=_build_section(ScenarioConfig, data.get("scenario"), "scenario"),
            pdap=_build_section(PdapSettings, data.get("pdap"), "pdap", subproblem=subproblem),
            output=_build_section(OutputConfig, data.get("output"), "output"),
        )

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Apply CLI-style overrides; None values are ignored."""
        overrides = {k: v for k, v in overrides.items() if v is not None}
        discretization = {k: overrides[k] for k in ("level", "levels", "k_ref", "sigma") if k in overrides}
        output = {k: overrides[k] for k in ("directory", "seed") if k in overrides}
        scenario = {k: overrides[k] for k in ("phi", "name") if k in overrides}
        config = self
        if "command" in overrides:
            config = replace(config, command=overrides["command"])
        if discretization:
            levels = discretization.get("levels", config.discretization.levels)
            if "levels" in discretization and "k_ref" not in discretization and config.discretization.k_ref <= max(levels):
                discretization["k_ref"] = max(levels) + 1
            config = replace(config, discretization=replace(config.discretization, **discretization))
        if scenario:
            config = replace(config, scenario=replace(config.scenario, **scenario))
        if output:
            config = replace(config, output=replace(config.output, **output))
        return config


def _coerce(value: Any, annotation: str, where: str) -> Any:
    if annotation == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer, got {value!r}")
        return value
    if annotation == "float":
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot ("1e-9") as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number, got {value!r}")
        return float(value)
    if annotation == "str":
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string, got {value!r}")
        return value
    if annotation == "int | None":
        return None if value is None else _coerce(value, "int", where)
    if annotation == "tuple[int, ...]":
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where} must be a list of integers")
        return tuple(_coerce(v, "int", where) for v in value)
    raise ConfigurationError(f"Unsupported field type {annotation} for {where}")


def _build_section(cls: type, raw: Any, name: str, **extra: Any) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigurationError(f"Section {name!r} must be a mapping")
    specs = {f.name: f for f in fields(cls) if f.name not in extra}
    unknown = set(raw) - set(specs)
    if unknown:
        raise ConfigurationError(f"Unknown keys in section {name!r}: {sorted(unknown)}")
    values = {key: _coerce(value, str(specs[key].type), f"{name}.{key}") for key, value in raw.items()}
    return cls(**values, **extra)


def load_config(path: Path) -> RunConfig:
    if not path.exists():
        raise FileNotFoundError(f"Configuration file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"Invalid YAML in {path}: {exc}") from exc
    config = RunConfig.from_dict(raw or {})
    logger.debug("Loaded configuration from %s", path)
    return config


def dump_config(config: RunConfig, path: Path | None = None) -> str:
    text = yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=None)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    return text


__all__ = [
    "COMMANDS",
    "CONFIG_DIR",
    "DEFAULT_CONFIG_PATH",
    "DiscretizationConfig",
    "OUTPUT_DIR",
    "OutputConfig",
    "PDAP_SCENARIOS",
    "REPO_ROOT",
    "RunConfig",
    "SOLVE_SCENARIOS",
    "ScenarioConfig",
    "dump_config",
    "ensure_directories",
    "load_config",
]
