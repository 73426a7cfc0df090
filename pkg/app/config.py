"""
Configuration for the torus flow lab.

Two layers:
- ``Settings``: artifact-wide constants and invariant tolerances. Only
  constructor arguments are read; environment variables and dotenv files
  are ignored so that a run is fixed by its config file alone.
- ``RunConfig``: one experiment, loaded from a YAML file.
"""
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.exceptions import ConfigError


class Settings(BaseSettings):
    """Artifact-wide settings."""

    model_config = SettingsConfigDict(case_sensitive=False)

    # Output
    runs_dir: str = "runs"
    artifact_name: str = "torus-flow-lab"
    version: str = "0.1.0"
    log_level: str = "INFO"

    # Verify battery tolerances
    projection_tolerance: float = 1e-11
    psi_identity_tolerance: float = 1e-10
    psi_norm_tolerance: float = 1e-9
    degree_tolerance: float = 1e-7
    chern_weil_tolerance: float = 5e-3
    path_tolerance: float = 1e-6
    slope_tolerance: float = 1e-9

    # Sweep worker processes (joblib n_jobs; -1 uses every core)
    sweep_jobs: int = -1

    # Flow monitors
    monitor_floor: float = 1e-8

    # Verify battery sizes
    verify_metrics: int = 10
    verify_paths: int = 5
    path_nodes: int = 64
    dominance_samples: int = 1000

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings,
                                   dotenv_settings, file_secret_settings):
        return (init_settings,)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeometryConfig(_Section):
    tau: Tuple[float, float] = (0.0, 1.0)
    n_grid: int = 64

    @field_validator("tau", mode="before")
    @classmethod
    def _parse_tau(cls, value: Any):
        if isinstance(value, dict):
            return (value.get("re", 0.0), value.get("im", 0.0))
        if isinstance(value, str):
            value = complex(value.replace(" ", "").replace("i", "j"))
        if isinstance(value, (int, float, complex)):
            value = complex(value)
            return (value.real, value.imag)
        return value

    @field_validator("tau")
    @classmethod
    def _check_tau(cls, value: Tuple[float, float]):
        if value[1] <= 0:
            raise ValueError("Im tau must be positive")
        return value

    @field_validator("n_grid")
    @classmethod
    def _check_grid(cls, value: int):
        if value % 2 != 0:
            raise ValueError("n_grid must be even")
        if value < 16:
            raise ValueError("n_grid must be at least 16")
        return value

    @property
    def tau_complex(self) -> complex:
        return complex(self.tau[0], self.tau[1])


class BundleConfig(_Section):
    degrees: List[int]
    cocycle: str = "none"
    amplitude: float = 1.0

    @field_validator("degrees")
    @classmethod
    def _check_degrees(cls, value: List[int]):
        if not value:
            raise ValueError("degrees must not be empty")
        if any(a < b for a, b in zip(value, value[1:])):
            raise ValueError("degrees must be block-sorted non-increasing")
        return value

    @field_validator("cocycle")
    @classmethod
    def _check_cocycle(cls, value: str):
        if value not in ("none", "theta"):
            raise ValueError(f"unknown cocycle generator: {value}")
        return value


class FlowConfig(_Section):
    dt: float = Field(default=1e-3, gt=0)
    t_end: float = Field(default=50.0, gt=0)
    epsilon: float = Field(default=1e-4, gt=0)
    sample_every: int = Field(default=10, ge=1)


class PerturbationConfig(_Section):
    seed: int = 0
    magnitude: float = Field(default=0.0, ge=0)


class OutputConfig(_Section):
    directory: str = "runs/default"


class SweepConfig(_Section):
    amplitudes: Optional[List[float]] = None


class RunConfig(_Section):
    """A complete experiment."""

    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    bundle: BundleConfig
    flow: FlowConfig = Field(default_factory=FlowConfig)
    perturbation: PerturbationConfig = Field(default_factory=PerturbationConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for error in exc.errors():
        loc = ".".join(str(part) for part in error["loc"])
        message = error["msg"]
        if error["type"] == "extra_forbidden":
            message = f"unknown key '{error['loc'][-1]}'"
        elif error["type"] == "missing":
            message = "required key is missing"
        lines.append(f"{loc}: {message}" if loc else message)
    return "; ".join(lines)


def build_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a raw mapping into a RunConfig, raising ConfigError with key paths."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from exc


def load_config_data(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from exc
    return data if data is not None else {}


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Apply KEY=VALUE overrides with dotted keys, e.g. ``flow.dt=5e-4``.
    Values are parsed as YAML scalars or lists.
    """
    result = dict(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like KEY=VALUE: {item}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override key is malformed: {key}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{key}: override value is not valid YAML") from exc

        node = result
        for part in parts[:-1]:
            child = node.get(part)
            child = dict(child) if isinstance(child, dict) else {}
            node[part] = child
            node = child
        node[parts[-1]] = value
    return result


def parse_config(path: str, overrides: Sequence[str] = ()) -> RunConfig:
    """Load, override and validate a run config file."""
    data = load_config_data(path)
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return build_config(apply_overrides(data, overrides))


# Global settings instance
settings = Settings()
