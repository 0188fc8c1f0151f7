"""
Run configuration: a YAML file validated against a strict schema.

Unknown keys are rejected. The effective configuration, with defaults
filled in, is what gets embedded in every output artifact.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigurationError
from .kernels import BUILTIN_KERNELS
from .solver import SolverOptions

__all__ = ["RunConfig", "load_config", "parse_config"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSpec(_Strict):
    name: Literal["mean", "mean-variance", "linear-iv"]
    params: dict[str, Any] = Field(default_factory=dict)
    bounds: Optional[list[list[float]]] = None


class DataSpec(_Strict):
    csv: Optional[str] = None
    header: Optional[bool] = None
    columns: Optional[Union[list[Union[int, str]], dict[str, Union[int, str, list[Union[int, str]]]]]] = None


class GeneratorSpec(_Strict):
    name: Literal["normal", "linear-iv"]
    params: dict[str, Any] = Field(default_factory=dict)


class SolverSpec(_Strict):
    inner_tol: float = SolverOptions.inner_tol
    max_inner_iter: int = SolverOptions.max_inner_iter
    armijo: float = SolverOptions.armijo
    backtrack: float = SolverOptions.backtrack
    value_cap: float = SolverOptions.value_cap
    escape_radius: float = SolverOptions.escape_radius
    grid_points: int = Field(SolverOptions.grid_points, ge=1)
    outer_tol: float = SolverOptions.outer_tol
    step_tol: float = SolverOptions.step_tol
    max_outer_iter: int = SolverOptions.max_outer_iter
    value_tol: float = SolverOptions.value_tol

    def options(self) -> SolverOptions:
        return SolverOptions(**self.model_dump())


def _positive(v: int) -> int:
    if v < 1:
        raise ValueError("replications must be positive")
    return v


class SimulateSpec(_Strict):
    kernels: list[str] = Field(default_factory=lambda: list(BUILTIN_KERNELS))
    n_grid: list[int] = Field(default_factory=lambda: [100])
    replications: int = 100

    _check_reps = field_validator("replications")(_positive)


class PerturbationSpec(_Strict):
    kind: Literal["additive", "oscillatory"] = "additive"
    scale: float = 1.0
    direction: Optional[list[float]] = None


class RobustnessSpec(_Strict):
    rate: str
    sample_sizes: list[int] = Field(default_factory=lambda: [400])
    m_grid: list[int] = Field(default_factory=lambda: [4, 8, 16, 32, 64, 128, 256, 512])
    replications: int = 50
    perturbation: PerturbationSpec = Field(default_factory=PerturbationSpec)
    schedules: dict[str, str] = Field(default_factory=dict)

    _check_reps = field_validator("replications")(_positive)


class OutputSpec(_Strict):
    dir: str = "memgel-out"


class RunConfig(_Strict):
    model: ModelSpec
    kernel: str = "exponential-EL"
    seed: int = 0
    data: DataSpec = Field(default_factory=DataSpec)
    generator: Optional[GeneratorSpec] = None
    solver: SolverSpec = Field(default_factory=SolverSpec)
    simulate: Optional[SimulateSpec] = None
    robustness: Optional[RobustnessSpec] = None
    output: OutputSpec = Field(default_factory=OutputSpec)

    @field_validator("kernel")
    @classmethod
    def _known_kernel(cls, v):
        if v not in BUILTIN_KERNELS:
            raise ValueError(f"unknown kernel {v!r}; expected one of {sorted(BUILTIN_KERNELS)}")
        return v

    def effective(self) -> dict:
        # the output location does not affect results, so it is not echoed
        return self.model_dump(mode="json", exclude={"output"})


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        if err["type"] == "missing":
            parts.append(f"missing required key {loc!r}")
        elif err["type"] == "extra_forbidden":
            parts.append(f"unknown key {loc!r}")
        else:
            msg = err["msg"].removeprefix("Value error, ")
            parts.append(f"{loc}: {msg}")
    return "invalid configuration: " + "; ".join(parts)


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigurationError("configuration must be a mapping")
    if "config" in doc and "version" in doc:
        # an output artifact: re-run from its embedded configuration
        doc = doc["config"]
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigurationError(_format_error(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from None
    return parse_config(doc or {})
