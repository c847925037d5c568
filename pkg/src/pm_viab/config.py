"""Experiment configuration: YAML in, validated objects out."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .drift import STREAMS, build_drift, build_group
from .dynamics import System, system_stable_step
from .model import ControlSet, ModelSpec, make_beta, make_coupling, make_field
from .spatial import GridDomain
from .stabilization import StabilizationConfig
from .viability import CONSTRAINT_KINDS, make_constraint


_C_PATTERN = re.compile(r"^\s*([0-9.eE+-]+)\s*\*\s*(lambda_min|lambda_max)\s*$")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StreamSpec(_Strict):
    name: str = "cellular"
    params: dict[str, float] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in STREAMS:
            raise ValueError(f"unknown stream function {v!r}; known: {sorted(STREAMS)}")
        return v


class BetaSpec(_Strict):
    kind: Literal["linear", "sine", "saturated_power", "zero"] = "sine"
    params: dict[str, float] = Field(default_factory=dict)


class CouplingSpec(_Strict):
    family: Literal["zero", "decay", "affine", "feedback"] = "zero"
    params: dict[str, Any] = Field(default_factory=dict)


class ConstraintSpec(_Strict):
    kind: str = "whole-space"
    params: dict[str, float] = Field(default_factory=dict)

    @field_validator("kind")
    @classmethod
    def _known(cls, v):
        if v not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind {v!r}; known: {list(CONSTRAINT_KINDS)}")
        return v


class ExperimentConfig(_Strict):
    """One experiment.  ``grid_n_y: null`` makes the second component a scalar."""

    grid_n: int = Field(15, ge=2)
    grid_n_y: int | None = Field(None, ge=2)
    stream_x: StreamSpec = Field(default_factory=StreamSpec)
    stream_y: StreamSpec = Field(default_factory=lambda: StreamSpec(name="zero"))
    beta_x: BetaSpec = Field(default_factory=BetaSpec)
    beta_y: BetaSpec = Field(default_factory=lambda: BetaSpec(kind="zero"))
    f1: CouplingSpec = Field(default_factory=CouplingSpec)
    f2: CouplingSpec = Field(default_factory=CouplingSpec)
    controls: list[list[float]] = Field(default_factory=lambda: [[0.0]])
    constraint: ConstraintSpec = Field(default_factory=ConstraintSpec)
    xi: Any = Field(default_factory=lambda: {"mode": [1, 1]})
    eta: Any = None
    t0: float = 0.0
    T: float = Field(0.5, gt=0)
    dt: float | Literal["auto"] = "auto"
    epsilons: list[float] = Field(default_factory=lambda: [2.0**-k for k in range(5, 10)])
    c_values: list[float | str] = Field(default_factory=lambda: ["0.5*lambda_min", "4*lambda_max"])
    J: int | None = None
    n_mc: int = Field(64, ge=2)
    refine: int = Field(16, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0])
    omega_deltas: list[float] = Field(default_factory=lambda: [0.0, 0.125, 0.25, 0.5, 1.0, 2.0])
    out: str = "results"

    @field_validator("epsilons")
    @classmethod
    def _positive(cls, v):
        if not v or any(e <= 0 for e in v):
            raise ValueError("epsilons must be a non-empty list of positive numbers")
        return v

    @field_validator("c_values")
    @classmethod
    def _rates(cls, v):
        for c in v:
            if isinstance(c, str) and not _C_PATTERN.match(c):
                raise ValueError(f"decay rate {c!r} is neither a number nor '<k>*lambda_min|lambda_max'")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v

    def dump(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    def digest(self) -> str:
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except Exception as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


@dataclass(eq=False)
class Context:
    """Everything a subcommand needs, built once from a validated config."""

    cfg: ExperimentConfig

    @cached_property
    def grid_x(self) -> GridDomain:
        return GridDomain(self.cfg.grid_n)

    @cached_property
    def grid_y(self) -> GridDomain | None:
        return None if self.cfg.grid_n_y is None else GridDomain(self.cfg.grid_n_y)

    @cached_property
    def drift_x(self):
        return build_drift(self.grid_x, self.cfg.stream_x.name, **self.cfg.stream_x.params)

    @cached_property
    def system(self) -> System:
        gx = build_group(self.grid_x, self.drift_x)
        if self.grid_y is None:
            return System(self.grid_x, gx)
        gy = build_group(self.grid_y, build_drift(self.grid_y, self.cfg.stream_y.name,
                                                  **self.cfg.stream_y.params))
        return System(self.grid_x, gx, self.grid_y, gy)

    @cached_property
    def controls(self) -> ControlSet:
        return ControlSet(self.cfg.controls)

    @cached_property
    def model(self) -> ModelSpec:
        c = self.cfg
        scalar = self.grid_y is None
        b1 = make_beta(c.beta_x.kind, c.beta_x.params)
        b2 = make_beta(c.beta_y.kind, c.beta_y.params, may_be_zero=scalar)
        f1 = make_coupling(c.f1.family, c.f1.params, self.controls, self.grid_x, self.grid_y, 1)
        f2 = make_coupling(c.f2.family, c.f2.params, self.controls, self.grid_x, self.grid_y, 2)
        return ModelSpec(b1, b2, f1, f2, self.controls)

    @cached_property
    def xi(self) -> np.ndarray:
        return make_field(self.grid_x, self.cfg.xi)

    @cached_property
    def eta(self):
        if self.cfg.eta is None:
            if self.grid_y is None:
                return float(self.grid_x.norm_sq(self.xi))
            return np.zeros(self.grid_y.dim)
        return make_field(self.grid_y, self.cfg.eta)

    @cached_property
    def constraint(self):
        return make_constraint(self.cfg.constraint.kind, self.system, **self.cfg.constraint.params)

    def dt_for(self, horizon: float) -> float:
        """Configured dt, or the largest stable step dividing ``horizon``."""
        if self.cfg.dt != "auto":
            return float(self.cfg.dt)
        stable = system_stable_step(self.system, self.model)
        return horizon / math.ceil(horizon / stable - 1e-12)

    def c_value(self, c: float | str) -> float:
        if not isinstance(c, str):
            return float(c)
        k, which = _C_PATTERN.match(c).groups()
        lam = self.grid_x.lambda_min if which == "lambda_min" else self.grid_x.lambda_max
        return float(k) * lam

    def stabilization(self, c: float | str) -> StabilizationConfig:
        return StabilizationConfig(self.c_value(c), self.cfg.J or self.grid_x.dim,
                                   self.model.beta1, self.model.f1, self.controls,
                                   self.grid_x, self.system.group_x)

    def check(self) -> None:
        """Force every lazily built object so configuration errors surface early."""
        for name in ("system", "model", "xi", "eta", "constraint"):
            getattr(self, name)
