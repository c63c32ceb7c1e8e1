"""Request and response bodies of the HTTP service."""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class Health(BaseModel):
    status: str = "ok"
    version: str


class ProblemInfo(BaseModel):
    name: str
    defaults: dict[str, Any]
    trajectories: list[str]


class ScenarioRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenario: dict[str, Any]
    seed: Optional[int] = Field(None, ge=0)
    workers: int = Field(1, ge=1)
    only: Optional[list[str]] = None


class ValidationReport(BaseModel):
    valid: bool
    field: Optional[str] = None
    message: Optional[str] = None
    experiments: list[str] = []


class RunResponse(BaseModel):
    exit_status: int
    summary: dict[str, Any]
    files: dict[str, str]
    timing: dict[str, float]


class SimulateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    problem: str
    params: dict[str, Any] = {}
    x0: list[float]
    alpha: float = Field(gt=0)
    t0: float = 0.0
    t1: float
    dt: float = Field(1e-3, gt=0)
    integrator: Literal["rk4", "euler"] = "rk4"
    retraction: Literal["newton", "none"] = "newton"
    record_every: int = Field(1, ge=1)


class SimulateResponse(BaseModel):
    csv: str
    events: str
    final_x: list[float]
    max_feas: float
    aborted: Optional[str] = None


class LandscapeRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    problem: str
    params: dict[str, Any] = {}
    to: str
    alpha: float = Field(ge=0)
    times: list[float]
    lo: list[float]
    hi: list[float]
    points: int = Field(201, ge=2)


class LandscapeResponse(BaseModel):
    csv: str
    slices: list[dict[str, Any]]


class ErrorBody(BaseModel):
    field: Optional[str] = None
    message: str
