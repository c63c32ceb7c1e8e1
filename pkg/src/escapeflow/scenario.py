"""Declarative scenario files.

A scenario is a TOML document with a problem, a flow configuration,
initial conditions, the minimum trajectories of interest and a list of
experiments. Field names are documented in the README; every validation
error names the offending field, e.g. ``experiments[2].alpha``.

Numbers may be written as multiples of pi, e.g. ``"pi/8"`` or ``"4*pi"``.
"""

from __future__ import annotations

import math
import re
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

import tomli
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, model_validator

from .errors import ScenarioError
from .problem import known_trajectories, make_problem, registered_problems

_PI = re.compile(r"^\s*(?:([-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)\s*\*?\s*)?(-?)pi\s*(?:/\s*(\d*\.?\d+))?\s*$")


def parse_number(v):
    """Accept plain numbers and strings of the form ``[c*]pi[/d]``."""
    if isinstance(v, str):
        m = _PI.match(v)
        if not m:
            try:
                return float(v)
            except ValueError:
                raise ValueError(f"not a number: {v!r}") from None
        coef = float(m.group(1)) if m.group(1) else 1.0
        sign = -1.0 if m.group(2) else 1.0
        den = float(m.group(3)) if m.group(3) else 1.0
        return sign * coef * math.pi / den
    return v


Num = Annotated[float, BeforeValidator(parse_number)]


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemSpec(_Model):
    name: str
    params: dict[str, Union[float, int, str]] = {}


class FlowSpec(_Model):
    alpha: Optional[Num] = None
    schedule: Optional[list[tuple[Num, Num]]] = None
    dt: Num = 1e-3
    integrator: Literal["rk4", "euler"] = "rk4"
    retraction: Literal["newton", "none"] = "newton"
    t0: Num = 0.0
    t1: Num
    feas_tol: Num = 1e-8
    record_every: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.alpha is None and not self.schedule:
            raise ValueError("give alpha or schedule")
        if self.t1 <= self.t0:
            raise ValueError("t1 must exceed t0")
        return self


class SamplerSpec(_Model):
    """Random initial states.

    ``box`` draws x uniformly in [lo, hi] and retracts onto the feasible
    set. ``dependent`` draws the ``free`` coordinates as offsets from the
    ``reference`` trajectory (or the origin) and solves the constraints for
    the remaining coordinates.
    """

    kind: Literal["box", "dependent"]
    lo: list[Num]
    hi: list[Num]
    n: int = Field(ge=0)
    seed: Optional[int] = None
    free: Optional[list[int]] = None
    reference: Optional[str] = None


class InitialSpec(_Model):
    points: Optional[list[list[Num]]] = None
    sampler: Optional[SamplerSpec] = None

    @model_validator(mode="after")
    def _one(self):
        if (self.points is None) == (self.sampler is None):
            raise ValueError("give exactly one of points or sampler")
        return self


class TrajectorySpec(_Model):
    """A known trajectory (``builtin``) or one traced from ``seed``."""

    label: str
    builtin: bool = True
    seed: Optional[list[Num]] = None
    t0: Optional[Num] = None
    t1: Optional[Num] = None
    n: int = 2001

    @model_validator(mode="after")
    def _seeded(self):
        if not self.builtin and self.seed is None:
            raise ValueError("a traced trajectory needs a seed")
        return self


class _Experiment(_Model):
    id: Optional[str] = None
    seed: Optional[int] = None


class SimulateSpec(_Experiment):
    kind: Literal["simulate"]
    alpha: Optional[Num] = None
    final_window: Num = 2 * math.pi


class DetectJumpsSpec(_Experiment):
    kind: Literal["detect-jumps"]
    alpha: Optional[Num] = None
    window: Num = 0.1
    max_points: int = 600


class SweepSpec(_Experiment):
    kind: Literal["sweep"]
    param: Optional[str] = None
    cells: Optional[list[tuple[Num, Num]]] = None
    alphas: Optional[list[Num]] = None
    values: Optional[list[Num]] = None
    h1: Optional[str] = None
    h2: Optional[str] = None
    no_track_radius: Num = 1.0
    final_window: Num = 2 * math.pi

    @model_validator(mode="after")
    def _grid(self):
        if self.cells is None and not self.alphas:
            raise ValueError("give cells or alphas")
        if self.cells is not None and self.alphas:
            raise ValueError("give cells or alphas, not both")
        if (self.cells is not None or self.values) and self.param is None:
            raise ValueError("a parameter grid needs param")
        return self


class BasinSpec(_Experiment):
    kind: Literal["basin"]
    sampler: SamplerSpec
    alpha: Optional[Num] = None
    success_time: Num
    radius: Num = 0.5


class ConvergenceSpec(_Experiment):
    kind: Literal["convergence"]
    alpha: Optional[Num] = None
    horizon: Num
    dtau: list[Num]
    rk4_dts: list[Num] = []


class CertifySpec(_Experiment):
    kind: Literal["certify"]
    to: str
    from_: Optional[str] = Field(None, alias="from")
    alpha: Optional[Num] = None
    t1: Num = 0.0
    t2: Optional[Num] = None
    region: Optional[dict[str, dict[str, Any]]] = None
    v: Num = 0.0
    r2: Num
    theta: Num = 0.2
    modes: list[Literal["uniform", "averaged"]] = ["uniform", "averaged"]
    steps: list[Literal["convexity", "dominance", "jump", "tracking", "escape"]] = [
        "convexity",
        "dominance",
        "jump",
        "tracking",
        "escape",
    ]
    n_samples: int = 400
    fit_samples: int = 500
    convexity_nodes: int = 17
    tracking_horizon: Optional[tuple[Num, Num]] = None
    tracking_nodes: int = 129
    references: dict[str, float] = {}
    verify: bool = True
    verify_runs: int = 8

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @model_validator(mode="after")
    def _needs(self):
        if "dominance" in self.steps:
            if self.from_ is None or self.region is None or self.t2 is None:
                raise ValueError("dominance needs from, region and t2")
        return self


class LandscapeSpec(_Experiment):
    kind: Literal["landscape"]
    to: str
    alpha: Num
    times: list[Num]
    lo: list[Num]
    hi: list[Num]
    points: int = Field(201, ge=2)


Experiment = Annotated[
    Union[SimulateSpec, DetectJumpsSpec, SweepSpec, BasinSpec, ConvergenceSpec, CertifySpec, LandscapeSpec],
    Field(discriminator="kind"),
]

STOCHASTIC = ("basin", "certify")


class Scenario(_Model):
    name: str
    seed: Optional[int] = None
    problem: ProblemSpec
    flow: FlowSpec
    initial: Optional[InitialSpec] = None
    trajectories: list[TrajectorySpec] = []
    experiments: list[Experiment] = []

    def labels(self) -> list:
        if self.trajectories:
            return [t.label for t in self.trajectories]
        return [h.label for h in known_trajectories(self.problem.name, self.problem.params)]

    def experiment_ids(self) -> list:
        return [e.id or f"{i:02d}-{e.kind}" for i, e in enumerate(self.experiments)]


def _loc(loc) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        elif part in ("simulate", "detect-jumps", "sweep", "basin", "convergence", "certify", "landscape"):
            continue  # discriminator tag
        else:
            out += ("." if out else "") + str(part)
    return out or "<root>"


def validate_scenario(data: dict) -> Scenario:
    """Parse and cross-check a scenario mapping.

    Raises
    ------
    ScenarioError
        Naming the first offending field.
    """
    try:
        sc = Scenario.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ScenarioError(_loc(err["loc"]), err["msg"]) from None
    if sc.problem.name not in registered_problems():
        raise ScenarioError("problem.name", f"unknown problem {sc.problem.name!r}")
    try:
        make_problem(sc.problem.name, sc.problem.params)
        labels = set(sc.labels())
    except Exception as exc:  # bad problem parameters
        raise ScenarioError("problem.params", str(exc)) from None
    ids = sc.experiment_ids()
    if len(set(ids)) != len(ids):
        raise ScenarioError("experiments", "experiment ids must be unique")
    if sc.initial and sc.initial.sampler and sc.initial.sampler.seed is None and sc.seed is None:
        raise ScenarioError("initial.sampler.seed", "stochastic sampler needs a seed")
    for i, ex in enumerate(sc.experiments):
        where = f"experiments[{i}]"
        refs = []
        if ex.kind in STOCHASTIC and ex.seed is None and sc.seed is None:
            raise ScenarioError(f"{where}.seed", "stochastic experiment needs a seed")
        if ex.kind == "sweep":
            refs = [("h1", ex.h1), ("h2", ex.h2)]
        elif ex.kind == "certify":
            refs = [("to", ex.to), ("from", ex.from_)]
        elif ex.kind == "landscape":
            refs = [("to", ex.to)]
        elif ex.kind == "basin" and ex.sampler.reference:
            refs = [("sampler.reference", ex.sampler.reference)]
        for name, lab in refs:
            if lab is not None and lab not in labels:
                raise ScenarioError(f"{where}.{name}", f"undefined trajectory label {lab!r}")
        if ex.kind in ("simulate", "detect-jumps", "sweep", "convergence") and sc.initial is None:
            raise ScenarioError("initial", f"{ex.kind} needs initial conditions")
    if sc.initial and sc.initial.sampler and sc.initial.sampler.reference:
        if sc.initial.sampler.reference not in labels:
            raise ScenarioError("initial.sampler.reference", "undefined trajectory label")
    return sc


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        data = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError("<file>", f"TOML syntax: {exc}") from None
    return validate_scenario(data)


def shipped_scenarios() -> dict:
    """Name -> path of the scenario files shipped with the package."""
    d = Path(__file__).parent / "scenarios"
    return {p.stem: p for p in sorted(d.glob("*.toml"))}
