"""FastAPI application exposing problems, simulation and scenario runs."""

from __future__ import annotations

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import EscapeFlowError, FlowAborted, ScenarioError
from ..experiments import landscape_table, run_scenario
from ..flow import FlowConfig, integrate_pode
from ..geometry import reshaped_landscape
from ..problem import known_trajectories, make_problem, problem_defaults, registered_problems
from ..scenario import validate_scenario
from .models import (
    Health,
    LandscapeRequest,
    LandscapeResponse,
    ProblemInfo,
    RunResponse,
    ScenarioRequest,
    SimulateRequest,
    SimulateResponse,
    ValidationReport,
)


def create_app() -> FastAPI:
    app = FastAPI(title="escapeflow", version=__version__)

    @app.exception_handler(ScenarioError)
    async def scenario_error(request, exc: ScenarioError):
        return JSONResponse(status_code=422, content={"field": exc.field, "message": str(exc)})

    @app.exception_handler(EscapeFlowError)
    async def flow_error(request, exc: EscapeFlowError):
        return JSONResponse(status_code=400, content={"field": None, "message": f"{type(exc).__name__}: {exc}"})

    @app.get("/health", response_model=Health)
    def health():
        return Health(version=__version__)

    @app.get("/problems", response_model=list[ProblemInfo])
    def problems():
        return [
            ProblemInfo(name=name, defaults=problem_defaults(name), trajectories=[h.label for h in known_trajectories(name)])
            for name in registered_problems()
        ]

    @app.post("/scenarios/validate", response_model=ValidationReport)
    def validate(req: ScenarioRequest):
        try:
            sc = validate_scenario(req.scenario)
        except ScenarioError as exc:
            return ValidationReport(valid=False, field=exc.field, message=str(exc))
        return ValidationReport(valid=True, experiments=sc.experiment_ids())

    @app.post("/scenarios/run", response_model=RunResponse)
    def run(req: ScenarioRequest):
        res = run_scenario(req.scenario, workers=req.workers, seed=req.seed, only=req.only)
        return RunResponse(exit_status=res.exit_status, summary=res.summary, files=res.files, timing=res.timing)

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(req: SimulateRequest):
        p = make_problem(req.problem, req.params)
        cfg = FlowConfig(
            alpha=req.alpha, dt=req.dt, integrator=req.integrator, retraction=req.retraction, record_every=req.record_every
        )
        aborted = None
        try:
            rec = integrate_pode(p, req.x0, req.t0, req.t1, cfg)
        except FlowAborted as exc:
            rec, aborted = exc.record, str(exc)
        return SimulateResponse(
            csv=rec.to_csv(), events=rec.events_json(), final_x=[float(v) for v in rec.final_state],
            max_feas=float(rec.max_feas), aborted=aborted,
        )

    @app.post("/landscape", response_model=LandscapeResponse)
    def landscape(req: LandscapeRequest):
        p = make_problem(req.problem, req.params)
        trajs = {h.label: h for h in known_trajectories(req.problem, req.params)}
        if req.to not in trajs:
            raise ScenarioError("to", f"undefined trajectory label {req.to!r}")
        text, slices = landscape_table(p, trajs[req.to], req.alpha, req.times, req.lo, req.hi, req.points)
        return LandscapeResponse(csv=text, slices=slices)

    return app


app = create_app()
