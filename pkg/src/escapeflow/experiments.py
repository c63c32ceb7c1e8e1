"""Scenario runner: simulate, sweep, basin, convergence, certify, landscape
and detect-jumps experiments.

Outputs are collected in memory as ``{relative path: text}`` and written
only at the end, so a run is a pure function of the scenario file. Wall
clock goes to ``timing.json``, kept apart from the deterministic outputs.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import certify as C
from .errors import EscapeFlowError, FlowAborted, SamplingError, ScenarioError
from .flow import (
    FlowConfig,
    TrajectoryRecord,
    convergence_experiment,
    fmt_float,
    frozen_flow_classify,
    integrate_pode,
    integrate_pode_batch,
    trace_minimum_trajectory,
)
from .geometry import reshaped_landscape, retract
from .problem import known_trajectories, make_problem
from .scenario import Scenario, load_scenario, validate_scenario

SCHEMA_VERSION = 1


def dumps(doc) -> str:
    return json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def summary_schema() -> dict:
    return json.loads(resources.files("escapeflow").joinpath("schemas/summary.schema.json").read_text())


# -- context ------------------------------------------------------------------


@dataclass
class Context:
    scenario: Scenario
    seed: int
    problem: object
    trajectories: list
    params: dict

    def traj(self, label):
        for h in self.trajectories:
            if h.label == label:
                return h
        raise ScenarioError("trajectories", f"undefined trajectory label {label!r}")


_CACHE: dict = {}


def build_context(sc: Scenario, seed: int, params_override: Optional[dict] = None) -> Context:
    """Problem and trajectories for a scenario, memoised per process."""
    params = {**sc.problem.params, **(params_override or {})}
    key = (sc.model_dump_json(include={"problem", "trajectories", "flow"}), json.dumps(params, sort_keys=True))
    hit = _CACHE.get(key)
    if hit is not None:
        return Context(sc, seed, hit[0], hit[1], params)
    p = make_problem(sc.problem.name, params)
    known = {h.label: h for h in known_trajectories(sc.problem.name, params)}
    if not sc.trajectories:
        trajs = list(known.values())
    else:
        trajs = []
        for ts in sc.trajectories:
            if ts.builtin:
                if ts.label not in known:
                    raise ScenarioError("trajectories", f"no builtin trajectory {ts.label!r} for {sc.problem.name}")
                trajs.append(known[ts.label])
            else:
                t0 = sc.flow.t0 if ts.t0 is None else ts.t0
                t1 = sc.flow.t1 if ts.t1 is None else ts.t1
                grid = np.linspace(t0, t1, ts.n)
                trajs.append(trace_minimum_trajectory(p, grid, np.asarray(ts.seed, float), label=ts.label))
    _CACHE[key] = (p, trajs)
    return Context(sc, seed, p, trajs, params)


def flow_config(sc: Scenario, alpha=None) -> FlowConfig:
    f = sc.flow
    sched = None if alpha is not None else f.schedule
    return FlowConfig(
        alpha=alpha if alpha is not None else f.alpha,
        alpha_schedule=sched,
        dt=f.dt,
        integrator=f.integrator,
        retraction=f.retraction,
        feas_tol=f.feas_tol,
        record_every=f.record_every,
    )


# -- initial conditions ---------------------------------------------------------


def _solve_dependent(p, x, t, free, tol=1e-12, max_iter=30):
    dep = [i for i in range(p.n) if i not in free]
    if len(dep) != p.m:
        raise SamplingError(f"need {p.m} dependent coordinates, have {len(dep)}")
    x = np.array(x, dtype=float)
    for _ in range(max_iter):
        g = np.asarray(p.g(x, t), float).reshape(p.m)
        if np.linalg.norm(g) <= tol:
            return x
        J = np.asarray(p.jac_g(x, t), float).reshape(p.m, p.n)[:, dep]
        x[dep] -= np.linalg.solve(J, g)
        if not np.all(np.isfinite(x)):
            break
    raise SamplingError("dependent coordinates did not converge")


def sample_initial(p, sampler, trajectories, t0, seed) -> np.ndarray:
    """Draw ``sampler.n`` feasible initial states, resampling up to 10 times each."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    lo = np.asarray(sampler.lo, float)
    hi = np.asarray(sampler.hi, float)
    ref = np.zeros(p.n)
    if sampler.reference:
        ref = next(h for h in trajectories if h.label == sampler.reference).h(t0)
    out = []
    for i in range(sampler.n):
        for _ in range(10):
            u = lo + (hi - lo) * rng.random(lo.shape)
            try:
                if sampler.kind == "box":
                    x = u if sampler.reference is None else ref + u
                    x = retract(p, x, t0, tol=1e-12, max_iter=30) if p.m else x
                else:
                    free = list(sampler.free or [])
                    if len(free) != len(lo):
                        raise ScenarioError("sampler.free", "one bound per free coordinate")
                    x = ref.copy()
                    x[free] = ref[free] + u
                    x = _solve_dependent(p, x, t0, free) if p.m else x
            except (EscapeFlowError, np.linalg.LinAlgError) as exc:
                if isinstance(exc, ScenarioError):
                    raise
                continue
            out.append(x)
            break
        else:
            raise SamplingError(f"initial sample {i} stayed infeasible after 10 tries")
    return np.array(out).reshape(-1, p.n)


def initial_states(ctx: Context) -> np.ndarray:
    ini = ctx.scenario.initial
    if ini is None:
        return np.zeros((0, ctx.problem.n))
    if ini.points is not None:
        X = np.array(ini.points, dtype=float).reshape(len(ini.points), -1)
        if X.shape[1] != ctx.problem.n:
            raise ScenarioError("initial.points", f"points must have {ctx.problem.n} coordinates")
        return X
    s = ini.sampler
    return sample_initial(ctx.problem, s, ctx.trajectories, ctx.scenario.flow.t0, ctx.seed if s.seed is None else s.seed)


# -- helpers ----------------------------------------------------------------------


def window_distance(rec: TrajectoryRecord, h, t_from) -> float:
    """sup |x(t) - h(t)| over recorded samples with t >= t_from."""
    best = 0.0
    for t, x in zip(rec.t, rec.x):
        if t >= t_from - 1e-12:
            best = max(best, float(np.linalg.norm(x - h.h(t))))
    return best


def _run_one(p, x0, sc, alpha):
    cfg = flow_config(sc, alpha)
    try:
        return integrate_pode(p, x0, sc.flow.t0, sc.flow.t1, cfg), None
    except FlowAborted as exc:
        return exc.record, str(exc)


def _pmap(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _vec(x):
    return [float(v) for v in np.atleast_1d(x)]


# -- simulate / detect-jumps ------------------------------------------------------------


def _simulate_task(args):
    sc, seed, x0, alpha, final_window, jumps_window, max_points = args
    ctx = build_context(sc, seed)
    rec, err = _run_one(ctx.problem, x0, sc, alpha)
    t_end = rec.t[-1]
    dists = {h.label: window_distance(rec, h, t_end - final_window) for h in ctx.trajectories}
    info = {
        "x0": _vec(x0),
        "final_t": float(t_end),
        "final_x": _vec(rec.final_state),
        "max_feas": float(rec.max_feas),
        "retractions": len(rec.events_of("retraction")),
        "final_window_distance": dists,
        "nearest": min(dists, key=dists.get) if dists else None,
        "aborted": err,
    }
    jumps = None
    if jumps_window is not None:
        jumps = [e.to_dict() for e in C.detect_jumps(ctx.problem, rec, ctx.trajectories, jumps_window, max_points=max_points)]
    return rec.to_csv(), rec.events_json() + "\n", info, jumps


def exp_simulate(ctx, ex, eid, workers):
    X = initial_states(ctx)
    items = [(ctx.scenario, ctx.seed, x, ex.alpha, ex.final_window, None, 0) for x in X]
    files, runs = {}, []
    for i, (csv_s, ev, info, _) in enumerate(_pmap(_simulate_task, items, workers)):
        files[f"{eid}/run-{i:03d}.csv"] = csv_s
        files[f"{eid}/run-{i:03d}.events.json"] = ev
        runs.append({"index": i, **info})
    return files, {"runs": runs}


def exp_detect_jumps(ctx, ex, eid, workers):
    X = initial_states(ctx)
    items = [(ctx.scenario, ctx.seed, x, ex.alpha, 2 * math.pi, ex.window, ex.max_points) for x in X]
    runs = []
    for i, (_, _, info, jumps) in enumerate(_pmap(_simulate_task, items, workers)):
        runs.append({"index": i, "x0": info["x0"], "jumps": jumps, "aborted": info["aborted"]})
    return {f"{eid}/jumps.json": dumps({"runs": runs})}, {
        "runs": [{"index": r["index"], "n_jumps": len(r["jumps"]), "jumps": r["jumps"]} for r in runs]
    }


# -- sweep ----------------------------------------------------------------------------------


def _sweep_task(args):
    sc, seed, x0, alpha, param, value, h1, h2, radius, window = args
    ctx = build_context(sc, seed, {param: value} if param else None)
    rec, err = _run_one(ctx.problem, x0, sc, alpha)
    t_end = rec.t[-1]
    labels = [h1, h2]
    d = {lab: window_distance(rec, ctx.traj(lab), t_end - window) for lab in labels}
    near = min(labels, key=lambda lab: d[lab])
    if err is not None or d[near] > radius:
        outcome = "no-track"
    else:
        outcome = "tracks-h1" if near == h1 else "tracks-h2"
    return {"alpha": alpha, "value": value, "outcome": outcome, "dist_h1": d[h1], "dist_h2": d[h2], "aborted": err}


def exp_sweep(ctx, ex, eid, workers):
    labels = [h.label for h in ctx.trajectories]
    h1 = ex.h1 or labels[0]
    h2 = ex.h2 or labels[1]
    if ex.cells is not None:
        cells = [(float(a), float(v)) for a, v in ex.cells]
    else:
        vals = ex.values if ex.values else [None]
        cells = [(float(a), v) for a, v in itertools.product(ex.alphas, vals)]
    x0 = initial_states(ctx)[0]
    items = [
        (ctx.scenario, ctx.seed, x0, a, ex.param if v is not None else None, v, h1, h2, ex.no_track_radius, ex.final_window)
        for a, v in cells
    ]
    res = _pmap(_sweep_task, items, workers)
    pname = ex.param or "value"
    rows = [[r["alpha"], "" if r["value"] is None else r["value"], r["outcome"], r["dist_h1"], r["dist_h2"]] for r in res]
    files = {f"{eid}/sweep.csv": csv_text(["alpha", pname, "outcome", "dist_h1", "dist_h2"], rows)}
    cells_out = [
        {"alpha": r["alpha"], pname: r["value"], "outcome": r["outcome"], "dist_h1": r["dist_h1"], "dist_h2": r["dist_h2"]}
        for r in res
    ]
    return files, {"h1": h1, "h2": h2, "param": ex.param, "cells": cells_out}


# -- basin ------------------------------------------------------------------------------------


def _basin_task(args):
    sc, seed, X, alpha, success_time, radius = args
    ctx = build_context(sc, seed)
    cfg = flow_config(sc, alpha)
    recs = integrate_pode_batch(ctx.problem, X, sc.flow.t0, sc.flow.t1, cfg)
    out = []
    for x0, rec in zip(X, recs):
        d = {h.label: window_distance(rec, h, success_time) for h in ctx.trajectories}
        d0 = {h.label: float(np.linalg.norm(x0 - h.h(sc.flow.t0))) for h in ctx.trajectories}
        if "aborted" in rec.meta:
            outcome = "aborted"
        else:
            best = min(d, key=d.get)
            outcome = best if d[best] <= radius else "none"
        basin0 = frozen_flow_classify(ctx.problem, sc.flow.t0, x0, ctx.trajectories)
        out.append(
            {"x0": _vec(x0), "outcome": outcome, "nearest_initial": min(d0, key=d0.get), "initial_basin": basin0, "distance": d}
        )
    return out


def exp_basin(ctx, ex, eid, workers):
    seed = ex.sampler.seed if ex.sampler.seed is not None else (ex.seed if ex.seed is not None else ctx.seed)
    X = sample_initial(ctx.problem, ex.sampler, ctx.trajectories, ctx.scenario.flow.t0, seed)
    labels = [h.label for h in ctx.trajectories]
    if len(X) == 0:
        return {f"{eid}/basin.csv": csv_text(["index"], [])}, {"n_inits": 0, "fractions": {}}
    chunks = [c for c in np.array_split(X, max(1, workers)) if len(c)]
    items = [(ctx.scenario, ctx.seed, c, ex.alpha, ex.success_time, ex.radius) for c in chunks]
    rows = [r for part in _pmap(_basin_task, items, workers) for r in part]
    n = len(rows)
    outcomes = labels + ["none", "aborted"]
    fractions = {k: sum(r["outcome"] == k for r in rows) / n for k in outcomes}
    header = ["index"] + [f"x0_{i + 1}" for i in range(ctx.problem.n)] + ["outcome", "nearest_initial", "initial_basin"]
    header += [f"dist_{lab}" for lab in labels]
    body = [[i] + r["x0"] + [r["outcome"], r["nearest_initial"], r["initial_basin"]] + [r["distance"][lab] for lab in labels] for i, r in enumerate(rows)]
    result = {
        "n_inits": n,
        "success_time": float(ex.success_time),
        "radius": float(ex.radius),
        "fractions": fractions,
        "fraction_nearest_initial": sum(r["outcome"] == r["nearest_initial"] for r in rows) / n,
        "fraction_initial_basin": sum(r["outcome"] == r["initial_basin"] for r in rows) / n,
        "worst_distance": {lab: max(r["distance"][lab] for r in rows) for lab in labels},
        "seed": int(seed),
    }
    return {f"{eid}/basin.csv": csv_text(header, body)}, result


# -- convergence ----------------------------------------------------------------------------------


def exp_convergence(ctx, ex, eid, workers):
    sc = ctx.scenario
    alpha = ex.alpha if ex.alpha is not None else sc.flow.alpha
    x0 = initial_states(ctx)[0]
    table = convergence_experiment(ctx.problem, x0, alpha, ex.horizon, ex.dtau, ctx.trajectories, t0=sc.flow.t0)
    files = {f"{eid}/convergence.csv": table.to_csv()}
    result = {"table": table.to_dict()}
    if ex.rk4_dts:
        dts = sorted(ex.rk4_dts, reverse=True)
        ref = integrate_pode(
            ctx.problem, x0, sc.flow.t0, sc.flow.t0 + ex.horizon, FlowConfig(alpha=alpha, dt=dts[-1] / 16)
        )
        errs = []
        for dt in dts:
            rec = integrate_pode(ctx.problem, x0, sc.flow.t0, sc.flow.t0 + ex.horizon, FlowConfig(alpha=alpha, dt=dt))
            errs.append(float(np.linalg.norm(rec.final_state - ref.final_state)))
        files[f"{eid}/rk4.csv"] = csv_text(["dt", "final_error"], [[a, b] for a, b in zip(dts, errs)])
        result["rk4"] = {
            "dt": [float(d) for d in dts],
            "final_error": errs,
            "ratios": [errs[i] / errs[i + 1] if errs[i + 1] > 0 else None for i in range(len(errs) - 1)],
        }
    return files, result


# -- certify -----------------------------------------------------------------------------------


def _check_tracking(ctx, track, horizon, n_runs, seed, dt):
    """Integrate from starts inside the admissible ball and compare with the prediction."""
    p, h2 = ctx.problem, track.h2
    t0, t1 = horizon
    rad = min(track.initial_error, track.r2 / math.exp(track.eta2))
    E, _ = C.ball_offsets(p, h2, t0, rad, max(1, n_runs - 1), C._rng(seed, 11), shell_fraction=1.0)
    E = np.vstack([np.zeros((1, p.n)), E])
    recs = integrate_pode_batch(p, E + h2.h(t0), t0, t1, FlowConfig(alpha=track.alpha, dt=dt, record_every=5))
    worst, amp = 0.0, 0.0
    for k, (e, rec) in enumerate(zip(E, recs)):
        H = np.array([h2.h(t) for t in rec.t])
        err = np.linalg.norm(rec.states - H, axis=1)
        pred = track.predicted_error(rec.times, float(np.linalg.norm(e)), t0)
        worst = max(worst, float(np.max(err / np.maximum(pred, 1e-300))))
        if k == 0:
            tail = rec.times >= max(t0, t1 - 2 * math.pi)
            amp = float(np.max(err[tail]))
    return {"runs": len(recs), "max_ratio": worst, "consistent": worst <= 1.05, "steady_amplitude": amp}


def _check_jump(ctx, dom, dt):
    p = ctx.problem
    X = dom.dv_offsets + dom.h2.h(dom.t1)
    recs = integrate_pode_batch(p, X, dom.t1, dom.t2, FlowConfig(alpha=dom.alpha, dt=dt))
    target = dom.h2.h(dom.t2) + dom.branch.at(dom.t2)
    d = [float(np.linalg.norm(r.final_state - target)) if "aborted" not in r.meta else math.inf for r in recs]
    worst = max(d)
    return {"runs": len(recs), "worst_final_distance": C._num(worst), "target_radius": dom.r2 - dom.rho,
            "all_reached": worst <= dom.r2 - dom.rho}


def exp_certify(ctx, ex, eid, workers):
    sc = ctx.scenario
    p = ctx.problem
    alpha = ex.alpha if ex.alpha is not None else sc.flow.alpha
    seed = ex.seed if ex.seed is not None else ctx.seed
    h2 = ctx.traj(ex.to)
    h1 = ctx.traj(ex.from_) if ex.from_ else None
    refs = ex.references
    horizon = ex.tracking_horizon or (sc.flow.t0, sc.flow.t1)
    steps = set(ex.steps)
    certs, result = {}, {}

    conv = None
    if "convexity" in steps or "tracking" in steps:
        nodes = np.linspace(horizon[0], horizon[1], ex.convexity_nodes)
        conv = C.estimate_one_point_convexity(p, h2, ex.r2, nodes, ex.n_samples, seed, reference=refs.get("c"))
        certs["convexity"] = conv.to_dict()
        result["c_hat"] = conv.c_hat

    doms, jumps = {}, {}
    if "dominance" in steps:
        region = C.region_from_dict(ex.region)
        for mode in ex.modes:
            try:
                doms[mode] = C.check_dominance(
                    p, h1, h2, alpha, ex.t1, ex.t2, region, ex.v, ex.n_samples, seed, mode=mode, r2=ex.r2,
                    dt=sc.flow.dt, reference=refs.get("w"),
                )
                certs[f"dominance_{mode}"] = doms[mode].to_dict()
                result[f"w_hat_{mode}"] = C._num(doms[mode].w_hat)
                result[f"invariance_ok_{mode}"] = doms[mode].invariance_ok
            except EscapeFlowError as exc:
                certs[f"dominance_{mode}"] = {"kind": "dominance", "mode": mode, "valid": False, "refused": str(exc)}
                result[f"w_hat_{mode}"] = None
    if "jump" in steps:
        for mode, dom in doms.items():
            try:
                jc = C.jump_certificate(dom, theta=ex.theta) if mode == "uniform" else C.jump_certificate_averaged(
                    dom, n_fit=ex.fit_samples
                )
                jumps[mode] = jc
                certs[f"jump_{mode}"] = jc.to_dict()
                result[f"jump_valid_{mode}"] = jc.valid
            except EscapeFlowError as exc:
                certs[f"jump_{mode}"] = {"kind": "jump", "mode": mode, "valid": False, "refused": str(exc)}
                result[f"jump_valid_{mode}"] = False
    track = None
    if "tracking" in steps:
        try:
            track = C.tracking_certificate(
                p, h2, alpha, conv, np.linspace(horizon[0], horizon[1], ex.tracking_nodes), n_samples=ex.fit_samples,
                rng_seed=seed, reference=refs.get("alpha_max"),
            )
            certs["tracking"] = track.to_dict()
            result["alpha_max"] = C._num(track.alpha_max)
            result["tracking_valid"] = track.valid
        except EscapeFlowError as exc:
            certs["tracking"] = {"kind": "tracking", "valid": False, "refused": str(exc)}
            result["tracking_valid"] = False
    if "escape" in steps and track is not None and jumps:
        verdicts = {}
        for mode, jc in jumps.items():
            try:
                esc = C.escape_certificate(jc, track)
                certs[f"escape_{mode}"] = esc.to_dict()
                verdicts[mode] = esc.valid
            except EscapeFlowError as exc:
                certs[f"escape_{mode}"] = {"kind": "escape", "valid": False, "refused": str(exc)}
                verdicts[mode] = False
        result["escape_valid"] = any(verdicts.values())
        result["escape_by_mode"] = verdicts
    if ex.verify:
        checks = {}
        if track is not None and track.valid:
            checks["tracking"] = _check_tracking(ctx, track, horizon, ex.verify_runs, seed, sc.flow.dt)
        jc = jumps.get("uniform")
        if jc is not None and jc.valid:
            checks["jump_uniform"] = _check_jump(ctx, jc.dominance, sc.flow.dt)
        certs["checks"] = checks
        result["checks"] = checks
    return {f"{eid}/certificates.json": dumps(certs)}, result


# -- landscape -------------------------------------------------------------------------------------


def landscape_table(p, h2, alpha, times, lo, hi, points):
    """Reshaped landscape on a product grid of offsets; returns (csv text, per-slice info)."""
    if len(lo) != p.n or len(hi) != p.n:
        raise ScenarioError("lo", f"offset bounds need {p.n} entries")
    axes = [np.linspace(a, b, points) for a, b in zip(lo, hi)]
    grid = [np.array(c) for c in itertools.product(*axes)]
    rows, slices = [], []
    for t in times:
        vals = reshaped_landscape(p, h2, t, grid, alpha)
        v = np.array([val for _, val in vals])
        for e, val in vals:
            rows.append([float(t)] + [float(c) for c in np.atleast_1d(e)] + [float(val)])
        info = {"t": float(t), "argmin": _vec(grid[int(np.argmin(v))])}
        if p.n == 1:
            info["interior_minima"] = int(np.sum((v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])))
        slices.append(info)
    header = ["t"] + [f"e{i + 1}" for i in range(p.n)] + ["value"]
    return csv_text(header, rows), slices


def exp_landscape(ctx, ex, eid, workers):
    text, slices = landscape_table(ctx.problem, ctx.traj(ex.to), ex.alpha, ex.times, ex.lo, ex.hi, ex.points)
    return {f"{eid}/landscape.csv": text}, {"alpha": float(ex.alpha), "slices": slices}


RUNNERS = {
    "simulate": exp_simulate,
    "detect-jumps": exp_detect_jumps,
    "sweep": exp_sweep,
    "basin": exp_basin,
    "convergence": exp_convergence,
    "certify": exp_certify,
    "landscape": exp_landscape,
}


# -- scenario ---------------------------------------------------------------------------------------


@dataclass
class RunResult:
    files: dict
    summary: dict
    timing: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(e["status"] == "ok" for e in self.summary["experiments"])

    @property
    def exit_status(self) -> int:
        return 0 if self.ok else 1

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for rel, text in self.files.items():
            path = out / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                fh.write(text)
        with open(out / "timing.json", "w") as fh:
            fh.write(dumps(self.timing))
        return out


def run_scenario(source, out_dir=None, workers: int = 1, seed: Optional[int] = None, only=None) -> RunResult:
    """Run every experiment of a scenario in order.

    ``source`` is a path, a mapping or a validated :class:`Scenario`.
    ``seed`` overrides the scenario seed; ``only`` restricts the run to the
    experiments of the given kinds. A failing experiment is recorded in the
    summary and the remaining ones still run.
    """
    if isinstance(source, Scenario):
        sc = source
    elif isinstance(source, dict):
        sc = validate_scenario(source)
    else:
        sc = load_scenario(source)
    base_seed = seed if seed is not None else (sc.seed if sc.seed is not None else 0)
    files, entries, timing = {}, [], {}
    start = time.perf_counter()
    ctx = None
    for eid, ex in zip(sc.experiment_ids(), sc.experiments):
        if only and ex.kind not in only:
            continue
        t0 = time.perf_counter()
        entry = {"id": eid, "kind": ex.kind, "status": "ok", "files": []}
        try:
            if ctx is None:
                ctx = build_context(sc, base_seed)
            if seed is not None and ex.seed is not None:
                ex = ex.model_copy(update={"seed": seed})
            out, res = RUNNERS[ex.kind](ctx, ex, eid, workers)
            files.update(out)
            entry["files"] = sorted(out)
            entry["results"] = res
        except Exception as exc:  # recorded, the remaining experiments still run
            entry["status"] = "error"
            entry["error"] = f"{type(exc).__name__}: {exc}"
        entries.append(entry)
        timing[eid] = time.perf_counter() - t0
    timing["total"] = time.perf_counter() - start
    summary = {
        "schema_version": SCHEMA_VERSION,
        "scenario": sc.name,
        "problem": {"name": sc.problem.name, "params": dict(sc.problem.params)},
        "seed": int(base_seed),
        "experiments": entries,
    }
    files["summary.json"] = dumps(summary)
    result = RunResult(files, json.loads(files["summary.json"]), timing)
    if out_dir is not None:
        result.write(out_dir)
    return result


def _clean(obj):
    """Plain JSON types; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj
