"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test records one PASS/FAIL line; the lines are repeated in the
terminal summary. The shipped scenario suite is run twice (module fixture)
and the certificate, basin, consistency and determinism criteria read their
results and per-experiment wall-clock from the first run.
"""
import json
import math
import time

import numpy as np
import pytest

from escapeflow.certify import detect_jumps
from escapeflow.experiments import run_scenario
from escapeflow.flow import FlowConfig, convergence_experiment, integrate_pode
from escapeflow.geometry import evaluate_geometry
from escapeflow.problem import (
    ackley_trajectories,
    builtin_ackley_constrained,
    builtin_quartic,
    builtin_tracking_quadratic,
    quartic_trajectories,
    tracking_quadratic_solution,
)
from escapeflow.scenario import shipped_scenarios

SUITE = ("fig1", "ackley", "tracking", "small-alpha")


def _tree(path):
    return {
        str(f.relative_to(path)): f.read_bytes()
        for f in sorted(path.rglob("*"))
        if f.is_file() and f.name != "timing.json"
    }


@pytest.fixture(scope="module")
def suite_runs(tmp_path_factory):
    """Two independent runs of the whole shipped suite into separate trees."""
    shipped = shipped_scenarios()
    roots, results = [], {}
    for k in range(2):
        root = tmp_path_factory.mktemp(f"suite-{k}")
        for name in SUITE:
            res = run_scenario(shipped[name], out_dir=root / name)
            if k == 0:
                results[name] = res
        roots.append(root)
    return roots, results


def _experiment(results, scenario, eid):
    res = results[scenario]
    entry = next(e for e in res.summary["experiments"] if e["id"] == eid)
    return entry, res.timing[eid]


# -- 1 -----------------------------------------------------------------------------


def test_criterion_01_bifurcation_outcomes(verdict):
    start = time.perf_counter()
    details, ok = [], True
    for alpha, b, target in ((0.3, 5.0, "global"), (0.1, 5.0, "local-1"), (0.1, 10.0, "global"), (0.8, 5.0, None)):
        p = builtin_quartic(b)
        traj = {h.label: h for h in quartic_trajectories(b)}
        rec = integrate_pode(p, [-2.0], 0.0, 4 * math.pi, FlowConfig(alpha=alpha, dt=1e-3, record_every=10))
        if target is not None:
            d = abs(rec.final_state[0] - traj[target].h(rec.t[-1])[0])
            ok &= d <= 0.5
            details.append(f"({alpha},{b}) |x-{target}|={d:.3g}")
        else:
            # final distance read as sup over the last period; the endpoint is shown too
            tail = rec.times >= 2 * math.pi
            window = {lab: float(rec.distance_to(h)[tail].max()) for lab, h in traj.items()}
            endpoint = {lab: abs(rec.final_state[0] - h.h(rec.t[-1])[0]) for lab, h in traj.items()}
            ok &= min(window.values()) > 1.0
            details.append(
                "(0.8,5) last-period sup " + ", ".join(f"{k}={v:.3g}" for k, v in window.items())
                + " endpoint " + ", ".join(f"{k}={v:.3g}" for k, v in endpoint.items())
            )
    elapsed = time.perf_counter() - start
    ok &= elapsed < 5.0
    assert verdict(1, ok, "; ".join(details) + f"; {elapsed:.2f}s < 5s")


# -- 2 -----------------------------------------------------------------------------


def test_criterion_02_jump_timing(verdict):
    p = builtin_quartic(5.0)
    minima = quartic_trajectories(5.0)
    rec = integrate_pode(p, [-2.0], 0.0, 4 * math.pi, FlowConfig(alpha=0.3, dt=1e-3, record_every=10))
    events = detect_jumps(p, rec, minima)
    ok = (
        len(events) == 1
        and (events[0].from_label, events[0].to_label) == ("local-1", "global")
        and 0.7 * math.pi <= events[0].t <= math.pi
    )
    desc = ", ".join(f"{e.from_label}->{e.to_label} at {e.t / math.pi:.3f}pi" for e in events) or "no events"
    assert verdict(2, ok, f"{len(events)} event(s): {desc}; window [0.7pi, 1.0pi]")


# -- 3 -----------------------------------------------------------------------------


def test_criterion_03_projector_identities(verdict):
    p = builtin_ackley_constrained()
    rng = np.random.default_rng(2024)
    ts = rng.uniform(0.0, 2 * math.pi, 100)
    ss = rng.uniform(-5.0, 5.0, 100)
    start = time.perf_counter()
    worst = 0.0
    for t, s in zip(ts, ss):
        x = np.array([24.0 * math.sin(t) + 0.5 * s * s, math.cos(t) + s])
        geo = evaluate_geometry(p, x, t)
        P, J = geo.P, geo.J
        pg, qg = geo.grad_L, geo.constraint_drift
        scale_pg = np.linalg.norm(pg) * np.linalg.norm(qg) + 1.0
        worst = max(
            worst,
            np.linalg.norm(P @ P - P, 2),
            np.linalg.norm(P - P.T, 2),
            np.linalg.norm(P @ J.T, 2) / max(np.linalg.norm(J), 1.0),
            abs(float(pg @ qg)) / scale_pg,
        )
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 1.0
    assert verdict(3, ok, f"worst scaled residual {worst:.2e} <= 1e-9 at 100 points; {elapsed:.3f}s < 1s")


# -- 4 -----------------------------------------------------------------------------


def test_criterion_04_feasibility_invariance(verdict):
    p = builtin_ackley_constrained()
    h1, _ = ackley_trajectories()
    start = time.perf_counter()
    newton = integrate_pode(p, h1.h(0.0), 0.0, 2 * math.pi, FlowConfig(alpha=0.2, dt=1e-3, retraction="newton"))
    none = integrate_pode(p, h1.h(0.0), 0.0, 2 * math.pi, FlowConfig(alpha=0.2, dt=1e-4, retraction="none"))
    elapsed = time.perf_counter() - start
    ok = newton.max_feas <= 1e-6 and none.max_feas <= 1e-4 and elapsed < 10.0
    assert verdict(
        4, ok, f"newton dt=1e-3 max|g|={newton.max_feas:.2e} <= 1e-6; none dt=1e-4 max|g|={none.max_feas:.2e} <= 1e-4; "
        f"{elapsed:.2f}s < 10s",
    )


# -- 5 -----------------------------------------------------------------------------


def test_criterion_05_discretisation_convergence(verdict):
    p = builtin_tracking_quadratic()
    start = time.perf_counter()
    tab = convergence_experiment(p, [0.0], 0.1, 6.0, [1e-2, 5e-3, 2.5e-3])
    rk4 = []
    for dt in (0.2, 0.1, 0.05, 0.025):
        rec = integrate_pode(p, [0.0], 0.0, 6.0, FlowConfig(alpha=0.1, dt=dt))
        rk4.append(float(np.max(np.abs(rec.states[:, 0] - tracking_quadratic_solution(rec.times, 0.0, 0.1)))))
    elapsed = time.perf_counter() - start
    rk4_ratios = [a / b for a, b in zip(rk4, rk4[1:]) if b > 1e-12]
    d = tab.to_dict()
    ratios = list(d["proximal_ratios"]) + list(d["euler_ratios"])
    ok = all(1.6 <= r <= 2.4 for r in ratios) and rk4_ratios and all(r >= 8 for r in rk4_ratios) and elapsed < 30.0
    assert verdict(
        5, ok,
        "proximal " + ", ".join(f"{r:.3f}" for r in d["proximal_ratios"])
        + "; euler " + ", ".join(f"{r:.3f}" for r in d["euler_ratios"])
        + "; rk4 " + ", ".join(f"{r:.1f}" for r in rk4_ratios) + f"; {elapsed:.1f}s < 30s",
    )


# -- 6 -----------------------------------------------------------------------------


def test_criterion_06_tracking_bound(suite_runs, verdict):
    _, results = suite_runs
    ok, parts, elapsed = True, [], 0.0
    for alpha in (0.05, 0.1, 0.2):
        entry, secs = _experiment(results, "tracking", f"track-alpha-{alpha}")
        elapsed += secs
        chk = entry["results"]["checks"]["tracking"]
        amp = chk["steady_amplitude"]
        exact = alpha / math.sqrt(1 + alpha * alpha)
        ok &= abs(amp - exact) <= 1e-3 and chk["max_ratio"] <= 1.0
        parts.append(f"a={alpha}: amp {amp:.5f} vs {exact:.5f}, err/bound {chk['max_ratio']:.3f}")
    ok &= elapsed < 10.0
    assert verdict(6, ok, "; ".join(parts) + f"; {elapsed:.2f}s < 10s")


# -- 7 -----------------------------------------------------------------------------


def test_criterion_07_certificate_pipeline(suite_runs, verdict):
    _, results = suite_runs
    entry, secs = _experiment(results, "ackley", "escape")
    r = entry["results"]
    modes = [m for m in ("uniform", "averaged") if (r.get(f"w_hat_{m}") or 0) > 0 and r.get(f"invariance_ok_{m}")]
    ok = (
        entry["status"] == "ok"
        and r["c_hat"] > 0
        and bool(modes)
        and 0.2 <= r["alpha_max"] <= 0.5
        and r["escape_valid"]
        and secs < 60.0
    )
    assert verdict(
        7, ok,
        f"c_hat={r['c_hat']:.3g} (ref 20); w_hat uniform={r['w_hat_uniform']:.3g} averaged={r['w_hat_averaged']:.3g} "
        f"(ref 1), invariance ok in {modes}; alpha_max={r['alpha_max']:.3f} (ref 0.29); "
        f"escape valid by mode {r['escape_by_mode']}; {secs:.1f}s < 60s",
    )


# -- 8 -----------------------------------------------------------------------------


def test_criterion_08_basin_study(suite_runs, verdict):
    _, results = suite_runs
    entry, secs = _experiment(results, "ackley", "basin")
    r = entry["results"]
    frac = r["fractions"].get("global", 0.0)
    ok = r["n_inits"] == 50 and frac == 1.0 and secs < 120.0
    assert verdict(
        8, ok, f"{frac:.0%} of {r['n_inits']} runs within 0.5 of global for t >= 5pi "
        f"(worst {r['worst_distance']}); {secs:.1f}s < 120s",
    )


# -- 9 -----------------------------------------------------------------------------


def test_criterion_09_certificate_consistency(suite_runs, verdict):
    _, results = suite_runs
    checked, ok, parts = 0, True, []
    for name, res in results.items():
        for e in res.summary["experiments"]:
            if e["kind"] != "certify" or e["status"] != "ok":
                continue
            full = json.loads(res.files[f"{e['id']}/certificates.json"])
            checks = full.get("checks", {})
            if full.get("tracking", {}).get("valid"):
                chk = checks["tracking"]
                checked += 1
                ok &= chk["max_ratio"] <= 1.05
                parts.append(f"{name}/{e['id']} tracking err/bound {chk['max_ratio']:.3f}")
            if full.get("jump_uniform", {}).get("valid"):
                chk = checks["jump_uniform"]
                checked += 1
                ok &= chk["all_reached"]
                parts.append(
                    f"{name}/{e['id']} uniform jump {chk['runs']} starts, worst {chk['worst_final_distance']:.3g} "
                    f"<= {chk['target_radius']:.3g}"
                )
    ok &= checked > 0
    assert verdict(9, ok, f"{checked} valid certificates checked: " + "; ".join(parts))


# -- 10 ----------------------------------------------------------------------------


def test_criterion_10_determinism(suite_runs, verdict):
    (a, b), _ = suite_runs
    ta, tb = _tree(a), _tree(b)
    differing = sorted(k for k in set(ta) | set(tb) if ta.get(k) != tb.get(k))
    ok = not differing and len(ta) > 0
    assert verdict(10, ok, f"{len(ta)} output files compared byte for byte (timing.json excluded); differing: {differing or 'none'}")
