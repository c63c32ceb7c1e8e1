import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escapeflow.errors import InvalidParameterError, PreconditionError
from escapeflow.flow import (
    FlowConfig,
    TrajectoryRecord,
    convergence_experiment,
    forward_euler_track,
    frozen_flow_classify,
    integrate_pode,
    integrate_pode_batch,
    local_minimum_refine,
    sequential_proximal_solve,
    trace_minimum_trajectory,
)
from escapeflow.problem import (
    MinTrajectory,
    ProblemDefinition,
    ackley_trajectories,
    builtin_ackley_constrained,
    builtin_quartic,
    builtin_tracking_quadratic,
    quartic_trajectories,
    tracking_quadratic_solution,
)

ACKLEY = builtin_ackley_constrained()
TQ = builtin_tracking_quadratic()


def static_quadratic(n=1):
    return ProblemDefinition(n=n, m=0, f=lambda x, t: 0.5 * float(x @ x), grad_f=lambda x, t: np.array(x, float))


# -- configuration ------------------------------------------------------------


def test_config_guards():
    with pytest.raises(InvalidParameterError):
        FlowConfig(alpha=0.0)
    with pytest.raises(InvalidParameterError):
        FlowConfig(alpha=1.0, dt=0.0)
    with pytest.raises(InvalidParameterError):
        FlowConfig(alpha=1.0, integrator="leapfrog")
    with pytest.raises(InvalidParameterError):
        FlowConfig(alpha=1.0, containment_radius=1.0)


def test_schedule_uses_value_at_step_start():
    cfg = FlowConfig(alpha_schedule=[(2.0, 0.1), (0.0, 1.0)])
    assert cfg.alpha_at(0.0) == 1.0
    assert cfg.alpha_at(1.999) == 1.0
    assert cfg.alpha_at(2.0) == 0.1


# -- integration --------------------------------------------------------------


def test_exponential_decay():
    rec = integrate_pode(static_quadratic(), [1.0], 0.0, 1.0, FlowConfig(alpha=1.0, dt=1e-3))
    assert rec.final_state[0] == pytest.approx(math.exp(-1.0), abs=1e-6)
    assert rec.t[-1] == pytest.approx(1.0)


def test_infeasible_start_is_rejected():
    with pytest.raises(PreconditionError):
        integrate_pode(ACKLEY, [5.0, 5.0], 0.0, 1.0, FlowConfig(alpha=0.2))


@pytest.mark.parametrize(
    "alpha,b,target",
    [(0.3, 5.0, "global"), (0.1, 5.0, "local-1"), (0.1, 10.0, "global")],
)
def test_quartic_outcomes(alpha, b, target):
    p = builtin_quartic(b)
    traj = {h.label: h for h in quartic_trajectories(b)}
    rec = integrate_pode(p, [-2.0], 0.0, 4 * math.pi, FlowConfig(alpha=alpha, dt=1e-3, record_every=100))
    t_end = rec.t[-1]
    assert abs(rec.final_state[0] - traj[target].h(t_end)[0]) <= 0.5


def test_large_inertia_tracks_nothing():
    # over the last period the flow strays further than 1 from both branches
    p = builtin_quartic(5.0)
    rec = integrate_pode(p, [-2.0], 0.0, 4 * math.pi, FlowConfig(alpha=0.8, dt=1e-3, record_every=100))
    tail = rec.times >= 2 * math.pi
    for h in quartic_trajectories(5.0):
        assert rec.distance_to(h)[tail].max() > 1.0


def test_ackley_feasibility_with_retraction():
    _, h2 = ackley_trajectories()
    x0 = h2.h(0.0) + np.array([0.5 * 1.5**2, 1.5])
    rec = integrate_pode(ACKLEY, x0, 0.0, 1.0, FlowConfig(alpha=0.2, dt=1e-3))
    assert rec.max_feas <= 1e-8
    assert all(e.kind == "retraction" for e in rec.events)


def test_containment_monitoring_logs_violations():
    p = builtin_quartic(5.0)
    h1, _ = quartic_trajectories(5.0)
    cfg = FlowConfig(alpha=0.3, dt=1e-3, containment_radius=0.5, reference=h1, record_every=50)
    rec = integrate_pode(p, [-2.0], 0.0, 4.0, cfg)
    assert rec.events_of("containment-violation")


def test_batch_integration_matches_single_runs():
    p = builtin_quartic(5.0)
    cfg = FlowConfig(alpha=0.3, dt=1e-3, record_every=200)
    X0 = np.array([[-2.0], [0.5], [1.0]])
    recs = integrate_pode_batch(p, X0, 0.0, 2.0, cfg)
    for x0, rb in zip(X0, recs):
        rs = integrate_pode(p, x0, 0.0, 2.0, cfg)
        np.testing.assert_allclose(rb.states, rs.states, rtol=1e-12, atol=1e-12)


def test_rk4_is_fourth_order():
    alpha = 0.5
    errs = []
    for dt in (0.1, 0.05, 0.025):
        rec = integrate_pode(TQ, [0.0], 0.0, 2.0, FlowConfig(alpha=alpha, dt=dt))
        exact = tracking_quadratic_solution(rec.times, 0.0, alpha)
        errs.append(float(np.max(np.abs(rec.states[:, 0] - exact))))
    assert errs[0] / errs[1] >= 8 and errs[1] / errs[2] >= 8


def test_determinism():
    p = builtin_quartic(5.0)
    cfg = FlowConfig(alpha=0.3, dt=1e-3, record_every=10)
    a = integrate_pode(p, [-2.0], 0.0, 3.0, cfg).to_csv()
    b = integrate_pode(p, [-2.0], 0.0, 3.0, cfg).to_csv()
    assert a == b


@settings(max_examples=25, deadline=None)
@given(xs=st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=4), n=st.integers(1, 3))
def test_csv_round_trip(xs, n):
    rec = TrajectoryRecord(n=n)
    for i, v in enumerate(xs):
        rec.t.append(float(i) / 3.0)
        rec.x.append(np.full(n, v) / 7.0)
        rec.feas.append(abs(v) * 1e-17)
        rec.obj.append(v / 3.0)
    back = TrajectoryRecord.from_csv(rec.to_csv())
    assert back.t == rec.t
    np.testing.assert_array_equal(back.states, rec.states)
    assert back.feas == rec.feas and back.obj == rec.obj


# -- frozen-time classification ---------------------------------------------


def test_frozen_classification_on_quartic():
    p = builtin_quartic(0.0)
    minima = quartic_trajectories(0.0)
    assert frozen_flow_classify(p, 0.0, [-3.0], minima) == "local-1"
    assert frozen_flow_classify(p, 0.0, [0.5], minima) == "global"
    assert frozen_flow_classify(p, 0.0, [-1.2], minima) == "local-1"
    assert frozen_flow_classify(p, 0.0, [-0.8], minima) == "global"


def test_frozen_classification_of_the_minimum_itself():
    for p, minima in ((builtin_quartic(5.0), quartic_trajectories(5.0)), (ACKLEY, ackley_trajectories())):
        for t in np.linspace(0, 2 * math.pi, 7):
            for h in minima:
                assert frozen_flow_classify(p, t, h.h(t), minima) == h.label


def test_frozen_classification_on_ackley():
    minima = ackley_trajectories()
    _, h2 = minima
    t = 0.4
    x = h2.h(t) + np.array([0.5 * 0.2**2, 0.2])
    assert frozen_flow_classify(ACKLEY, t, x, minima) == "global"


# -- refinement and tracing ---------------------------------------------------


def test_refine_minimum_and_saddle():
    p = builtin_quartic(0.0)
    m = local_minimum_refine(p, 0.0, [-2.2])
    assert m.x[0] == pytest.approx(-2.0, abs=1e-10)
    assert m.min_eig == pytest.approx(3.0, abs=1e-6)
    s = local_minimum_refine(p, 0.0, [-1.1])
    assert s.x[0] == pytest.approx(-1.0, abs=1e-10)
    assert s.min_eig == pytest.approx(-2.0, abs=1e-6)
    assert not s.is_minimum


def test_refine_ackley_global():
    _, h2 = ackley_trajectories()
    t = 0.7
    m = local_minimum_refine(ACKLEY, t, h2.h(t) + np.array([0.02, 0.05]))
    np.testing.assert_allclose(m.x, h2.h(t), atol=1e-8)
    assert m.is_minimum


def test_trace_quartic():
    p = builtin_quartic(5.0)
    ts = np.linspace(0, 2 * math.pi, 401)
    h = trace_minimum_trajectory(p, ts, [-2.0], label="local-1")
    assert max(abs(h.values[k, 0] - (-2 + 5 * math.sin(t))) for k, t in enumerate(ts)) <= 1e-8


def test_trace_static_problem_is_constant():
    ts = np.linspace(0, 1, 11)
    h = trace_minimum_trajectory(static_quadratic(2), ts, [0.3, -0.2])
    assert np.abs(h.values - h.values[0]).max() <= 1e-14
    assert np.abs(h.values).max() <= 1e-10


def test_trace_ackley_global():
    ts = np.linspace(0, 2 * math.pi, 801)
    _, h2 = ackley_trajectories()
    h = trace_minimum_trajectory(ACKLEY, ts, h2.h(0.0))
    err = max(np.linalg.norm(h.values[k] - h2.h(t)) for k, t in enumerate(ts))
    assert err <= 1e-6


def test_trace_rejects_saddle_seed():
    with pytest.raises(InvalidParameterError):
        trace_minimum_trajectory(builtin_quartic(0.0), [0.0, 0.1], [-1.0])


# -- discrete solvers ---------------------------------------------------------


def test_proximal_static_problem_stays_put():
    p = static_quadratic(2)
    rec = sequential_proximal_solve(p, [0.0, 0.0], np.linspace(0, 1, 21), 0.5)
    np.testing.assert_allclose(rec.states, 0.0, atol=1e-8)


def test_proximal_tracks_the_flow():
    grid = np.linspace(0, 2 * math.pi, 6284)
    rec = sequential_proximal_solve(TQ, [0.0], grid, 0.1)
    exact = tracking_quadratic_solution(rec.times, 0.0, 0.1)
    assert np.max(np.abs(rec.states[:, 0] - exact)) <= 2e-3


def test_proximal_jumps_on_quartic():
    p = builtin_quartic(5.0)
    grid = np.arange(0, 4 * math.pi, 1e-2)
    rec = sequential_proximal_solve(p, [-2.0], grid, 0.3)
    _, h2 = quartic_trajectories(5.0)
    assert abs(rec.final_state[0] - h2.h(rec.t[-1])[0]) <= 0.5


def test_euler_static_point_is_constant():
    rec = forward_euler_track(static_quadratic(), [0.0], np.linspace(0, 1, 11), 0.3)
    assert np.all(rec.states == 0.0)


def test_euler_error_is_first_order():
    devs = []
    for dtau in (2e-3, 1e-3):
        grid = np.arange(0, round(2 * math.pi / dtau) + 1) * dtau
        rec = forward_euler_track(TQ, [0.0], grid, 0.1)
        devs.append(float(np.max(np.abs(rec.states[:, 0] - tracking_quadratic_solution(grid, 0.0, 0.1)))))
    assert devs[1] <= 5e-3
    assert devs[0] / devs[1] == pytest.approx(2.0, rel=0.25)


def test_convergence_table_static_problem():
    p = static_quadratic()
    tab = convergence_experiment(p, [0.0], 0.5, 1.0, [0.1, 0.05])
    assert max(tab.proximal_error + tab.euler_error) <= 1e-12


def test_convergence_table_quartic_classification():
    p = builtin_quartic(5.0)
    tab = convergence_experiment(p, [-2.0], 0.3, 4.0, [2e-2, 1e-2], trajectories=quartic_trajectories(5.0))
    assert tab.classification_agrees


def test_convergence_requires_nesting():
    with pytest.raises(InvalidParameterError):
        convergence_experiment(TQ, [0.0], 0.1, 1.0, [0.3, 0.07])
