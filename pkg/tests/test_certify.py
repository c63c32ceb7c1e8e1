import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from escapeflow.certify import (
    Ball,
    Box,
    RAProbeConfig,
    check_dominance,
    detect_jumps,
    equilibrium_branch,
    escape_certificate,
    estimate_one_point_convexity,
    jump_certificate,
    jump_certificate_averaged,
    region_from_dict,
    sequential_jump_report,
    shallowness_check,
    tracking_certificate,
    uniform_jump_interval,
)
from escapeflow.errors import BranchLossError, CertificateRefusal, InvalidParameterError
from escapeflow.flow import FlowConfig, TrajectoryRecord, integrate_pode
from escapeflow.problem import (
    BatchEvaluators,
    MinTrajectory,
    ProblemDefinition,
    ackley_trajectories,
    builtin_ackley_constrained,
    builtin_quartic,
    builtin_tracking_quadratic,
    quartic_trajectories,
    tracking_quadratic_solution,
    tracking_quadratic_trajectories,
)

ACKLEY = builtin_ackley_constrained()
A_H1, A_H2 = ackley_trajectories()
TQ = builtin_tracking_quadratic()
(TQ_H,) = tracking_quadratic_trajectories()


def static_quadratic(n=2):
    """f = |x|^2 / 2, time invariant, minimum at the origin."""
    return ProblemDefinition(
        n=n, m=0, f=lambda x, t: 0.5 * float(x @ x), grad_f=lambda x, t: np.array(x, float),
        batch=BatchEvaluators(f=lambda X, t: 0.5 * np.einsum("kn,kn->k", X, X), grad_f=lambda X, t: np.array(X)),
    )


def constant(label, point):
    point = np.asarray(point, float)
    return MinTrajectory.analytic(label, lambda t: point.copy(), lambda t: np.zeros_like(point))


ORIGIN = constant("origin", [0.0, 0.0])


# -- regions --------------------------------------------------------------------


def test_regions_round_trip():
    box = region_from_dict({"box": {"lo": [-1, -2], "hi": [1, 2]}})
    assert isinstance(box, Box) and box.contains(np.array([[0.0, 1.9]]))[0]
    assert not box.contains(np.array([[0.0, 2.1]]))[0]
    assert region_from_dict(box.to_dict()).to_dict() == box.to_dict()
    ball = region_from_dict({"ball": {"center": [0, 0], "radius": 1}})
    assert ball.contains_ball([0.2, 0.0], 0.8) and not ball.contains_ball([0.2, 0.0], 0.81)
    with pytest.raises(InvalidParameterError):
        region_from_dict({"cube": {}})


# -- one-point strong convexity -----------------------------------------------------


def test_convexity_modulus_of_a_quadratic_is_one():
    cert = estimate_one_point_convexity(TQ, TQ_H, 0.7, np.linspace(0, 2 * math.pi, 5), n_samples=100)
    assert cert.c_hat == pytest.approx(1.0, abs=1e-12)
    assert cert.valid


def test_convexity_of_quartic_side_minimum_matches_scan():
    # ratio f'(-2 + e) / e = (e - 3)(e - 1) on [-0.5, 0.5], scanned at 1e-4
    e = np.arange(-0.5, 0.5 + 1e-12, 1e-4)
    e = e[np.abs(e) > 1e-9]
    scan = float(np.min((e - 3) * (e - 1)))
    h1, _ = quartic_trajectories(0.0)
    cert = estimate_one_point_convexity(builtin_quartic(0.0), h1, 0.5, [0.0], n_samples=400)
    assert cert.c_hat >= scan - 1e-9
    assert cert.c_hat == pytest.approx(scan, abs=1e-3)


def test_convexity_of_ackley_global_is_positive():
    cert = estimate_one_point_convexity(ACKLEY, A_H2, 0.5, np.linspace(0, math.pi / 8, 5), n_samples=200, reference=20)
    assert cert.valid and cert.c_hat > 0
    d = cert.to_dict()
    assert d["reference_c"] == 20 and d["valid"]


@pytest.mark.parametrize(
    "p,h",
    [(builtin_quartic(5.0), quartic_trajectories(5.0)[0]), (ACKLEY, A_H2)],
    ids=["quartic", "ackley"],
)
def test_convexity_estimate_grows_as_radius_shrinks(p, h):
    ts = np.linspace(0, 1, 3)
    c = [estimate_one_point_convexity(p, h, r, ts, n_samples=300, rng_seed=4).c_hat for r in (0.5, 0.3, 0.1)]
    assert c[0] <= c[1] <= c[2]


# -- shallowness ----------------------------------------------------------------------


def test_constant_trajectory_is_never_shallow():
    rep = shallowness_check(static_quadratic(), ORIGIN, 0.1, 0.0, 0.5, RAProbeConfig(n_times=3, bisection_steps=4))
    assert rep.epsilon == 0.0 and not rep.shallow


def test_deep_slow_well_is_not_shallow():
    w = 0.01
    p = ProblemDefinition(
        n=1, m=0, f=lambda x, t: 0.5 * (x[0] - w * math.sin(t)) ** 2,
        grad_f=lambda x, t: np.array([x[0] - w * math.sin(t)]),
    )
    h = MinTrajectory.analytic("h", lambda t: np.array([w * math.sin(t)]), lambda t: np.array([w * math.cos(t)]))
    rep = shallowness_check(p, h, 0.1, 0.0, 0.5, RAProbeConfig(n_times=3, bisection_steps=6))
    assert rep.reliable and not rep.shallow
    assert rep.epsilon <= 0.01 + 1e-12


def test_shallowness_report_on_fast_side_branch():
    h1, _ = quartic_trajectories(10.0)
    rep = shallowness_check(builtin_quartic(10.0), h1, 0.1, math.pi / 2 - 0.25, 0.5,
                            RAProbeConfig(n_times=5, bisection_steps=8))
    assert rep.reliable
    assert rep.epsilon > 0 and rep.ra_radius > 0
    assert set(rep.to_dict()) >= {"shallow", "epsilon", "E_alpha", "lip_hdot", "ra_radius"}


# -- equilibrium branch -----------------------------------------------------------------


def test_static_branch_is_zero():
    br = equilibrium_branch(static_quadratic(), ORIGIN, 0.3, np.linspace(0, 1, 5), 0.5)
    assert br.rho == 0.0


def test_tracking_quadratic_branch_offset():
    alpha = 0.2
    ts = np.linspace(0, 2 * math.pi, 33)
    br = equilibrium_branch(TQ, TQ_H, alpha, ts, 1.0)
    np.testing.assert_allclose(br.ebar[:, 0], -alpha * np.cos(ts), atol=1e-9)
    assert br.rho == pytest.approx(alpha, abs=1e-9)


def test_averaged_branch_is_a_single_vector():
    alpha = 0.3
    nodes = np.linspace(0, math.pi / 4, 65)
    br = equilibrium_branch(TQ, TQ_H, alpha, nodes, 1.0, mode="averaged")
    # the averaged field is e + alpha * mean(cos), averaged by trapezoid
    c = np.cos(nodes)
    avg = float(np.sum(0.5 * (c[1:] + c[:-1]) * np.diff(nodes)) / (nodes[-1] - nodes[0]))
    assert br.ebar.shape[0] == 1
    assert br.ebar[0, 0] == pytest.approx(-alpha * avg, abs=1e-9)


def test_branch_outside_radius_is_lost():
    with pytest.raises(BranchLossError):
        equilibrium_branch(TQ, TQ_H, 0.5, np.linspace(0, 1, 5), 0.3)


# -- domination and jumps -----------------------------------------------------------


def static_dominance(alpha=0.2, t2=1.0, start=(1.5, 0.0), radius=2.0, mode="uniform", r2=0.5):
    return check_dominance(
        static_quadratic(), constant("start", start), ORIGIN, alpha, 0.0, t2, Ball([0.0, 0.0], radius), 0.05,
        n_samples=100, mode=mode, r2=r2, n_trajectories=100, dt=5e-3,
    )


def test_static_dominance_is_exact():
    dom = static_dominance()
    assert dom.valid and dom.rho == 0.0
    assert dom.w_hat == pytest.approx(1.0, abs=1e-12)
    assert dom.sign_violations == 0 and dom.escaped_trajectories == 0


def test_dominance_refuses_small_region():
    with pytest.raises(CertificateRefusal):
        static_dominance(start=(1.99, 0.0))


def test_two_wells_are_not_dominated():
    p = builtin_quartic(5.0)
    h1, h2 = quartic_trajectories(5.0)
    dom = check_dominance(p, h1, h2, 0.1, -0.2, 0.2, Box([-3.5], [0.5]), 0.1, n_samples=200, r2=0.5)
    assert not dom.valid
    assert dom.w_hat <= 0


def test_tiny_ball_inherits_convexity():
    dom = check_dominance(ACKLEY, A_H2, A_H2, 0.2, 0.0, 0.1, Ball([0.0, 0.0], 0.05), 0.01,
                          n_samples=100, r2=0.5, n_times=5)
    assert dom.w_hat > 0


def test_uniform_interval_formula():
    alpha, theta, w, rho, r2, dist = 0.2, 0.2, 1.0, 0.01, 0.5, 2.8
    first = alpha * rho / ((r2 - rho) * theta * w)
    second = alpha * math.log(dist / (r2 - rho)) / ((1 - theta) * w)
    assert uniform_jump_interval(alpha, rho, r2, w, theta, dist) == pytest.approx(max(first, second), rel=1e-15)


def test_uniform_interval_with_worked_constants():
    # the worked constants need more than pi/8 at r2 = 0.5 but not at r2 = 1
    dist = float(np.linalg.norm(A_H1.h(0.0) - A_H2.h(0.0))) + 0.04
    assert uniform_jump_interval(0.2, 0.0, 0.5, 1.0, 0.2, dist) > math.pi / 8
    assert uniform_jump_interval(0.2, 0.0, 1.0, 1.0, 0.2, dist) < math.pi / 8


def test_uniform_interval_limits():
    assert uniform_jump_interval(0.2, 0.0, 0.5, 1.0, 0.2, 0.0) == 0.0
    near_one = uniform_jump_interval(0.2, 0.1, 0.5, 1.0, 1 - 1e-12, 2.0)
    assert near_one > 1e9
    with pytest.raises(InvalidParameterError):
        uniform_jump_interval(0.2, 0.1, 0.5, 1.0, 1.0, 2.0)
    assert uniform_jump_interval(0.2, 0.6, 0.5, 1.0, 0.2, 2.0) == math.inf


def test_jump_certificates_on_static_problem():
    dom = static_dominance(t2=1.0)
    jump = jump_certificate(dom)
    need = 0.2 * math.log(float(np.max(np.linalg.norm(dom.dv_offsets, axis=1))) / 0.5) / 0.8
    assert jump.required_interval == pytest.approx(need, rel=1e-12)
    assert jump.valid
    with pytest.raises(CertificateRefusal):
        jump_certificate_averaged(dom)
    dom_av = static_dominance(t2=1.0, mode="averaged")
    jav = jump_certificate_averaged(dom_av)
    assert jav.valid and jav.beta2 == pytest.approx(1.0)
    assert float(np.max(jav.delta1)) <= 1e-9 and float(np.max(jav.delta2)) <= 1e-9
    with pytest.raises(CertificateRefusal):
        jump_certificate(dom_av)


def test_invalid_dominance_is_refused():
    p = builtin_quartic(5.0)
    h1, h2 = quartic_trajectories(5.0)
    dom = check_dominance(p, h1, h2, 0.1, -0.2, 0.2, Box([-3.5], [0.5]), 0.1, n_samples=100, r2=0.5)
    with pytest.raises(CertificateRefusal):
        jump_certificate(dom)


@settings(max_examples=8, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(alpha=st.floats(0.1, 0.5), t2=st.floats(0.2, 2.0), start=st.floats(0.6, 1.8))
def test_averaged_and_uniform_agree_without_time_variation(alpha, t2, start):
    # with U = e, no drift and theta small the two tests share one threshold
    dist_max = start + 0.05
    threshold = alpha * math.log(dist_max / 0.5)
    if abs(t2 - threshold) < 0.05 * threshold + 1e-3:
        return
    dom_u = static_dominance(alpha=alpha, t2=t2, start=(start, 0.0))
    dom_a = static_dominance(alpha=alpha, t2=t2, start=(start, 0.0), mode="averaged")
    u = jump_certificate(dom_u, theta=0.01)
    a = jump_certificate_averaged(dom_a)
    assert u.valid == a.valid


def test_averaged_gap_of_tracking_quadratic():
    # |p| = |cos t - mean(cos)| exactly: delta1 = 0 and delta2 at each node
    alpha = 0.3
    h1 = MinTrajectory.analytic("shifted", lambda t: np.array([math.sin(t) + 0.8]), lambda t: np.array([math.cos(t)]))
    dom = check_dominance(TQ, h1, TQ_H, alpha, 0.0, math.pi / 4, Ball([0.0], 1.5), 0.05, n_samples=100,
                          mode="averaged", r2=0.5, n_trajectories=100, dt=5e-3)
    assert dom.valid
    jav = jump_certificate_averaged(dom)
    nodes = dom.nodes
    c = np.cos(nodes)
    avg = float(np.sum(0.5 * (c[1:] + c[:-1]) * np.diff(nodes)) / (nodes[-1] - nodes[0]))
    assert float(np.max(jav.delta1)) <= 1e-6
    np.testing.assert_allclose(jav.delta2, np.abs(c - avg), atol=1e-6)


# -- tracking -------------------------------------------------------------------------


def test_static_tracking_has_no_alpha_limit():
    conv = estimate_one_point_convexity(static_quadratic(), ORIGIN, 0.5, [0.0, 1.0], n_samples=50)
    tr = tracking_certificate(static_quadratic(), ORIGIN, 5.0, conv, np.linspace(0, 1, 5))
    assert tr.alpha_max == math.inf and tr.valid
    assert tr.to_dict()["alpha_max"] is None and tr.to_dict()["alpha_max_unbounded"]


@pytest.mark.parametrize("alpha", [0.05, 0.1, 0.2])
def test_tracking_bound_covers_the_closed_form(alpha):
    ts = np.linspace(0, 2 * math.pi, 129)
    conv = estimate_one_point_convexity(TQ, TQ_H, 1.0, ts[::16], n_samples=50)
    tr = tracking_certificate(TQ, TQ_H, alpha, conv, ts)
    assert tr.valid and tr.alpha_max == pytest.approx(1.0, rel=1e-9)
    assert tr.ultimate_bound == pytest.approx(alpha, rel=1e-9)
    t = np.linspace(0, 2 * math.pi, 2001)
    err = np.abs(tracking_quadratic_solution(t, 0.5, alpha) - np.sin(t))
    assert np.all(err <= tr.predicted_error(t, e1_norm=0.5, t1=0.0) + 1e-12)
    assert alpha / math.sqrt(1 + alpha**2) <= tr.ultimate_bound


def test_tracking_refuses_other_trajectory():
    conv = estimate_one_point_convexity(TQ, TQ_H, 1.0, [0.0], n_samples=20)
    other = MinTrajectory.analytic("other", TQ_H.h, TQ_H.hdot)
    with pytest.raises(CertificateRefusal):
        tracking_certificate(TQ, other, 0.1, conv, [0.0, 1.0])


def test_tracking_too_much_inertia_is_invalid():
    ts = np.linspace(0, 2 * math.pi, 65)
    conv = estimate_one_point_convexity(TQ, TQ_H, 1.0, ts[::16], n_samples=50)
    assert not tracking_certificate(TQ, TQ_H, 1.5, conv, ts).valid


# -- escape and chains ------------------------------------------------------------------


def test_escape_is_a_conjunction():
    dom = static_dominance()
    jump = jump_certificate(dom)
    conv = estimate_one_point_convexity(static_quadratic(), ORIGIN, 0.5, [0.0], n_samples=20)
    tr = tracking_certificate(static_quadratic(), ORIGIN, 0.2, conv, [0.0, 1.0])
    assert escape_certificate(jump, tr).valid
    bad = tracking_certificate(static_quadratic(), ORIGIN, 0.2, conv, [0.0, 1.0], initial_error=0.6)
    assert not bad.valid
    assert not escape_certificate(jump, bad).valid
    conv_wide = estimate_one_point_convexity(static_quadratic(), ORIGIN, 1.0, [0.0], n_samples=20)
    with pytest.raises(CertificateRefusal):
        escape_certificate(jump, tracking_certificate(static_quadratic(), ORIGIN, 0.2, conv_wide, [0.0, 1.0]))
    with pytest.raises(CertificateRefusal):
        escape_certificate(jump, tracking_certificate(static_quadratic(), ORIGIN, 0.3, conv, [0.0, 1.0]))


def test_sequential_chain():
    p = static_quadratic()
    a = constant("a", [1.5, 0.0])
    b = constant("b", [0.0, 0.0])
    kw = dict(n_samples=50, r2=0.5, n_trajectories=100, dt=5e-3)
    j1 = jump_certificate(check_dominance(p, a, b, 0.2, 0.0, 1.0, Ball([0.0, 0.0], 2.0), 0.05, **kw))
    j2 = jump_certificate(check_dominance(p, b, b, 0.2, 1.0, 2.0, Ball([0.0, 0.0], 2.0), 0.05, **kw))
    rep = sequential_jump_report([j1, j2])
    assert rep.valid and rep.chain == ["a", "b", "b"]
    assert not sequential_jump_report([j2, j1]).valid


# -- jump detection ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def quartic_runs():
    p = builtin_quartic(5.0)
    out = {}
    for alpha in (0.3, 0.1):
        out[alpha] = integrate_pode(p, [-2.0], 0.0, 4 * math.pi, FlowConfig(alpha=alpha, dt=1e-3, record_every=20))
    return p, out


def test_single_jump_near_expected_time(quartic_runs):
    p, runs = quartic_runs
    ev = detect_jumps(p, runs[0.3], quartic_trajectories(5.0))
    assert len(ev) == 1
    assert (ev[0].from_label, ev[0].to_label) == ("local-1", "global")
    assert 0.7 * math.pi <= ev[0].t <= 1.0 * math.pi


def test_no_jump_with_small_inertia(quartic_runs):
    p, runs = quartic_runs
    assert detect_jumps(p, runs[0.1], quartic_trajectories(5.0)) == []


def test_no_jump_on_the_trajectory_itself():
    p = builtin_quartic(5.0)
    _, h2 = quartic_trajectories(5.0)
    rec = TrajectoryRecord(n=1)
    for t in np.linspace(0, 4 * math.pi, 300):
        rec.append(p, t, h2.h(t))
    assert detect_jumps(p, rec, quartic_trajectories(5.0)) == []


@settings(max_examples=4, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(order=st.permutations([0, 1]))
def test_detection_ignores_trajectory_order(quartic_runs, order):
    p, runs = quartic_runs
    minima = quartic_trajectories(5.0)
    base = detect_jumps(p, runs[0.3], minima, max_points=200)
    again = detect_jumps(p, runs[0.3], [minima[i] for i in order], max_points=200)
    assert [e.to_dict() for e in base] == [e.to_dict() for e in again]
