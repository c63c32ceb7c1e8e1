"""Integrators and discrete solvers for the inertial projected gradient flow.

Continuous time:   x' = -(1/alpha) P grad f - Q g'
Sequential:        x_i = argmin f(x, tau_i) + alpha/(2 dtau) |x - x_{i-1}|^2  s.t. g(x, tau_i) = 0
Online tracker:    x_i = x_{i-1} - dtau ((1/alpha) P grad f + Q g')  at (x_{i-1}, tau_{i-1})
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import (
    BranchLossError,
    ConvergenceError,
    EvaluationError,
    FlowAborted,
    InvalidParameterError,
    PreconditionError,
    RankDeficiencyError,
    RetractionError,
)
from .geometry import RANK_TOL, _Gram, evaluate_geometry, pode_rhs, projected_gradient, retract, tangent_basis
from .problem import MinTrajectory, ProblemDefinition, grad_f_t, hessian_f, hessian_g, jacobian_t

INTEGRATORS = ("rk4", "euler")
RETRACTIONS = ("none", "newton")


def fmt_float(v) -> str:
    """17 significant digits, enough to round-trip a double."""
    return format(float(v), ".17g")


# -- configuration and records ------------------------------------------------


@dataclass
class FlowConfig:
    """Settings for :func:`integrate_pode`.

    Give either ``alpha`` or ``alpha_schedule``, a list of ``(t_start, alpha)``
    pairs read as a piecewise-constant map. Within one step the value at the
    start of the step is used.
    """

    alpha: Optional[float] = None
    alpha_schedule: Optional[Sequence] = None
    dt: float = 1e-3
    integrator: str = "rk4"
    feas_tol: float = 1e-8
    retraction: str = "newton"
    max_time: Optional[float] = None
    containment_radius: Optional[float] = None
    reference: Optional[MinTrajectory] = None
    record_every: int = 1

    def __post_init__(self):
        if self.alpha_schedule is not None:
            sched = sorted((float(a), float(b)) for a, b in self.alpha_schedule)
            if not sched:
                raise InvalidParameterError("alpha_schedule is empty")
            if any(b <= 0 for _, b in sched):
                raise InvalidParameterError("alpha_schedule values must be positive")
            self.alpha_schedule = sched
            if self.alpha is None:
                self.alpha = sched[0][1]
        if self.alpha is None or not self.alpha > 0:
            raise InvalidParameterError(f"alpha must be positive, got {self.alpha}")
        if not self.dt > 0:
            raise InvalidParameterError(f"dt must be positive, got {self.dt}")
        if not self.feas_tol > 0:
            raise InvalidParameterError(f"feas_tol must be positive, got {self.feas_tol}")
        if self.integrator not in INTEGRATORS:
            raise InvalidParameterError(f"integrator must be one of {INTEGRATORS}")
        if self.retraction not in RETRACTIONS:
            raise InvalidParameterError(f"retraction must be one of {RETRACTIONS}")
        if self.record_every < 1:
            raise InvalidParameterError("record_every must be >= 1")
        if self.containment_radius is not None and self.reference is None:
            raise InvalidParameterError("containment monitoring needs a reference trajectory")

    def alpha_at(self, t: float) -> float:
        if self.alpha_schedule is None:
            return self.alpha
        a = self.alpha_schedule[0][1]
        for t_start, val in self.alpha_schedule:
            if t >= t_start:
                a = val
            else:
                break
        return a


@dataclass
class FlowEvent:
    t: float
    kind: str
    detail: dict

    def to_dict(self) -> dict:
        return {"t": self.t, "kind": self.kind, "detail": self.detail}


@dataclass
class TrajectoryRecord:
    """Time-stamped samples (t, x, |g(x,t)|, f(x,t)) plus an event log."""

    n: int
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    feas: list = field(default_factory=list)
    obj: list = field(default_factory=list)
    events: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, p: ProblemDefinition, t, x):
        if self.t and not t > self.t[-1]:
            raise ValueError(f"record times must increase: {t} after {self.t[-1]}")
        self.t.append(float(t))
        self.x.append(np.array(x, dtype=float))
        self.feas.append(p.constraint_residual(x, t))
        self.obj.append(float(p.f(x, t)))

    def log(self, t, kind, **detail):
        self.events.append(FlowEvent(float(t), kind, detail))

    def __len__(self):
        return len(self.t)

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.t)

    @property
    def states(self) -> np.ndarray:
        return np.asarray(self.x).reshape(len(self.x), self.n)

    @property
    def final_state(self) -> np.ndarray:
        return self.x[-1]

    @property
    def max_feas(self) -> float:
        return max(self.feas) if self.feas else 0.0

    def events_of(self, kind) -> list:
        return [e for e in self.events if e.kind == kind]

    def distance_to(self, traj: MinTrajectory) -> np.ndarray:
        return np.array([np.linalg.norm(x - traj.h(t)) for t, x in zip(self.t, self.x)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["t"] + [f"x{i + 1}" for i in range(self.n)] + ["feas", "obj"])
        for t, x, fe, ob in zip(self.t, self.x, self.feas, self.obj):
            w.writerow([fmt_float(t)] + [fmt_float(v) for v in x] + [fmt_float(fe), fmt_float(ob)])
        return buf.getvalue()

    def events_json(self) -> str:
        doc = {"meta": self.meta, "events": [e.to_dict() for e in self.events]}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, text: str) -> "TrajectoryRecord":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        n = len(header) - 3
        rec = cls(n=n)
        for row in body:
            vals = [float(v) for v in row]
            rec.t.append(vals[0])
            rec.x.append(np.array(vals[1 : 1 + n]))
            rec.feas.append(vals[1 + n])
            rec.obj.append(vals[2 + n])
        return rec


# -- right-hand side -----------------------------------------------------------


def _make_rhs(p: ProblemDefinition):
    """pode_rhs specialised on the problem shape; single-constraint problems
    skip the Gram factorisation."""
    grad = p.grad_f
    if p.m == 0:

        def rhs(x, t, alpha):
            return -np.asarray(grad(x, t), dtype=float) / alpha

        return rhs
    if p.m == 1:
        jac, gprime = p.jac_g, p.gprime

        def rhs(x, t, alpha):
            gf = np.asarray(grad(x, t), dtype=float)
            row = np.asarray(jac(x, t), dtype=float).reshape(-1)
            G = float(row.dot(row))
            if not (G > 0.0 and math.isfinite(G)):
                raise RankDeficiencyError(x, t, G, 0.0)
            gp = float(np.asarray(gprime(x, t)).reshape(-1)[0])
            c = (float(row.dot(gf)) - alpha * gp) / G
            return (row * c - gf) * (1.0 / alpha)

        return rhs
    return lambda x, t, alpha: pode_rhs(p, x, t, alpha)


def _make_residual(p: ProblemDefinition):
    if p.m == 1:
        g = p.g
        return lambda x, t: abs(float(np.asarray(g(x, t)).reshape(-1)[0]))
    return p.constraint_residual


def _step_times(t0, t1, dt):
    n = max(1, int(math.ceil((t1 - t0) / dt - 1e-9)))
    ts = t0 + dt * np.arange(n + 1)
    ts[-1] = t1
    return ts


def _newton_retract(p, x, t, target, max_iter=10):
    """Retraction that also reports how many iterations it used."""
    if p.m == 1:
        return _newton_retract_scalar(p, x, t, target, max_iter)
    for k in range(max_iter + 1):
        gv = np.asarray(p.g(x, t), dtype=float).reshape(p.m)
        r = float(np.linalg.norm(gv))
        if not math.isfinite(r):
            raise EvaluationError("g", x, t)
        if r <= target:
            return x, k
        if k == max_iter:
            break
        J = np.asarray(p.jac_g(x, t), dtype=float).reshape(p.m, p.n)
        x = x - J.T @ _Gram(J, x, t).solve(gv)
    raise RetractionError(f"retraction did not reach |g| <= {target:.1e} within {max_iter} iterations at t={t}")


def _newton_retract_scalar(p, x, t, target, max_iter):
    for k in range(max_iter + 1):
        gv = float(np.asarray(p.g(x, t)).reshape(-1)[0])
        if not math.isfinite(gv):
            raise EvaluationError("g", x, t)
        if abs(gv) <= target:
            return x, k
        if k == max_iter:
            break
        row = np.asarray(p.jac_g(x, t), dtype=float).reshape(-1)
        G = float(row.dot(row))
        if not (G > 0.0 and math.isfinite(G)):
            raise RankDeficiencyError(x, t, G, 0.0)
        x = x - row * (gv / G)
    raise RetractionError(f"retraction did not reach |g| <= {target:.1e} within {max_iter} iterations at t={t}")


def integrate_pode(p: ProblemDefinition, x0, t0: float, t1: float, cfg: FlowConfig) -> TrajectoryRecord:
    """Fixed-step integration of the inertial projected gradient flow.

    Parameters
    ----------
    p : ProblemDefinition
    x0 : array_like
        Initial state, feasible at ``t0`` up to ``cfg.feas_tol``.
    t0, t1 : float
        Horizon. ``cfg.max_time`` caps ``t1`` when set.
    cfg : FlowConfig

    Returns
    -------
    TrajectoryRecord
        Samples every ``cfg.record_every`` steps, always including both ends.

    Raises
    ------
    PreconditionError
        If ``x0`` is infeasible or the horizon is empty.
    FlowAborted
        On rank loss or a failed retraction; carries the partial record.
    """
    x = np.atleast_1d(np.array(x0, dtype=float))
    if x.shape != (p.n,):
        raise PreconditionError(f"x0 has shape {x.shape}, expected ({p.n},)")
    if cfg.max_time is not None:
        t1 = min(t1, t0 + cfg.max_time)
    if not t1 > t0:
        raise PreconditionError(f"need t1 > t0, got [{t0}, {t1}]")
    r0 = p.constraint_residual(x, t0)
    if not r0 <= cfg.feas_tol:
        raise PreconditionError(f"x0 is infeasible: |g(x0,t0)| = {r0:.3e} > feas_tol = {cfg.feas_tol:.1e}")

    rhs = _make_rhs(p)
    residual = _make_residual(p)
    ts = _step_times(float(t0), float(t1), cfg.dt)
    rec = TrajectoryRecord(n=p.n, meta={"integrator": cfg.integrator, "dt": cfg.dt, "retraction": cfg.retraction})
    rec.append(p, ts[0], x)
    newton = cfg.retraction == "newton" and p.m > 0
    target = 0.1 * cfg.feas_tol
    rk4 = cfg.integrator == "rk4"
    outside = False
    last = len(ts) - 1

    tl = ts.tolist()
    scheduled = cfg.alpha_schedule is not None
    a = cfg.alpha
    feas_tol = cfg.feas_tol
    for k in range(last):
        t, tn = tl[k], tl[k + 1]
        h = tn - t
        if scheduled:
            a = cfg.alpha_at(t)
        try:
            if rk4:
                hh = 0.5 * h
                k1 = rhs(x, t, a)
                k2 = rhs(x + hh * k1, t + hh, a)
                k3 = rhs(x + hh * k2, t + hh, a)
                k4 = rhs(x + h * k3, tn, a)
                x = x + (h / 6.0) * (k1 + k4 + 2.0 * (k2 + k3))
            else:
                x = x + h * rhs(x, t, a)
        except RankDeficiencyError as exc:
            rec.log(t, "rank-error", sigma_min=float(exc.sigma_min))
            raise FlowAborted(f"rank loss at t={t}: {exc}", rec, exc) from exc
        if not math.isfinite(x.dot(x)):
            raise FlowAborted(f"state became non-finite at t={tn}", rec, EvaluationError("pode_rhs", x, tn))
        if newton:
            before = residual(x, tn)
            if before > feas_tol:
                try:
                    x, iters = _newton_retract(p, x, tn, target)
                except (RetractionError, RankDeficiencyError) as exc:
                    raise FlowAborted(f"retraction failed at t={tn}: {exc}", rec, exc) from exc
                rec.log(tn, "retraction", residual_before=before, iterations=iters)
        if cfg.containment_radius is not None:
            dist = float(np.linalg.norm(x - cfg.reference.h(tn)))
            if dist > cfg.containment_radius and not outside:
                rec.log(tn, "containment-violation", distance=dist, radius=cfg.containment_radius)
            outside = dist > cfg.containment_radius
        if (k + 1) % cfg.record_every == 0 or k + 1 == last:
            rec.append(p, tn, x)
    return rec


def _batch_rhs(p, B, X, t, alpha):
    gf = np.asarray(B.grad_f(X, t), dtype=float).reshape(X.shape)
    if p.m == 0:
        return -gf / alpha, None
    J = np.asarray(B.jac_g(X, t), dtype=float).reshape(len(X), p.m, p.n)
    gp = np.asarray(B.gprime(X, t), dtype=float).reshape(len(X), p.m)
    G = J @ J.transpose(0, 2, 1)
    if p.m == 1:
        sig = G[:, 0, 0]
    else:
        sig = np.linalg.eigvalsh(G)[:, 0]
    bad = ~(sig > RANK_TOL * np.maximum(np.abs(G).max(axis=(1, 2)), 1e-300))
    if p.m == 1:
        G[bad, 0, 0] = 1.0
        y = (np.einsum("kmn,kn->km", J, gf) / alpha - gp) / G[:, 0, :]
    else:
        G[bad] = np.eye(p.m)
        y = np.linalg.solve(G, (np.einsum("kmn,kn->km", J, gf) / alpha - gp)[..., None])[..., 0]
    return -gf / alpha + np.einsum("kmn,km->kn", J, y), bad


def integrate_pode_batch(p: ProblemDefinition, X0, t0: float, t1: float, cfg: FlowConfig) -> list:
    """Integrate several starts at once with the problem's batch evaluators.

    Same scheme, retraction and recording as :func:`integrate_pode`, row by
    row. A row that loses rank or fails to retract stops there; its record
    carries ``meta['aborted']`` instead of raising. Falls back to one
    :func:`integrate_pode` call per row when ``p.batch`` is missing.
    """
    X = np.array(X0, dtype=float).reshape(-1, p.n)
    if p.batch is None:
        out = []
        for x0 in X:
            try:
                out.append(integrate_pode(p, x0, t0, t1, cfg))
            except FlowAborted as exc:
                exc.record.meta["aborted"] = str(exc)
                out.append(exc.record)
        return out
    if cfg.containment_radius is not None:
        raise InvalidParameterError("containment monitoring is only available in integrate_pode")
    B = p.batch
    if cfg.max_time is not None:
        t1 = min(t1, t0 + cfg.max_time)
    if not t1 > t0:
        raise PreconditionError(f"need t1 > t0, got [{t0}, {t1}]")
    k_rows = len(X)

    def resid(Y, t):
        if p.m == 0:
            return np.zeros(len(Y))
        return np.linalg.norm(np.asarray(B.g(Y, t), dtype=float).reshape(len(Y), p.m), axis=1)

    def record_rows(recs, t, Y, rows):
        fv = np.asarray(B.f(Y[rows], t), dtype=float).reshape(-1)
        rv = resid(Y[rows], t)
        for j, i in enumerate(rows):
            r = recs[i]
            r.t.append(float(t))
            r.x.append(Y[i].copy())
            r.feas.append(float(rv[j]))
            r.obj.append(float(fv[j]))

    r0 = resid(X, t0)
    if np.any(~(r0 <= cfg.feas_tol)):
        i = int(np.argmax(~(r0 <= cfg.feas_tol)))
        raise PreconditionError(f"start {i} is infeasible: |g| = {r0[i]:.3e} > feas_tol = {cfg.feas_tol:.1e}")

    ts = _step_times(float(t0), float(t1), cfg.dt).tolist()
    meta = {"integrator": cfg.integrator, "dt": cfg.dt, "retraction": cfg.retraction}
    recs = [TrajectoryRecord(n=p.n, meta=dict(meta)) for _ in range(k_rows)]
    active = np.arange(k_rows)
    record_rows(recs, ts[0], X, active)
    newton = cfg.retraction == "newton" and p.m > 0
    target = 0.1 * cfg.feas_tol
    last = len(ts) - 1

    def stop(rows, t, reason):
        for i in rows:
            recs[i].meta["aborted"] = f"{reason} at t={t}"

    for k in range(last):
        t, tn = ts[k], ts[k + 1]
        h = tn - t
        a = cfg.alpha_at(t)
        Y = X[active]
        bad_any = np.zeros(len(active), dtype=bool)
        if cfg.integrator == "rk4":
            hh = 0.5 * h
            k1, b1 = _batch_rhs(p, B, Y, t, a)
            k2, b2 = _batch_rhs(p, B, Y + hh * k1, t + hh, a)
            k3, b3 = _batch_rhs(p, B, Y + hh * k2, t + hh, a)
            k4, b4 = _batch_rhs(p, B, Y + h * k3, tn, a)
            Yn = Y + (h / 6.0) * (k1 + k4 + 2.0 * (k2 + k3))
            for b in (b1, b2, b3, b4):
                if b is not None:
                    bad_any |= b
        else:
            k1, b1 = _batch_rhs(p, B, Y, t, a)
            Yn = Y + h * k1
            if b1 is not None:
                bad_any |= b1
        bad_any |= ~np.isfinite(Yn).all(axis=1)
        if newton:
            before = resid(Yn, tn)
            need = np.flatnonzero((before > cfg.feas_tol) & ~bad_any)
            iters = np.zeros(len(active), dtype=int)
            todo = need
            for it in range(11):
                if len(todo) == 0:
                    break
                Z = Yn[todo]
                gv = np.asarray(B.g(Z, tn), dtype=float).reshape(len(todo), p.m)
                done = np.linalg.norm(gv, axis=1) <= target
                iters[todo[done]] = it
                todo, Z, gv = todo[~done], Z[~done], gv[~done]
                if it == 10 or len(todo) == 0:
                    break
                J = np.asarray(B.jac_g(Z, tn), dtype=float).reshape(len(todo), p.m, p.n)
                G = J @ J.transpose(0, 2, 1)
                Yn[todo] = Z - np.einsum("kmn,km->kn", J, np.linalg.solve(G, gv[..., None])[..., 0])
            bad_any[todo] = True
            for j in need:
                if not bad_any[j]:
                    recs[active[j]].log(tn, "retraction", residual_before=float(before[j]), iterations=int(iters[j]))
        if bad_any.any():
            stop(active[bad_any], tn, "rank loss, retraction failure or non-finite state")
        X[active] = Yn
        active = active[~bad_any]
        if len(active) == 0:
            break
        if (k + 1) % cfg.record_every == 0 or k + 1 == last:
            record_rows(recs, tn, X, active)
    return recs


# -- frozen-time flow ------------------------------------------------------------


class FrozenResult(NamedTuple):
    x: np.ndarray
    converged: bool
    iterations: int
    stationarity: float


def frozen_flow(p: ProblemDefinition, t, x0, tol=1e-8, max_iters=5000, step_cap=0.05) -> FrozenResult:
    """Projected gradient descent at frozen t with Armijo backtracking.

    The displacement per iteration is capped at ``step_cap`` so the iterates
    cannot hop over a neighbouring region of attraction.
    """
    x = retract(p, np.atleast_1d(np.array(x0, dtype=float)), t) if p.m else np.atleast_1d(np.array(x0, dtype=float))
    fx = float(p.f(x, t))
    s = 1.0
    for it in range(max_iters):
        d = projected_gradient(p, x, t)
        nd = float(np.linalg.norm(d))
        if nd <= tol:
            return FrozenResult(x, True, it, nd)
        s = min(2.0 * s, step_cap / nd)
        while True:
            xn = x - s * d
            if p.m:
                try:
                    xn = retract(p, xn, t)
                except (RetractionError, RankDeficiencyError):
                    s *= 0.5
                    continue
            fn = float(p.f(xn, t))
            if fn <= fx - 1e-4 * s * nd * nd or s < 1e-14:
                break
            s *= 0.5
        if s < 1e-14:
            return FrozenResult(x, False, it, nd)
        if fn >= fx:
            # f is flat to rounding here: no further progress is measurable
            return FrozenResult(xn, nd <= 1e3 * tol, it + 1, nd)
        x, fx = xn, fn
    return FrozenResult(x, False, max_iters, float(np.linalg.norm(projected_gradient(p, x, t))))


def frozen_flow_classify(
    p: ProblemDefinition, t, x0, minima: Sequence[MinTrajectory], tol=1e-8, max_iters=5000, match_radius=1e-3
) -> str:
    """Label of the minimum whose frozen-time region of attraction contains x0.

    Returns ``"diverged"`` when the descent limit is not within
    ``match_radius`` of any candidate.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    for h in minima:
        if np.linalg.norm(x0 - h.h(t)) <= 1e-12:
            return h.label
    res = frozen_flow(p, t, x0, tol=tol, max_iters=max_iters)
    best, best_d = "diverged", match_radius
    for h in minima:
        d = float(np.linalg.norm(res.x - h.h(t)))
        if d <= best_d:
            best, best_d = h.label, d
    return best


# -- KKT Newton machinery ---------------------------------------------------------


def _kkt_parts(p, x, lam, t, extra_hess=0.0, extra_grad=None):
    gf = np.asarray(p.grad_f(x, t), dtype=float).reshape(p.n)
    if extra_grad is not None:
        gf = gf + extra_grad
    H = hessian_f(p, x, t) + extra_hess * np.eye(p.n)
    if p.m == 0:
        return gf, H, np.zeros((0, p.n)), np.zeros(0)
    J = np.asarray(p.jac_g(x, t), dtype=float).reshape(p.m, p.n)
    gv = np.asarray(p.g(x, t), dtype=float).reshape(p.m)
    H = H + np.tensordot(lam, hessian_g(p, x, t), axes=1)
    return gf + J.T @ lam, H, J, gv


def _kkt_newton(p, x, lam, t, tol, max_iter=50, max_halvings=30, extra_hess=0.0, anchor=None):
    """Damped Newton on [grad L; g] = 0. ``anchor`` adds the proximal term
    extra_hess/2 |x - anchor|^2 to the objective."""
    n, m = p.n, p.m

    def parts(x, lam):
        eg = None if anchor is None else extra_hess * (x - anchor)
        return _kkt_parts(p, x, lam, t, extra_hess, eg)

    gl, H, J, gv = parts(x, lam)
    res = float(np.linalg.norm(np.concatenate([gl, gv])))
    for it in range(max_iter):
        if not math.isfinite(res):
            raise ConvergenceError(f"KKT residual became non-finite at t={t}")
        if res <= tol:
            return x, lam, res, it
        K = np.zeros((n + m, n + m))
        K[:n, :n] = H
        K[:n, n:] = J.T
        K[n:, :n] = J
        try:
            step = np.linalg.solve(K, -np.concatenate([gl, gv]))
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"singular KKT matrix at t={t}") from exc
        s = 1.0
        for _ in range(max_halvings + 1):
            xn, ln = x + s * step[:n], lam + s * step[n:]
            gln, Hn, Jn, gvn = parts(xn, ln)
            rn = float(np.linalg.norm(np.concatenate([gln, gvn])))
            if math.isfinite(rn) and rn < res:
                break
            s *= 0.5
        else:
            raise ConvergenceError(f"Newton line search failed at t={t} (residual {res:.3e})")
        x, lam, gl, H, J, gv, res = xn, ln, gln, Hn, Jn, gvn, rn
    if res <= tol:
        return x, lam, res, max_iter
    raise ConvergenceError(f"Newton did not reach KKT residual {tol:.1e} at t={t} (got {res:.3e})")


def _multiplier(p, x, t):
    if p.m == 0:
        return np.zeros(0)
    return evaluate_geometry(p, x, t).lam


def reduced_hessian_min_eig(p: ProblemDefinition, x, lam, t) -> float:
    """Smallest eigenvalue of the Lagrangian Hessian restricted to the tangent plane."""
    _, H, _, _ = _kkt_parts(p, x, lam, t)
    Z = tangent_basis(evaluate_geometry(p, x, t))
    R = Z.T @ H @ Z
    return float(np.linalg.eigvalsh(0.5 * (R + R.T))[0])


class RefinedMinimum(NamedTuple):
    x: np.ndarray
    lam: np.ndarray
    min_eig: float

    @property
    def is_minimum(self) -> bool:
        return self.min_eig > 0


def local_minimum_refine(p: ProblemDefinition, t, x_guess, tol=1e-10, max_iter=50) -> RefinedMinimum:
    """Newton on the KKT system at frozen t.

    When Newton fails from ``x_guess`` (narrow wells have small Newton
    basins), the frozen-time descent flow is run first and Newton polishes
    its limit. The returned ``min_eig`` is the smallest eigenvalue of the
    reduced Hessian; callers must reject the point when it is not positive.
    """
    x = np.atleast_1d(np.array(x_guess, dtype=float))
    if p.m:
        try:
            x = retract(p, x, t)
        except RetractionError:
            pass
    lam = _multiplier(p, x, t)
    try:
        x, lam, _, _ = _kkt_newton(p, x, lam, float(t), tol, max_iter)
    except ConvergenceError:
        x = frozen_flow(p, t, x).x
        lam = _multiplier(p, x, t)
        x, lam, _, _ = _kkt_newton(p, x, lam, float(t), tol, max_iter)
    return RefinedMinimum(x, lam, reduced_hessian_min_eig(p, x, lam, t))


def kkt_velocity(p: ProblemDefinition, x, lam, t) -> np.ndarray:
    """dx/dt of a nondegenerate KKT point, from the implicit function theorem."""
    n, m = p.n, p.m
    _, H, J, _ = _kkt_parts(p, x, lam, t)
    rhs_x = grad_f_t(p, x, t)
    if m:
        rhs_x = rhs_x + jacobian_t(p, x, t).T @ lam
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = J.T
    K[n:, :n] = J
    rhs = np.concatenate([rhs_x, np.asarray(p.gprime(x, t), dtype=float).reshape(m)])
    return np.linalg.solve(K, -rhs)[:n]


def trace_minimum_trajectory(
    p: ProblemDefinition, t_grid, x_seed, label="traced", jump_guard=None, tol=1e-10
) -> MinTrajectory:
    """Continue a local minimum along ``t_grid``.

    Each grid time is refined by KKT Newton from a first-order predictor.
    The trace stops early (``meta['truncated_at']``) where second-order
    sufficiency fails.

    Raises
    ------
    BranchLossError
        If one step moves further than the jump guard, by default
        ``10 * dt * max|h'|`` estimated at both ends, plus 1e-6.
    """
    ts = np.asarray(t_grid, dtype=float)
    if len(ts) < 2 or np.any(np.diff(ts) <= 0):
        raise InvalidParameterError("t_grid must be strictly increasing with at least two points")
    first = local_minimum_refine(p, ts[0], x_seed, tol)
    if not first.is_minimum:
        raise InvalidParameterError(f"seed is not a strict local minimum (reduced Hessian eigenvalue {first.min_eig:.3e})")
    xs = [first.x]
    x, lam = first.x, first.lam
    vel = kkt_velocity(p, x, lam, ts[0])
    meta = {}
    for k in range(1, len(ts)):
        dt = ts[k] - ts[k - 1]
        pred = x + dt * vel
        try:
            xn, lamn, _, _ = _kkt_newton(p, pred, lam, float(ts[k]), tol)
        except ConvergenceError as exc:
            raise BranchLossError(f"refinement failed at t={ts[k]}: {exc}") from exc
        eig = reduced_hessian_min_eig(p, xn, lamn, ts[k])
        if eig <= 0:
            meta["truncated_at"] = float(ts[k])
            meta["reason"] = f"reduced Hessian eigenvalue {eig:.3e} <= 0"
            break
        veln = kkt_velocity(p, xn, lamn, ts[k])
        guard = jump_guard
        if guard is None:
            guard = 10.0 * dt * max(np.linalg.norm(vel), np.linalg.norm(veln)) + 1e-6
        moved = float(np.linalg.norm(xn - x))
        if moved > guard:
            raise BranchLossError(f"trace moved {moved:.3e} > guard {guard:.3e} at t={ts[k]}")
        xs.append(xn)
        x, lam, vel = xn, lamn, veln
    if len(xs) < 2:
        raise BranchLossError(f"trace lost second-order sufficiency immediately after t={ts[0]}")
    return MinTrajectory.traced(label, ts[: len(xs)], np.array(xs), **meta)


# -- sequential solvers -------------------------------------------------------------


def _prox_fallback(p, anchor, w, t, x, iters=500):
    """Projected-gradient descent on f + w/2 |x - anchor|^2 over M(t)."""
    def obj(z):
        return float(p.f(z, t)) + 0.5 * w * float((z - anchor) @ (z - anchor))

    if p.m:
        x = retract(p, x, t)
    fx = obj(x)
    s = 1.0 / (1.0 + w)
    for _ in range(iters):
        gr = np.asarray(p.grad_f(x, t), dtype=float) + w * (x - anchor)
        if p.m:
            J = np.asarray(p.jac_g(x, t), dtype=float).reshape(p.m, p.n)
            gr = gr - J.T @ _Gram(J, x, t).solve(J @ gr)
        if np.linalg.norm(gr) <= 1e-12:
            break
        s = 2.0 * s
        while s > 1e-16:
            xn = x - s * gr
            if p.m:
                try:
                    xn = retract(p, xn, t)
                except RetractionError:
                    s *= 0.5
                    continue
            fn = obj(xn)
            if fn <= fx - 1e-4 * s * float(gr @ gr):
                break
            s *= 0.5
        x, fx = xn, fn
    return x


def sequential_proximal_solve(p: ProblemDefinition, x0, time_grid, alpha: float, tol=1e-8) -> TrajectoryRecord:
    """Solve the proximally regularised problem at every grid time.

    Each step runs damped Newton on the KKT system, warm-started at the
    previous solution. If Newton fails, 500 projected-gradient steps on the
    regularised objective are tried; a step that still misses ``tol`` is
    logged as a ``solver-failure`` event and the run continues from the last
    iterate.
    """
    if not alpha > 0:
        raise InvalidParameterError("alpha must be positive")
    ts = np.asarray(time_grid, dtype=float)
    if len(ts) < 1 or np.any(np.diff(ts) <= 0):
        raise InvalidParameterError("time_grid must be strictly increasing")
    x = np.atleast_1d(np.array(x0, dtype=float))
    rec = TrajectoryRecord(n=p.n, meta={"solver": "proximal", "alpha": alpha})
    rec.append(p, ts[0], x)
    lam = _multiplier(p, x, ts[0]) if p.m else np.zeros(0)
    for i in range(1, len(ts)):
        t = float(ts[i])
        w = alpha / (ts[i] - ts[i - 1])
        anchor = x
        try:
            xn, lamn, _, _ = _kkt_newton(p, x.copy(), lam, t, tol, extra_hess=w, anchor=anchor)
        except (ConvergenceError, RankDeficiencyError) as exc:
            rec.log(t, "fallback", reason=str(exc))
            try:
                xn = _prox_fallback(p, anchor, w, t, x.copy())
                lamn = _multiplier(p, xn, t) if p.m else np.zeros(0)
                gl, _, _, gv = _kkt_parts(p, xn, lamn, t, w, w * (xn - anchor))
                res = float(np.linalg.norm(np.concatenate([gl, gv])))
            except (RetractionError, RankDeficiencyError) as exc2:
                xn, lamn, res = x, lam, math.inf
                rec.log(t, "solver-failure", reason=str(exc2))
            else:
                if res > tol:
                    rec.log(t, "solver-failure", residual=res)
        x, lam = xn, lamn
        rec.append(p, t, x)
    return rec


def forward_euler_track(
    p: ProblemDefinition, x0, time_grid, alpha: float, retraction="none", feas_tol=1e-8
) -> TrajectoryRecord:
    """Explicit Euler discretisation of the flow on an arbitrary grid."""
    if not alpha > 0:
        raise InvalidParameterError("alpha must be positive")
    if retraction not in RETRACTIONS:
        raise InvalidParameterError(f"retraction must be one of {RETRACTIONS}")
    ts = np.asarray(time_grid, dtype=float)
    if np.any(np.diff(ts) <= 0):
        raise InvalidParameterError("time_grid must be strictly increasing")
    x = np.atleast_1d(np.array(x0, dtype=float))
    r0 = p.constraint_residual(x, ts[0])
    if not r0 <= feas_tol:
        raise PreconditionError(f"x0 is infeasible: |g| = {r0:.3e}")
    rhs = _make_rhs(p)
    rec = TrajectoryRecord(n=p.n, meta={"solver": "forward-euler", "alpha": alpha})
    rec.append(p, ts[0], x)
    for i in range(1, len(ts)):
        t_prev, t = float(ts[i - 1]), float(ts[i])
        try:
            x = x + (t - t_prev) * rhs(x, t_prev, alpha)
        except RankDeficiencyError as exc:
            rec.log(t_prev, "rank-error", sigma_min=float(exc.sigma_min))
            raise FlowAborted(f"rank loss at t={t_prev}", rec, exc) from exc
        if retraction == "newton" and p.m:
            before = p.constraint_residual(x, t)
            if before > feas_tol:
                try:
                    x, iters = _newton_retract(p, x, t, 0.1 * feas_tol)
                except (RetractionError, RankDeficiencyError) as exc:
                    raise FlowAborted(f"retraction failed at t={t}", rec, exc) from exc
                rec.log(t, "retraction", residual_before=before, iterations=iters)
        rec.append(p, t, x)
    return rec


# -- convergence of the discrete schemes ---------------------------------------------


@dataclass
class ConvergenceTable:
    dtau: list
    proximal_error: list
    euler_error: list
    reference_dt: float
    classifications: dict = field(default_factory=dict)

    @staticmethod
    def _ratios(errs):
        return [errs[i] / errs[i + 1] if errs[i + 1] > 0 else math.inf for i in range(len(errs) - 1)]

    @property
    def proximal_ratios(self) -> list:
        return self._ratios(self.proximal_error)

    @property
    def euler_ratios(self) -> list:
        return self._ratios(self.euler_error)

    @property
    def classification_agrees(self) -> Optional[bool]:
        if not self.classifications:
            return None
        return len(set(self.classifications.values())) == 1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["dtau", "proximal_max_error", "euler_max_error"])
        for row in zip(self.dtau, self.proximal_error, self.euler_error):
            w.writerow([fmt_float(v) for v in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "dtau": self.dtau,
            "proximal_error": self.proximal_error,
            "euler_error": self.euler_error,
            "proximal_ratios": self.proximal_ratios,
            "euler_ratios": self.euler_ratios,
            "reference_dt": self.reference_dt,
            "classifications": self.classifications,
            "classification_agrees": self.classification_agrees,
        }


def nearest_label(x, t, trajectories: Sequence[MinTrajectory]) -> str:
    return min(trajectories, key=lambda h: float(np.linalg.norm(x - h.h(t)))).label


def convergence_experiment(
    p: ProblemDefinition, x0, alpha: float, T: float, dtau_list, trajectories=None, t0=0.0
) -> ConvergenceTable:
    """Max deviation of the proximal and Euler schemes from a fine RK4 run.

    The reference step is ``min(dtau_list) / 10``; every ``dtau`` must be an
    integer multiple of it so that the grids nest.
    """
    dtaus = sorted((float(d) for d in dtau_list), reverse=True)
    if not dtaus or dtaus[-1] <= 0:
        raise InvalidParameterError("dtau_list must hold positive steps")
    dt_ref = dtaus[-1] / 10.0
    strides = []
    for d in dtaus:
        s = d / dt_ref
        if abs(s - round(s)) > 1e-6 or abs(T / d - round(T / d)) > 1e-6 * max(1.0, T / d):
            raise InvalidParameterError(f"dtau={d} does not nest with reference step {dt_ref} over T={T}")
        strides.append(int(round(s)))
    n_ref = int(round(T / dt_ref))
    ref_grid = t0 + dt_ref * np.arange(n_ref + 1)
    cfg = FlowConfig(alpha=alpha, dt=dt_ref, integrator="rk4", retraction="newton")
    ref = integrate_pode(p, x0, t0, t0 + T, cfg).states
    prox_err, eul_err, classes = [], [], {}
    for d, s in zip(dtaus, strides):
        grid = ref_grid[::s]
        refs = ref[::s]
        prox = sequential_proximal_solve(p, x0, grid, alpha).states
        eul = forward_euler_track(p, x0, grid, alpha, retraction="newton").states
        prox_err.append(float(np.max(np.linalg.norm(prox - refs, axis=1))))
        eul_err.append(float(np.max(np.linalg.norm(eul - refs, axis=1))))
        if trajectories:
            classes[fmt_float(d)] = nearest_label(prox[-1], grid[-1], trajectories)
    return ConvergenceTable(dtaus, prox_err, eul_err, dt_ref, classes)
