"""Time-varying equality-constrained problems, benchmark instances and
minimum trajectories.

A problem is a bundle of plain callables ``(x, t) -> value``.  Every
callable must be pure so that one definition can be shared between worker
processes or threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .errors import EvaluationError, InvalidParameterError

Evaluator = Callable[[np.ndarray, float], object]

_EMPTY = np.zeros(0)


def _no_constraint(n):
    def g(x, t):
        return _EMPTY

    def jac(x, t):
        return np.zeros((0, n))

    return g, jac, g


@dataclass(frozen=True)
class ProblemDefinition:
    """min f(x, t) subject to g(x, t) = 0, with analytic first derivatives.

    ``m == 0`` encodes the unconstrained case; the constraint evaluators may
    then be omitted and default to empty aggregates.
    """

    n: int
    m: int
    f: Evaluator
    grad_f: Evaluator
    g: Optional[Evaluator] = None
    jac_g: Optional[Evaluator] = None
    gprime: Optional[Evaluator] = None
    hess_f: Optional[Evaluator] = None
    jac_g_prime: Optional[Evaluator] = None
    # one evaluator returning an (m, n, n) stack of constraint Hessians
    hess_g: Optional[Evaluator] = None
    lower_bound: Optional[float] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    # optional row-batched evaluators, used to integrate many starts at once
    batch: Optional["BatchEvaluators"] = None

    def __post_init__(self):
        if self.n < 1:
            raise InvalidParameterError(f"n must be positive, got {self.n}")
        if self.m < 0 or self.m >= self.n:
            raise InvalidParameterError(f"need 0 <= m < n, got m={self.m}, n={self.n}")
        if self.m == 0:
            g, jac, gp = _no_constraint(self.n)
            for name, default in (("g", g), ("jac_g", jac), ("gprime", gp)):
                if getattr(self, name) is None:
                    object.__setattr__(self, name, default)
        elif self.g is None or self.jac_g is None or self.gprime is None:
            raise InvalidParameterError("constrained problems need g, jac_g and gprime")

    @property
    def constrained(self) -> bool:
        return self.m > 0

    def constraint_residual(self, x, t) -> float:
        if self.m == 0:
            return 0.0
        return float(np.linalg.norm(self.g(x, t)))

    def spec(self) -> dict:
        """Name and parameters, enough to rebuild a builtin in another process."""
        return {"name": self.name, "params": dict(self.params)}


@dataclass(frozen=True)
class BatchEvaluators:
    """Evaluators over a stack of points X of shape (k, n) at one time t.

    Shapes: f -> (k,), grad_f -> (k, n), g -> (k, m), jac_g -> (k, m, n),
    gprime -> (k, m). Values must agree with the pointwise evaluators.
    With ``row_times`` set, t may also be a (k,) array of per-row times.
    """

    f: Evaluator
    grad_f: Evaluator
    g: Optional[Evaluator] = None
    jac_g: Optional[Evaluator] = None
    gprime: Optional[Evaluator] = None
    row_times: bool = False


# -- second derivatives, analytic when supplied -------------------------------

_FD_HESS_STEP = 1e-6


def hessian_f(p: ProblemDefinition, x, t) -> np.ndarray:
    if p.hess_f is not None:
        return np.atleast_2d(np.asarray(p.hess_f(x, t), dtype=float))
    x = np.asarray(x, dtype=float)
    H = np.empty((p.n, p.n))
    for i in range(p.n):
        step = _FD_HESS_STEP * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        H[:, i] = (np.asarray(p.grad_f(xp, t)) - np.asarray(p.grad_f(xm, t))) / (2 * step)
    return 0.5 * (H + H.T)


def hessian_g(p: ProblemDefinition, x, t) -> np.ndarray:
    """Stack of constraint Hessians, shape (m, n, n)."""
    if p.m == 0:
        return np.zeros((0, p.n, p.n))
    if p.hess_g is not None:
        return np.asarray(p.hess_g(x, t), dtype=float).reshape(p.m, p.n, p.n)
    x = np.asarray(x, dtype=float)
    H = np.empty((p.m, p.n, p.n))
    for i in range(p.n):
        step = _FD_HESS_STEP * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        H[:, :, i] = (np.asarray(p.jac_g(xp, t)) - np.asarray(p.jac_g(xm, t))) / (2 * step)
    return 0.5 * (H + H.transpose(0, 2, 1))


def jacobian_t(p: ProblemDefinition, x, t, step=1e-6) -> np.ndarray:
    """d/dt of the constraint Jacobian."""
    if p.m == 0:
        return np.zeros((0, p.n))
    if p.jac_g_prime is not None:
        return np.asarray(p.jac_g_prime(x, t), dtype=float).reshape(p.m, p.n)
    return (np.asarray(p.jac_g(x, t + step)) - np.asarray(p.jac_g(x, t - step))) / (2 * step)


def grad_f_t(p: ProblemDefinition, x, t, step=1e-6) -> np.ndarray:
    """d/dt of the objective gradient, by central differences."""
    return (np.asarray(p.grad_f(x, t + step)) - np.asarray(p.grad_f(x, t - step))) / (2 * step)


# -- derivative checking ------------------------------------------------------


@dataclass
class DerivativeCheck:
    evaluator: str
    max_abs_deviation: float
    threshold: float
    worst_point: tuple

    @property
    def passed(self) -> bool:
        return self.max_abs_deviation <= self.threshold


@dataclass
class DerivativeReport:
    checks: list
    step: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def deviation(self, evaluator: str) -> float:
        for c in self.checks:
            if c.evaluator == evaluator:
                return c.max_abs_deviation
        raise KeyError(evaluator)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "passed": self.passed,
            "checks": [
                {
                    "evaluator": c.evaluator,
                    "max_abs_deviation": c.max_abs_deviation,
                    "threshold": c.threshold,
                    "passed": c.passed,
                }
                for c in self.checks
            ],
        }


def _finite(name, value, x, t):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(name, np.atleast_1d(x), t)
    return arr


def check_derivatives(p: ProblemDefinition, points: Sequence, step: float = 1e-4) -> DerivativeReport:
    """Compare every analytic derivative against central finite differences.

    A derivative passes when its worst deviation over ``points`` stays below
    ``10 * step**2 * (1 + |value|)``, the size of the central-difference
    truncation error.
    """
    if step <= 0:
        raise InvalidParameterError("step must be positive")

    worst = {}

    def record(name, analytic, numeric, x, t):
        dev = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
        thr = 10 * step**2 * (1 + float(np.linalg.norm(analytic)))
        # keep the point with the largest deviation relative to its threshold
        prev = worst.get(name)
        if prev is None or dev / thr > prev[0] / prev[1]:
            worst[name] = (dev, thr, (tuple(map(float, x)), float(t)))

    for x, t in points:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        t = float(t)
        n = p.n

        def central(fun, name, i, h):
            xp = x.copy()
            xm = x.copy()
            xp[i] += h
            xm[i] -= h
            return (_finite(name, fun(xp, t), xp, t) - _finite(name, fun(xm, t), xm, t)) / (2 * h)

        def fd(fun, name):
            # Richardson-extrapolated central differences: O(step^4) truncation
            cols = []
            for i in range(n):
                coarse = central(fun, name, i, step)
                fine = central(fun, name, i, step / 2)
                cols.append((4 * fine - coarse) / 3)
            return np.stack(cols, axis=-1)

        def fd_t(fun, name):
            def d(h):
                return (_finite(name, fun(x, t + h), x, t + h) - _finite(name, fun(x, t - h), x, t - h)) / (2 * h)

            return (4 * d(step / 2) - d(step)) / 3

        grad = _finite("grad_f", p.grad_f(x, t), x, t).reshape(n)
        _finite("f", p.f(x, t), x, t)
        record("grad_f", grad, fd(p.f, "f").reshape(n), x, t)

        if p.hess_f is not None:
            H = _finite("hess_f", p.hess_f(x, t), x, t).reshape(n, n)
            record("hess_f", H, fd(p.grad_f, "grad_f").reshape(n, n), x, t)

        if p.m > 0:
            m = p.m
            J = _finite("jac_g", p.jac_g(x, t), x, t).reshape(m, n)
            record("jac_g", J, fd(p.g, "g").reshape(m, n), x, t)
            gp = _finite("gprime", p.gprime(x, t), x, t).reshape(m)
            record("gprime", gp, fd_t(p.g, "g").reshape(m), x, t)
            if p.jac_g_prime is not None:
                Jt = _finite("jac_g_prime", p.jac_g_prime(x, t), x, t).reshape(m, n)
                record("jac_g_prime", Jt, fd_t(p.jac_g, "jac_g").reshape(m, n), x, t)
            if p.hess_g is not None:
                Hg = _finite("hess_g", p.hess_g(x, t), x, t).reshape(m, n, n)
                record("hess_g", Hg, fd(p.jac_g, "jac_g").reshape(m, n, n), x, t)

    checks = [DerivativeCheck(k, v[0], v[1], v[2]) for k, v in worst.items()]
    return DerivativeReport(checks=checks, step=step)


# -- minimum trajectories ------------------------------------------------------


class MinTrajectory:
    """A local minimum trajectory h(t) together with its derivative.

    Build with :meth:`analytic` from closed forms or :meth:`traced` from a
    time grid; traced trajectories interpolate with cubic Hermite splines
    whose slopes are central finite differences on the grid.
    """

    def __init__(self, label, kind, h, hdot, times=None, values=None, meta=None):
        self.label = label
        self.kind = kind
        self._h = h
        self._hdot = hdot
        self.times = times
        self.values = values
        self.meta = dict(meta or {})

    @classmethod
    def analytic(cls, label, h, hdot, **meta):
        return cls(label, "analytic", h, hdot, meta=meta)

    @classmethod
    def traced(cls, label, times, values, **meta):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float).reshape(len(times), -1)
        if len(times) < 2:
            raise InvalidParameterError("a traced trajectory needs at least two samples")
        if len(times) >= 3:
            slopes = np.gradient(values, times, axis=0, edge_order=2)
        else:
            slopes = np.gradient(values, times, axis=0)
        spline = CubicHermiteSpline(times, values, slopes, axis=0)
        dspline = spline.derivative()
        return cls(
            label,
            "traced",
            lambda t: spline(float(t)),
            lambda t: dspline(float(t)),
            times=times,
            values=values,
            meta=meta,
        )

    def h(self, t) -> np.ndarray:
        return np.atleast_1d(np.asarray(self._h(t), dtype=float))

    def hdot(self, t) -> np.ndarray:
        return np.atleast_1d(np.asarray(self._hdot(t), dtype=float))

    def __call__(self, t):
        return self.h(t)

    def span(self):
        if self.times is None:
            return (-math.inf, math.inf)
        return (float(self.times[0]), float(self.times[-1]))

    def validate(self, p: ProblemDefinition, times, feas_tol=1e-8, stat_tol=1e-6) -> dict:
        """Check feasibility and stationarity of h at the given times."""
        from .geometry import evaluate_geometry

        feas = 0.0
        stat = 0.0
        for t in times:
            x = self.h(t)
            feas = max(feas, p.constraint_residual(x, t))
            geo = evaluate_geometry(p, x, t)
            stat = max(stat, float(np.linalg.norm(geo.grad_L)))
        return {
            "label": self.label,
            "max_feasibility_residual": feas,
            "max_stationarity_residual": stat,
            "feasible": feas <= feas_tol,
            "stationary": stat <= stat_tol,
        }

    def __repr__(self):
        return f"MinTrajectory(label={self.label!r}, kind={self.kind!r})"


# -- builtin problems -----------------------------------------------------------


def _quartic_bar(y):
    return 0.25 * y**4 + (2.0 / 3.0) * y**3 - 0.5 * y**2 - 2.0 * y


def _quartic_bar_prime(y):
    return (y - 1.0) * (y + 1.0) * (y + 2.0)


def _quartic_bar_second(y):
    return 3.0 * y**2 + 4.0 * y - 1.0


def builtin_quartic(b: float = 5.0) -> ProblemDefinition:
    """f(x, t) = fbar(x - b sin t) with the three-critical-point quartic fbar.

    Minima of fbar sit at -2 (spurious) and 1 (global), a maximum at -1.
    """
    b = float(b)

    def f(x, t):
        return float(_quartic_bar(x[0] - b * math.sin(t)))

    def grad(x, t):
        return np.array([_quartic_bar_prime(x[0] - b * math.sin(t))])

    def hess(x, t):
        return np.array([[_quartic_bar_second(x[0] - b * math.sin(t))]])

    def f_batch(X, t):
        return _quartic_bar(X[:, 0] - b * math.sin(t))

    def grad_batch(X, t):
        return _quartic_bar_prime(X - b * math.sin(t))

    return ProblemDefinition(
        n=1, m=0, f=f, grad_f=grad, hess_f=hess,
        lower_bound=-19.0 / 12.0, name="quartic", params={"b": b},
        batch=BatchEvaluators(f=f_batch, grad_f=grad_batch),
    )


def quartic_trajectories(b: float = 5.0) -> list:
    b = float(b)
    return [
        MinTrajectory.analytic(
            "local-1", lambda t: np.array([-2.0 + b * math.sin(t)]), lambda t: np.array([b * math.cos(t)])
        ),
        MinTrajectory.analytic(
            "global", lambda t: np.array([1.0 + b * math.sin(t)]), lambda t: np.array([b * math.cos(t)])
        ),
    ]


ACKLEY_AMPLITUDE = 24.0
# offset of the spurious trajectory as printed; it misses the parabola by 8e-4
ACKLEY_REFERENCE_OFFSET = (1.92, 1.96)


def _ackley_z(t):
    return ACKLEY_AMPLITUDE * math.sin(t), math.cos(t)


def _ackley_zdot(t):
    return ACKLEY_AMPLITUDE * math.cos(t), -math.sin(t)


def ackley_bar(y1, y2, d):
    s = math.sqrt(0.5 * (y1 * y1 + y2 * y2) + d * d)
    c = math.exp(0.5 * (math.cos(2 * math.pi * y1) + math.cos(2 * math.pi * y2)))
    return 0.5 * math.e + 20.0 * math.exp(-d) - 20.0 * math.exp(-s) - 0.5 * c


def ackley_bar_grad(y1, y2, d):
    s = math.sqrt(0.5 * (y1 * y1 + y2 * y2) + d * d)
    c = math.exp(0.5 * (math.cos(2 * math.pi * y1) + math.cos(2 * math.pi * y2)))
    radial = 10.0 * math.exp(-s) / s
    wave = 0.5 * math.pi * c
    return (
        radial * y1 + wave * math.sin(2 * math.pi * y1),
        radial * y2 + wave * math.sin(2 * math.pi * y2),
    )


def ackley_bar_hess(y1, y2, d):
    s = math.sqrt(0.5 * (y1 * y1 + y2 * y2) + d * d)
    c = math.exp(0.5 * (math.cos(2 * math.pi * y1) + math.cos(2 * math.pi * y2)))
    es = math.exp(-s)
    pi2 = math.pi * math.pi
    s1, s2 = math.sin(2 * math.pi * y1), math.sin(2 * math.pi * y2)
    c1, c2 = math.cos(2 * math.pi * y1), math.cos(2 * math.pi * y2)
    k = 5.0 * es * (s + 1.0) / s**3
    h11 = 10.0 * es / s - k * y1 * y1 - 0.5 * pi2 * c * s1 * s1 + pi2 * c * c1
    h22 = 10.0 * es / s - k * y2 * y2 - 0.5 * pi2 * c * s2 * s2 + pi2 * c * c2
    h12 = -k * y1 * y2 - 0.5 * pi2 * c * s1 * s2
    return np.array([[h11, h12], [h12, h22]])


def builtin_ackley_constrained(d: float = 0.01) -> ProblemDefinition:
    """Smoothed Ackley function riding on z(t) = (24 sin t, cos t), restricted
    to the moving parabola (x1 - z1) = (x2 - z2)**2 / 2.
    """
    d = float(d)
    if not d > 0:
        raise InvalidParameterError(f"ackley smoothing parameter d must be positive, got {d}")

    def f(x, t):
        z1, z2 = _ackley_z(t)
        return ackley_bar(x[0] - z1, x[1] - z2, d)

    def grad(x, t):
        z1, z2 = _ackley_z(t)
        return np.array(ackley_bar_grad(x[0] - z1, x[1] - z2, d))

    def hess(x, t):
        z1, z2 = _ackley_z(t)
        return ackley_bar_hess(x[0] - z1, x[1] - z2, d)

    def g(x, t):
        z1, z2 = _ackley_z(t)
        y2 = x[1] - z2
        return np.array([(x[0] - z1) - 0.5 * y2 * y2])

    def jac(x, t):
        return np.array([[1.0, -(x[1] - math.cos(t))]])

    def gprime(x, t):
        y2 = x[1] - math.cos(t)
        return np.array([-ACKLEY_AMPLITUDE * math.cos(t) - y2 * math.sin(t)])

    def jac_t(x, t):
        return np.array([[0.0, -math.sin(t)]])

    hg = np.array([[[0.0, 0.0], [0.0, -1.0]]])

    def shift(X, t):
        return X[:, 0] - ACKLEY_AMPLITUDE * np.sin(t), X[:, 1] - np.cos(t)

    def f_batch(X, t):
        y1, y2 = shift(X, t)
        s = np.sqrt(0.5 * (y1 * y1 + y2 * y2) + d * d)
        c = np.exp(0.5 * (np.cos(2 * np.pi * y1) + np.cos(2 * np.pi * y2)))
        return 0.5 * math.e + 20.0 * math.exp(-d) - 20.0 * np.exp(-s) - 0.5 * c

    def grad_batch(X, t):
        y1, y2 = shift(X, t)
        s = np.sqrt(0.5 * (y1 * y1 + y2 * y2) + d * d)
        c = np.exp(0.5 * (np.cos(2 * np.pi * y1) + np.cos(2 * np.pi * y2)))
        radial = 10.0 * np.exp(-s) / s
        wave = 0.5 * np.pi * c
        return np.stack([radial * y1 + wave * np.sin(2 * np.pi * y1), radial * y2 + wave * np.sin(2 * np.pi * y2)], axis=1)

    def g_batch(X, t):
        y1, y2 = shift(X, t)
        return (y1 - 0.5 * y2 * y2)[:, None]

    def jac_batch(X, t):
        out = np.empty((X.shape[0], 1, 2))
        out[:, 0, 0] = 1.0
        out[:, 0, 1] = -(X[:, 1] - np.cos(t))
        return out

    def gprime_batch(X, t):
        y2 = X[:, 1] - np.cos(t)
        return (-ACKLEY_AMPLITUDE * np.cos(t) - y2 * np.sin(t))[:, None]

    def hess_g(x, t):
        return hg

    return ProblemDefinition(
        n=2, m=1, f=f, grad_f=grad, hess_f=hess, g=g, jac_g=jac, gprime=gprime,
        jac_g_prime=jac_t, hess_g=hess_g, lower_bound=0.0,
        name="ackley-constrained", params={"d": d},
        batch=BatchEvaluators(
            f=f_batch, grad_f=grad_batch, g=g_batch, jac_g=jac_batch, gprime=gprime_batch, row_times=True
        ),
    )


def ackley_stationary_offset(s_guess: float = 1.96, d: float = 0.01, tol=1e-13) -> np.ndarray:
    """Stationary point of fbar restricted to the parabola y1 = y2**2 / 2, by
    Newton's method on the one-dimensional derivative in y2."""

    def dphi(s):
        g1, g2 = ackley_bar_grad(0.5 * s * s, s, d)
        return g1 * s + g2

    def d2phi(s):
        H = ackley_bar_hess(0.5 * s * s, s, d)
        g1, _ = ackley_bar_grad(0.5 * s * s, s, d)
        v = np.array([s, 1.0])
        return float(v @ H @ v) + g1

    s = float(s_guess)
    for _ in range(50):
        step = dphi(s) / d2phi(s)
        s -= step
        if abs(step) < tol:
            break
    return np.array([0.5 * s * s, s])


def ackley_trajectories(d: float = 0.01) -> list:
    off = ackley_stationary_offset(ACKLEY_REFERENCE_OFFSET[1], d)

    def shifted(offset):
        o1, o2 = float(offset[0]), float(offset[1])
        return (
            lambda t: np.array([o1 + ACKLEY_AMPLITUDE * math.sin(t), o2 + math.cos(t)]),
            lambda t: np.array(_ackley_zdot(t)),
        )

    return [
        MinTrajectory.analytic("local-1", *shifted(off), offset=off.tolist()),
        MinTrajectory.analytic("global", *shifted((0.0, 0.0)), offset=[0.0, 0.0]),
    ]


def builtin_tracking_quadratic(omega: float = 1.0) -> ProblemDefinition:
    """f(x, t) = (x - sin(omega t))**2 / 2; the minimiser is tracked in closed form."""
    omega = float(omega)
    if not omega > 0:
        raise InvalidParameterError(f"omega must be positive, got {omega}")

    def f(x, t):
        r = x[0] - math.sin(omega * t)
        return 0.5 * r * r

    def grad(x, t):
        return np.array([x[0] - math.sin(omega * t)])

    def hess(x, t):
        return np.array([[1.0]])

    def f_batch(X, t):
        r = X[:, 0] - math.sin(omega * t)
        return 0.5 * r * r

    def grad_batch(X, t):
        return X - math.sin(omega * t)

    return ProblemDefinition(
        n=1, m=0, f=f, grad_f=grad, hess_f=hess, lower_bound=0.0,
        name="tracking-quadratic", params={"omega": omega},
        batch=BatchEvaluators(f=f_batch, grad_f=grad_batch),
    )


def tracking_quadratic_trajectories(omega: float = 1.0) -> list:
    omega = float(omega)
    return [
        MinTrajectory.analytic(
            "global",
            lambda t: np.array([math.sin(omega * t)]),
            lambda t: np.array([omega * math.cos(omega * t)]),
        )
    ]


def tracking_quadratic_solution(t, x0, alpha, omega=1.0):
    """Closed-form solution of x' = -(x - sin(omega t)) / alpha from x(0) = x0."""
    t = np.asarray(t, dtype=float)
    den = 1.0 + (alpha * omega) ** 2
    particular = (np.sin(omega * t) - alpha * omega * np.cos(omega * t)) / den
    p0 = -alpha * omega / den
    return particular + (x0 - p0) * np.exp(-t / alpha)


# -- registry -----------------------------------------------------------------

_REGISTRY = {}


def register_problem(name: str, factory, trajectories=None, defaults=None):
    """Make a problem addressable by name from scenario files.

    ``factory(**params)`` returns a ProblemDefinition;
    ``trajectories(**params)`` optionally returns known MinTrajectory objects.
    """
    _REGISTRY[name] = (factory, trajectories, dict(defaults or {}))


register_problem("quartic", builtin_quartic, quartic_trajectories, {"b": 5.0})
register_problem("ackley-constrained", builtin_ackley_constrained, ackley_trajectories, {"d": 0.01})
register_problem(
    "tracking-quadratic", builtin_tracking_quadratic, tracking_quadratic_trajectories, {"omega": 1.0}
)


def registered_problems() -> list:
    return sorted(_REGISTRY)


def _lookup(name):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise InvalidParameterError(
            f"unknown problem {name!r}; known: {', '.join(registered_problems())}"
        ) from None


def problem_defaults(name: str) -> dict:
    return dict(_lookup(name)[2])


def make_problem(name: str, params: Optional[dict] = None) -> ProblemDefinition:
    factory, _, defaults = _lookup(name)
    kw = {**defaults, **(params or {})}
    try:
        return factory(**kw)
    except TypeError as exc:
        raise InvalidParameterError(f"bad parameters for {name!r}: {exc}") from None


def known_trajectories(name: str, params: Optional[dict] = None) -> list:
    _, traj, defaults = _lookup(name)
    if traj is None:
        return []
    return traj(**{**defaults, **(params or {})})
