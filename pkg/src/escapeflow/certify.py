"""Sampled certificates for one-point convexity, shallowness, domination,
jumping, tracking and escaping.

Every certificate here is Monte Carlo evidence over finite samples and
grids, not a proof. Sample counts and seeds are stored on each result so
a run can be reproduced exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import (
    BranchLossError,
    CertificateRefusal,
    ConvergenceError,
    InvalidParameterError,
    RankDeficiencyError,
    RetractionError,
    SamplingError,
)
from .flow import FlowConfig, TrajectoryRecord, frozen_flow_classify, integrate_pode_batch
from .geometry import error_field_U_batch, evaluate_geometry, retract, tangent_basis
from .problem import MinTrajectory, ProblemDefinition

EVIDENCE = "sampled evidence, not a proof"


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))


def _num(v):
    """JSON-safe float: non-finite values become None."""
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _vec(v):
    return [float(a) for a in np.atleast_1d(v)]


# -- regions ------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box of offsets, lo <= e <= hi."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise InvalidParameterError("box needs lo < hi componentwise")
        object.__setattr__(self, "lo", tuple(lo.tolist()))
        object.__setattr__(self, "hi", tuple(hi.tolist()))

    @property
    def n(self):
        return len(self.lo)

    def contains(self, E, tol=1e-9):
        E = np.atleast_2d(E)
        return np.all((E >= np.asarray(self.lo) - tol) & (E <= np.asarray(self.hi) + tol), axis=1)

    def contains_ball(self, center, radius) -> bool:
        c = np.asarray(center, float)
        return bool(np.all(c - radius >= np.asarray(self.lo)) and np.all(c + radius <= np.asarray(self.hi)))

    def sample(self, rng, k):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return lo + (hi - lo) * rng.random((k, self.n))

    def faces(self):
        """(outward normal, offset) pairs: the face is normal . e = offset."""
        out = []
        for i in range(self.n):
            nrm = np.zeros(self.n)
            nrm[i] = -1.0
            out.append((nrm.copy(), -self.lo[i]))
            nrm[i] = 1.0
            out.append((nrm.copy(), self.hi[i]))
        return out

    def active_normals(self, e, tol=1e-7):
        return [nrm for nrm, off in self.faces() if abs(float(nrm @ e) - off) <= tol * (1 + abs(off))]

    def to_dict(self):
        return {"box": {"lo": list(self.lo), "hi": list(self.hi)}}


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidParameterError("ball radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def n(self):
        return len(self.center)

    def contains(self, E, tol=1e-9):
        E = np.atleast_2d(E)
        return np.linalg.norm(E - np.asarray(self.center), axis=1) <= self.radius + tol

    def contains_ball(self, center, radius) -> bool:
        return float(np.linalg.norm(np.asarray(center) - np.asarray(self.center))) + radius <= self.radius

    def sample(self, rng, k):
        d = rng.standard_normal((k, self.n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        rad = self.radius * rng.random(k) ** (1.0 / self.n)
        return np.asarray(self.center) + d * rad[:, None]

    def active_normals(self, e, tol=1e-7):
        r = np.asarray(e) - np.asarray(self.center)
        nr = float(np.linalg.norm(r))
        return [r / nr] if abs(nr - self.radius) <= tol * (1 + self.radius) else []

    def to_dict(self):
        return {"ball": {"center": list(self.center), "radius": self.radius}}


def region_from_dict(d: dict):
    if "box" in d:
        return Box(tuple(d["box"]["lo"]), tuple(d["box"]["hi"]))
    if "ball" in d:
        return Ball(tuple(d["ball"]["center"]), float(d["ball"]["radius"]))
    raise InvalidParameterError("region must be {'box': {lo, hi}} or {'ball': {center, radius}}")


# -- row-wise helpers ------------------------------------------------------------


def _retract_rows(p, X, t, tol=1e-12):
    """Retract every row onto M(t); returns (points, ok-mask)."""
    X = np.array(X, dtype=float).reshape(-1, p.n)
    ok = np.ones(len(X), dtype=bool)
    if p.m == 0:
        return X, ok
    for i in range(len(X)):
        try:
            X[i] = retract(p, X[i], t, tol=tol, max_iter=30)
        except (RetractionError, RankDeficiencyError):
            ok[i] = False
    return X, ok


def _grad_L_rows(p, X, t):
    """P grad f for every row."""
    B = p.batch
    if B is None:
        return np.array([evaluate_geometry(p, x, t).grad_L for x in X]).reshape(X.shape)
    gf = np.asarray(B.grad_f(X, t), dtype=float).reshape(X.shape)
    if p.m == 0:
        return gf
    J = np.asarray(B.jac_g(X, t), dtype=float).reshape(len(X), p.m, p.n)
    G = J @ J.transpose(0, 2, 1)
    y = np.linalg.solve(G, np.einsum("kmn,kn->km", J, gf)[..., None])[..., 0]
    return gf - np.einsum("kmn,km->kn", J, y)


def _drift_norm_rows(p, X, t):
    """|Q g'| for every row."""
    if p.m == 0:
        return np.zeros(len(X))
    B = p.batch
    if B is not None and B.jac_g is not None and B.gprime is not None:
        J = np.asarray(B.jac_g(X, t), dtype=float).reshape(len(X), p.m, p.n)
        gp = np.asarray(B.gprime(X, t), dtype=float).reshape(len(X), p.m)
        y = np.linalg.solve(J @ J.transpose(0, 2, 1), gp[..., None])[..., 0]
        return np.linalg.norm(np.einsum("kmn,km->kn", J, y), axis=1)
    out = np.empty(len(X))
    for i, x in enumerate(X):
        out[i] = float(np.linalg.norm(evaluate_geometry(p, x, t).constraint_drift))
    return out


def ball_offsets(p, h, t, r, k, rng, shell_fraction=0.25):
    """Feasible offsets e with 0 < |e| <= r around h(t).

    Returns (E, n_failed). A quarter of the draws start on the sphere of
    radius r so that the boundary, where one-point moduli are usually
    smallest, is always represented.
    """
    center = h.h(t)
    n_shell = int(round(shell_fraction * k))
    if p.m == 0:
        d = rng.standard_normal((k, p.n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        rad = r * rng.random(k) ** (1.0 / p.n)
        rad[:n_shell] = r
        E = d * rad[:, None]
        return E[np.linalg.norm(E, axis=1) >= 1e-6 * r], 0
    Z = tangent_basis(evaluate_geometry(p, center, t))
    q = Z.shape[1]
    d = rng.standard_normal((k, q))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rad = r * rng.random(k) ** (1.0 / q)
    rad[:n_shell] = r
    U = d * rad[:, None]
    out, failed = [], 0
    for u in U:
        try:
            for _ in range(6):
                e = retract(p, center + Z @ u, t, tol=1e-12, max_iter=30) - center
                ne = float(np.linalg.norm(e))
                if ne <= r * (1 + 1e-12):
                    break
                u = u * (r / ne) * (1 - 1e-9)
            else:
                continue
        except (RetractionError, RankDeficiencyError):
            failed += 1
            continue
        if 1e-6 * r <= ne <= r * (1 + 1e-12):
            out.append(e)
    if failed > 0.5 * k:
        raise SamplingError(f"{failed} of {k} retractions failed at t={t}")
    return np.array(out).reshape(-1, p.n), failed


def _lp_envelope(d, y):
    """Smallest-mean affine envelope delta1*d + delta2 >= y with deltas >= 0."""
    d = np.asarray(d, float)
    y = np.asarray(y, float)
    if len(y) == 0 or np.max(y) <= 0:
        return 0.0, 0.0
    res = linprog(
        c=[float(np.mean(d)), 1.0],
        A_ub=np.column_stack([-d, -np.ones_like(d)]),
        b_ub=-y,
        bounds=[(0, None), (0, None)],
        method="highs",
    )
    if not res.success:
        return 0.0, float(np.max(y))
    d1, d2 = float(res.x[0]), float(res.x[1])
    # guard against solver tolerance leaving a sample uncovered
    slack = float(np.max(y - (d1 * d + d2)))
    return d1, d2 + max(0.0, slack)


def _trap_cumulative(ts, vals):
    ts = np.asarray(ts, float)
    vals = np.asarray(vals, float)
    out = np.zeros(len(ts))
    out[1:] = np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(ts))
    return out


def _eta_pair(ts, delta1, eta1):
    """Smallest eta2 >= 0 with int_{t0}^t delta1 <= eta1 (t - t0) + eta2 on the grid."""
    cum = _trap_cumulative(ts, delta1)
    return max(0.0, float(np.max(cum - eta1 * (np.asarray(ts) - ts[0]))))


# -- one-point strong convexity ------------------------------------------------------


@dataclass
class ConvexityCertificate:
    h: MinTrajectory
    c_hat: float
    r: float
    t_range: tuple
    n_samples: int
    min_ratio_point: tuple
    seed: int
    n_failed: int = 0
    reference: Optional[float] = None

    @property
    def valid(self) -> bool:
        return self.c_hat > 0

    def to_dict(self) -> dict:
        return {
            "kind": "convexity",
            "trajectory": self.h.label,
            "c_hat": _num(self.c_hat),
            "r": self.r,
            "t_range": list(self.t_range),
            "n_samples": self.n_samples,
            "n_retraction_failures": self.n_failed,
            "min_ratio_point": {"e": _vec(self.min_ratio_point[0]), "t": float(self.min_ratio_point[1])},
            "seed": self.seed,
            "reference_c": self.reference,
            "valid": self.valid,
            "note": EVIDENCE,
        }


def estimate_one_point_convexity(
    p: ProblemDefinition, h: MinTrajectory, r: float, t_grid, n_samples: int = 400, rng_seed: int = 0, reference=None
) -> ConvexityCertificate:
    """Smallest sampled ratio e . grad_x L(e + h(t), lambda, t) / |e|^2.

    ``n_samples`` offsets are drawn per grid time: uniformly in the r-ball
    (tangent coordinates plus retraction when constrained), a quarter of
    them on the boundary sphere.
    """
    if not r > 0:
        raise InvalidParameterError("r must be positive")
    ts = np.atleast_1d(np.asarray(t_grid, dtype=float))
    best = (math.inf, None, None)
    used = failed = 0
    for k, t in enumerate(ts):
        E, nf = ball_offsets(p, h, t, r, n_samples, _rng(rng_seed, k))
        failed += nf
        if len(E) == 0:
            continue
        X = E + h.h(t)
        gl = _grad_L_rows(p, X, t)
        ratio = np.einsum("kn,kn->k", E, gl) / np.einsum("kn,kn->k", E, E)
        i = int(np.argmin(ratio))
        used += len(E)
        if ratio[i] < best[0]:
            best = (float(ratio[i]), E[i].copy(), float(t))
    if best[1] is None:
        raise SamplingError("no usable convexity samples")
    return ConvexityCertificate(
        h=h, c_hat=best[0], r=float(r), t_range=(float(ts[0]), float(ts[-1])), n_samples=used,
        min_ratio_point=(best[1], best[2]), seed=int(rng_seed), n_failed=failed, reference=reference,
    )


# -- shallowness -------------------------------------------------------------------


@dataclass
class ShallownessReport:
    label: str
    alpha: float
    t0: float
    delta: float
    epsilon: float
    lip_hdot: float
    ra_radius: float
    ra_radius_min: float
    E_alpha: float
    shallow: bool
    reliable: bool
    n_probes: int
    seed: int

    @property
    def margin(self) -> float:
        return self.epsilon - self.E_alpha - self.lip_hdot * self.delta

    def to_dict(self) -> dict:
        return {
            "kind": "shallowness",
            "trajectory": self.label,
            "alpha": self.alpha,
            "t0": self.t0,
            "delta": self.delta,
            "epsilon": self.epsilon,
            "lip_hdot": self.lip_hdot,
            "ra_radius": self.ra_radius,
            "ra_radius_min": self.ra_radius_min,
            "E_alpha": self.E_alpha,
            "shallow": self.shallow,
            "reliable": self.reliable,
            "n_probes": self.n_probes,
            "seed": self.seed,
            "note": EVIDENCE,
        }


@dataclass
class RAProbeConfig:
    n_times: int = 9
    s_max: float = 5.0
    bisection_steps: int = 12
    seed: int = 0


def shallowness_check(
    p: ProblemDefinition, h1: MinTrajectory, alpha: float, t0: float, delta: float, ra_probe_cfg: Optional[RAProbeConfig] = None
) -> ShallownessReport:
    """Compare the speed of h1 with what its region of attraction can absorb.

    The region of attraction is probed by bisection along 2n random tangent
    directions per grid time, classifying each probe with the frozen-time
    flow. The trajectory is reported shallow when
    eps > E(alpha) + lip_hdot * delta and r <= delta (eps - E - lip_hdot delta) / 2.
    """
    cfg = ra_probe_cfg or RAProbeConfig()
    if not (alpha > 0 and delta > 0):
        raise InvalidParameterError("alpha and delta must be positive")
    ts = np.linspace(t0, t0 + delta, cfg.n_times)
    hd = np.array([h1.hdot(t) for t in ts])
    speeds = np.linalg.norm(hd, axis=1)
    eps = float(speeds.max())
    lip = float(np.max(np.linalg.norm(np.diff(hd, axis=0), axis=1) / np.diff(ts))) if len(ts) > 1 else 0.0

    radii, inside_pts, probes, conclusive = [], [], 0, False
    for k, t in enumerate(ts):
        center = h1.h(t)
        geo = evaluate_geometry(p, center, t)
        Z = tangent_basis(geo)
        rng = _rng(cfg.seed, k)
        for _ in range(2 * p.n):
            d = Z @ rng.standard_normal(Z.shape[1])
            d /= np.linalg.norm(d)

            def inside(s):
                x = center + s * d
                if p.m:
                    try:
                        x = retract(p, x, t)
                    except (RetractionError, RankDeficiencyError):
                        return False, x
                return frozen_flow_classify(p, t, x, [h1]) == h1.label, x

            lo, hi = 0.0, cfg.s_max
            ok_hi, x_hi = inside(hi)
            probes += 1
            if ok_hi:
                lo = hi
                inside_pts.append((t, x_hi))
                conclusive = True
            else:
                for _ in range(cfg.bisection_steps):
                    mid = 0.5 * (lo + hi)
                    ok, x = inside(mid)
                    probes += 1
                    if ok:
                        lo = mid
                        inside_pts.append((t, x))
                        conclusive = True
                    else:
                        hi = mid
            radii.append(lo)
    E_alpha = 0.0
    for t, x in inside_pts:
        geo = evaluate_geometry(p, x, t, alpha)
        E_alpha = max(E_alpha, float(np.linalg.norm(geo.grad_L_bar)) / alpha)
    r = float(max(radii)) if radii else 0.0
    margin = eps - E_alpha - lip * delta
    shallow = bool(conclusive and margin > 0 and r <= 0.5 * delta * margin)
    return ShallownessReport(
        label=h1.label, alpha=alpha, t0=float(t0), delta=float(delta), epsilon=eps, lip_hdot=lip,
        ra_radius=r, ra_radius_min=float(min(radii)) if radii else 0.0, E_alpha=E_alpha,
        shallow=shallow, reliable=conclusive, n_probes=probes, seed=cfg.seed,
    )


# -- equilibrium branch of U ------------------------------------------------------------


@dataclass
class EquilibriumBranch:
    times: np.ndarray
    ebar: np.ndarray
    rho: float
    max_condition: float
    extra_zeros: list = field(default_factory=list)
    mode: str = "uniform"

    def at(self, t) -> np.ndarray:
        if self.mode == "averaged" or len(self.times) == 1:
            return self.ebar[0]
        return np.array([np.interp(t, self.times, self.ebar[:, j]) for j in range(self.ebar.shape[1])])

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "rho": self.rho,
            "max_condition": self.max_condition,
            "n_times": len(self.times),
            "ebar_max_norm_time": float(self.times[int(np.argmax(np.linalg.norm(self.ebar, axis=1)))]),
            "extra_zeros": [{"t": float(t), "e": _vec(e)} for t, e in self.extra_zeros],
        }


def _bordered_newton(p, Urows, h2, t_con, e0, tol=1e-10, max_iter=60, max_halvings=30):
    """Solve U(e) + J^T mu = 0, g(e + h2(t_con), t_con) = 0 by damped Newton.

    ``Urows`` maps a (k, n) stack of offsets to the (k, n) values of U; the
    Jacobian of U is a central difference evaluated in one stacked call.
    Returns (e, condition number of the bordered Jacobian).
    """
    n, m = p.n, p.m
    e = np.array(e0, dtype=float)
    mu = np.zeros(m)
    c2 = h2.h(t_con)

    def F(e, mu):
        u = Urows(e[None, :])[0]
        if m == 0:
            return u
        J = np.asarray(p.jac_g(e + c2, t_con), float).reshape(m, n)
        return np.concatenate([u + J.T @ mu, np.asarray(p.g(e + c2, t_con), float).reshape(m)])

    r = F(e, mu)
    scale = 1.0 + float(np.linalg.norm(Urows(np.zeros((1, n)))[0]))
    cond = 1.0
    for _ in range(max_iter):
        nr = float(np.linalg.norm(r))
        if not math.isfinite(nr):
            raise ConvergenceError("non-finite residual")
        if nr <= tol * scale:
            return e, cond
        hs = 1e-7 * np.maximum(1.0, np.abs(e))
        stack = np.vstack([e + np.diag(hs), e - np.diag(hs)])
        vals = Urows(stack)
        K = np.zeros((n + m, n + m))
        K[:n, :n] = ((vals[:n] - vals[n:]) / (2 * hs)[:, None]).T
        if m:
            J = np.asarray(p.jac_g(e + c2, t_con), float).reshape(m, n)
            K[:n, n:] = J.T
            K[n:, :n] = J
        cond = float(np.linalg.cond(K))
        if not math.isfinite(cond):
            raise ConvergenceError("singular Jacobian of U")
        step = np.linalg.solve(K, -r)
        s = 1.0
        for _ in range(max_halvings):
            en, mun = e + s * step[:n], mu + s * step[n:]
            rn = F(en, mun)
            if np.linalg.norm(rn) < nr:
                break
            s *= 0.5
        else:
            raise ConvergenceError("line search failed")
        e, mu, r = en, mun, rn
    raise ConvergenceError(f"no convergence (residual {float(np.linalg.norm(r)):.3e})")


def _U_av_fn(p, h2, alpha, nodes):
    """Trapezoid average of U over the nodes, as a function of e."""
    nodes = np.asarray(nodes, float)
    w = np.zeros(len(nodes))
    dt = np.diff(nodes)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    w /= nodes[-1] - nodes[0]

    if p.batch is not None and p.batch.row_times:
        H = np.array([h2.h(t) for t in nodes])
        Hd = np.array([h2.hdot(t) for t in nodes])

        def U_av_rows(E):
            k = len(E)
            K = len(nodes)
            rows = np.tile(E, (K, 1))
            vals = error_field_U_batch(
                p, rows, np.repeat(nodes, k), alpha, h2, H=np.repeat(H, k, axis=0), Hd=np.repeat(Hd, k, axis=0)
            )
            return np.einsum("j,jkn->kn", w, vals.reshape(K, k, -1))

        return U_av_rows

    def U_av_rows(E):
        return sum(wk * error_field_U_batch(p, E, t, alpha, h2) for wk, t in zip(w, nodes))

    return U_av_rows


def equilibrium_branch(
    p: ProblemDefinition, h2: MinTrajectory, alpha: float, t_grid, r2: float,
    mode="uniform", n_probes=50, seed=0, max_cond=1e8,
) -> EquilibriumBranch:
    """Zeros of U(., t, alpha) near the target trajectory.

    Uniform mode continues the branch from e = 0 along ``t_grid``; averaged
    mode solves U_av(e) = 0 once, with ``t_grid`` as the quadrature nodes
    and the feasible set taken at the middle node. Extra zeros found from
    ``n_probes`` random starts in the r2-ball are reported and enter rho.

    Raises
    ------
    BranchLossError
        On Newton failure, an ill-conditioned Jacobian or rho >= r2.
    """
    ts = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if mode not in ("uniform", "averaged"):
        raise InvalidParameterError("mode must be 'uniform' or 'averaged'")
    solves = []
    if mode == "averaged":
        t_mid = float(ts[len(ts) // 2])
        problems = [(t_mid, _U_av_fn(p, h2, alpha, ts))]
    else:
        problems = [(float(t), (lambda tt: (lambda E: error_field_U_batch(p, E, tt, alpha, h2)))(float(t))) for t in ts]

    e = np.zeros(p.n)
    ebar, conds = [], []
    for t, Uf in problems:
        try:
            e, cond = _bordered_newton(p, Uf, h2, t, e)
        except (ConvergenceError, RankDeficiencyError, np.linalg.LinAlgError) as exc:
            raise BranchLossError(f"no zero of U near the branch at t={t}: {exc}") from exc
        if cond > max_cond:
            raise BranchLossError(f"U is numerically singular at t={t} (condition {cond:.2e})")
        ebar.append(e.copy())
        conds.append(cond)
        solves.append((t, Uf))
    ebar = np.array(ebar)

    extra = []
    rng = _rng(seed, 9)
    for k in range(n_probes):
        t, Uf = solves[k % len(solves)]
        dvec = rng.standard_normal(p.n)
        start = dvec / np.linalg.norm(dvec) * r2 * rng.random() ** (1.0 / p.n)
        if p.m:
            try:
                start = retract(p, start + h2.h(t), t) - h2.h(t)
            except (RetractionError, RankDeficiencyError):
                continue
        try:
            z, _ = _bordered_newton(p, Uf, h2, t, start, max_iter=30, max_halvings=10)
        except (ConvergenceError, RankDeficiencyError, np.linalg.LinAlgError):
            continue
        if np.linalg.norm(z) >= r2:
            continue
        ref = ebar[k % len(solves)]
        if np.linalg.norm(z - ref) > 1e-6 and all(np.linalg.norm(z - e2) > 1e-6 or t2 != t for t2, e2 in extra):
            extra.append((t, z))

    norms = [float(np.linalg.norm(v)) for v in ebar] + [float(np.linalg.norm(z)) for _, z in extra]
    rho = max(norms)
    if rho >= r2:
        raise BranchLossError(f"equilibrium offset {rho:.3e} is not inside the r2={r2} ball")
    times = np.array([t for t, _ in solves])
    return EquilibriumBranch(times, ebar, rho, float(max(conds)), extra, mode)


# -- domination ------------------------------------------------------------------------


@dataclass
class DominanceCertificate:
    h1: MinTrajectory
    h2: MinTrajectory
    alpha: float
    t1: float
    t2: float
    region: object
    rho: float
    r2: float
    w_hat: float
    invariance_ok: bool
    v: float
    mode: str
    branch: EquilibriumBranch
    dv_offsets: np.ndarray
    n_samples: int
    seed: int
    sign_violations: int = 0
    escaped_trajectories: int = 0
    n_trajectories: int = 0
    min_ratio_point: tuple = ()
    nodes: np.ndarray = None
    problem: ProblemDefinition = None
    reference: Optional[float] = None

    @property
    def valid(self) -> bool:
        return self.w_hat > 0 and self.invariance_ok and self.rho < self.r2

    def to_dict(self) -> dict:
        return {
            "kind": "dominance",
            "mode": self.mode,
            "from": self.h1.label,
            "to": self.h2.label,
            "alpha": self.alpha,
            "t1": self.t1,
            "t2": self.t2,
            "region": self.region.to_dict(),
            "v": self.v,
            "rho": self.rho,
            "r2": self.r2,
            "w_hat": _num(self.w_hat),
            "invariance_ok": self.invariance_ok,
            "sign_violations": self.sign_violations,
            "trajectories_checked": self.n_trajectories,
            "trajectories_left_region": self.escaped_trajectories,
            "min_ratio_point": (
                {"e": _vec(self.min_ratio_point[0]), "t": _num(self.min_ratio_point[1])} if self.min_ratio_point else None
            ),
            "branch": self.branch.to_dict(),
            "n_samples": self.n_samples,
            "seed": self.seed,
            "reference_w": self.reference,
            "valid": self.valid,
            "note": EVIDENCE,
        }


def _region_offsets(p, h2, t, region, k, rng):
    """Feasible offsets inside the region at time t: draw, retract, filter."""
    raw = region.sample(rng, k)
    if p.m == 0:
        return raw
    X, ok = _retract_rows(p, raw + h2.h(t), t)
    E = X[ok] - h2.h(t)
    return E[region.contains(E)]


def _boundary_offsets(p, h2, t, region, k, rng):
    """Points of the region boundary that are feasible at time t.

    Each draw is pushed onto one face (or the sphere) and onto M(t)
    together by minimum-norm Newton on the stacked equations.
    """
    c = h2.h(t)
    out = []
    draws = region.sample(rng, k)
    if isinstance(region, Box):
        faces = region.faces()
    for i, e in enumerate(draws):
        if isinstance(region, Box):
            nrm, off = faces[i % len(faces)]

            def face(e):
                return np.array([nrm @ e - off]), nrm[None, :]
        else:
            cen = np.asarray(region.center)

            def face(e):
                r = e - cen
                return np.array([r @ r - region.radius**2]), 2 * r[None, :]

        ok = False
        for _ in range(40):
            fr, fJ = face(e)
            if p.m:
                gv = np.asarray(p.g(e + c, t), float).reshape(p.m)
                J = np.asarray(p.jac_g(e + c, t), float).reshape(p.m, p.n)
                res = np.concatenate([gv, fr])
                A = np.vstack([J, fJ])
            else:
                res, A = fr, fJ
            if np.linalg.norm(res) <= 1e-12 * (1 + np.linalg.norm(e)):
                ok = True
                break
            step, *_ = np.linalg.lstsq(A, -res, rcond=None)
            e = e + step
            if not np.all(np.isfinite(e)):
                break
        if ok and region.contains(e[None, :], tol=1e-9)[0]:
            out.append(e)
    if not out:
        return np.zeros((0, p.n))
    E = np.array(out)
    # drop duplicates so corner points are not counted many times
    keep = []
    for e in E:
        if all(np.linalg.norm(e - q) > 1e-9 for q in keep):
            keep.append(e)
    return np.array(keep)


def check_dominance(
    p: ProblemDefinition,
    h1: MinTrajectory,
    h2: MinTrajectory,
    alpha: float,
    t1: float,
    t2: float,
    D,
    v: float,
    n_samples: int = 400,
    rng_seed: int = 0,
    mode: str = "uniform",
    r2: float = 0.5,
    n_times: int = 17,
    n_avg_nodes: int = 65,
    n_trajectories: int = 100,
    dt: float = 1e-3,
    reference=None,
) -> DominanceCertificate:
    """Sample the one-point monotonicity of U over the region D.

    ``D`` is a :class:`Box` or :class:`Ball` of offsets e = x - h2(t). It
    must contain the feasible v-ball around h1 and the rho-ball around 0.
    Invariance is checked twice: the field -U/alpha may not point out of D
    at feasible boundary points, and at least ``n_trajectories`` flows
    seeded on and inside the boundary must stay in D over [t1, t2].
    """
    if mode not in ("uniform", "averaged"):
        raise InvalidParameterError("mode must be 'uniform' or 'averaged'")
    if not t2 > t1:
        raise InvalidParameterError("need t2 > t1")
    if n_avg_nodes < 64 and mode == "averaged":
        raise InvalidParameterError("averaged mode needs at least 64 quadrature nodes")
    ts = np.linspace(t1, t2, n_times)
    nodes = np.linspace(t1, t2, n_avg_nodes)
    branch = equilibrium_branch(p, h2, alpha, ts if mode == "uniform" else nodes, r2, mode=mode, seed=rng_seed)
    rho = branch.rho

    # D must cover the v-neighbourhood of h1 and the rho-ball
    dv, _ = ball_offsets(p, h1, t1, v, 200, _rng(rng_seed, 1))
    dv = np.vstack([np.zeros((1, p.n)), dv]) + (h1.h(t1) - h2.h(t1))
    if not np.all(D.contains(dv)):
        raise CertificateRefusal("region does not contain the v-neighbourhood of h1")
    if not D.contains_ball(np.zeros(p.n), rho):
        raise CertificateRefusal("region does not contain the rho-ball around 0")

    if mode == "averaged":
        U_av_rows = _U_av_fn(p, h2, alpha, nodes)

    w_hat, arg, used = math.inf, (), 0
    sample_times = ts if mode == "uniform" else ts[:: max(1, len(ts) // 4)]
    for k, t in enumerate(sample_times):
        rng = _rng(rng_seed, 2, k)
        E = np.vstack([_region_offsets(p, h2, t, D, n_samples, rng), _boundary_offsets(p, h2, t, D, 4 * p.n, rng), dv])
        eb = branch.at(t)
        diff = E - eb
        nd2 = np.einsum("kn,kn->k", diff, diff)
        keep = nd2 > 1e-18
        E, diff, nd2 = E[keep], diff[keep], nd2[keep]
        Uv = error_field_U_batch(p, E, t, alpha, h2) if mode == "uniform" else U_av_rows(E)
        ratio = np.einsum("kn,kn->k", Uv, diff) / nd2
        used += len(E)
        i = int(np.nanargmin(ratio))
        if ratio[i] < w_hat:
            w_hat, arg = float(ratio[i]), (E[i].copy(), float(t) if mode == "uniform" else None)

    # (a) the field may not point out of D at the boundary
    violations = 0
    seeds = []
    for k, t in enumerate(ts):
        Eb = _boundary_offsets(p, h2, t, D, 8 * p.n, _rng(rng_seed, 3, k))
        if k == 0:
            seeds.extend(Eb)
        if len(Eb) == 0:
            continue
        vel = -error_field_U_batch(p, Eb, t, alpha, h2) / alpha
        for e, vv in zip(Eb, vel):
            for nrm in D.active_normals(e):
                if float(nrm @ vv) > 1e-9 * (1 + np.linalg.norm(vv)):
                    violations += 1
    # (b) flows seeded on the boundary and inside D must stay in D
    inner = _region_offsets(p, h2, t1, D, 4 * n_trajectories, _rng(rng_seed, 4))
    seeds = np.array(list(seeds) + list(inner))[: max(n_trajectories, len(seeds))]
    if len(seeds) < n_trajectories:
        raise SamplingError(f"only {len(seeds)} feasible seeds for the containment check")
    recs = integrate_pode_batch(p, seeds + h2.h(t1), t1, t2, FlowConfig(alpha=alpha, dt=dt, record_every=5))
    escaped = 0
    for rec in recs:
        if "aborted" in rec.meta:
            escaped += 1
            continue
        E = rec.states - np.array([h2.h(t) for t in rec.t])
        if not np.all(D.contains(E, tol=1e-7)):
            escaped += 1
    return DominanceCertificate(
        h1=h1, h2=h2, alpha=alpha, t1=float(t1), t2=float(t2), region=D, rho=rho, r2=float(r2), w_hat=w_hat,
        invariance_ok=violations == 0 and escaped == 0, v=float(v), mode=mode, branch=branch, dv_offsets=dv,
        n_samples=used, seed=int(rng_seed), sign_violations=violations, escaped_trajectories=escaped,
        n_trajectories=len(recs), min_ratio_point=arg, nodes=nodes, problem=p, reference=reference,
    )


# -- jumping ------------------------------------------------------------------------------


def uniform_jump_interval(alpha, rho, r2, w, theta, dist) -> float:
    """Shortest interval that the uniform jump inequality accepts.

    max{ alpha rho / ((r2 - rho) theta w), alpha ln(dist / (r2 - rho)) / ((1 - theta) w) }
    """
    if not 0 < theta < 1:
        raise InvalidParameterError("theta must lie in (0, 1)")
    if not (w > 0 and r2 > rho):
        return math.inf
    first = alpha * rho / ((r2 - rho) * theta * w)
    second = alpha * math.log(dist / (r2 - rho)) / ((1 - theta) * w) if dist > 0 else -math.inf
    return max(first, second, 0.0)


@dataclass
class JumpCertificate:
    dominance: DominanceCertificate
    mode: str
    required_interval: Optional[float]
    actual_interval: float
    valid: bool
    worst_distance: float
    theta: Optional[float] = None
    beta1: Optional[float] = None
    beta2: Optional[float] = None
    eta1: Optional[float] = None
    eta2: Optional[float] = None
    lhs: Optional[float] = None
    rhs: Optional[float] = None
    delta_nodes: Optional[np.ndarray] = None
    delta1: Optional[np.ndarray] = None
    delta2: Optional[np.ndarray] = None
    n_fit_samples: int = 0
    reason: str = ""

    @property
    def r2(self):
        return self.dominance.r2

    def to_dict(self) -> dict:
        d = {
            "kind": "jump",
            "mode": self.mode,
            "from": self.dominance.h1.label,
            "to": self.dominance.h2.label,
            "alpha": self.dominance.alpha,
            "t1": self.dominance.t1,
            "t2": self.dominance.t2,
            "r2": self.r2,
            "rho": self.dominance.rho,
            "w_hat": _num(self.dominance.w_hat),
            "worst_distance": self.worst_distance,
            "actual_interval": self.actual_interval,
            "required_interval": None if self.required_interval is None else _num(self.required_interval),
            "valid": self.valid,
            "reason": self.reason,
            "note": EVIDENCE,
        }
        if self.mode == "uniform":
            d["theta"] = self.theta
        else:
            d.update(
                beta1=_num(self.beta1) if self.beta1 is not None else None,
                beta2=_num(self.beta2) if self.beta2 is not None else None,
                eta1=self.eta1,
                eta2=self.eta2,
                lhs=_num(self.lhs) if self.lhs is not None else None,
                rhs=self.rhs,
                delta1_max=float(np.max(self.delta1)),
                delta2_max=float(np.max(self.delta2)),
                n_fit_samples=self.n_fit_samples,
            )
        return d


def _worst_distance(dom, e1_set, eb):
    E = dom.dv_offsets if e1_set is None else np.atleast_2d(np.asarray(e1_set, float))
    return float(np.max(np.linalg.norm(E - eb, axis=1)))


def jump_certificate(dom: DominanceCertificate, e1_set=None, theta: float = 0.2) -> JumpCertificate:
    """Uniform-mode jump test: compare t2 - t1 with the required interval.

    ``e1_set`` defaults to the sampled v-neighbourhood of h1 stored on
    the dominance certificate.
    """
    if not 0 < theta < 1:
        raise InvalidParameterError("theta must lie in (0, 1)")
    if dom.mode != "uniform":
        raise CertificateRefusal("uniform jump test needs a uniform-mode dominance certificate")
    if not dom.valid:
        raise CertificateRefusal("dominance certificate is not valid")
    dist = _worst_distance(dom, e1_set, dom.branch.at(dom.t1))
    req = uniform_jump_interval(dom.alpha, dom.rho, dom.r2, dom.w_hat, theta, dist)
    actual = dom.t2 - dom.t1
    ok = actual >= req
    return JumpCertificate(
        dominance=dom, mode="uniform", required_interval=req, actual_interval=actual, valid=ok,
        worst_distance=dist, theta=theta,
        reason="" if ok else f"interval {actual:.4g} shorter than required {req:.4g}",
    )


def averaged_jump_lhs(w, alpha, dist, nodes, delta1, delta2, eta1):
    """Left side of the averaged jump inequality for a given eta1.

    Returns (lhs, beta1, eta2); lhs is inf when beta1 <= 0.
    """
    nodes = np.asarray(nodes, float)
    eta2 = _eta_pair(nodes, delta1, eta1)
    beta1 = w / alpha - eta1
    if not beta1 > 0:
        return math.inf, beta1, eta2
    span = nodes[-1] - nodes[0]
    integrand = np.exp(-beta1 * (nodes[-1] - nodes)) * np.asarray(delta2, float)
    integral = float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(nodes)))
    b2 = math.exp(eta2)
    return b2 * dist * math.exp(-beta1 * span) + b2 * integral, beta1, eta2


def jump_certificate_averaged(
    dom: DominanceCertificate, e1_set=None, n_fit: int = 500, rng_seed: Optional[int] = None
) -> JumpCertificate:
    """Averaging-based jump test.

    Bounds |p(e,t)| <= delta1(t) |e - ebar| + delta2(t), where
    p = -(U - U_av) / alpha, by a non-negative affine upper envelope over
    ``n_fit`` feasible samples per quadrature node. eta1 is chosen to
    minimise the left side of the inequality; eta2 then follows from the
    running integral of delta1.
    """
    if dom.mode != "averaged":
        raise CertificateRefusal("averaged jump test needs an averaged-mode dominance certificate")
    if not dom.valid:
        raise CertificateRefusal("dominance certificate is not valid")
    if n_fit < 500:
        raise InvalidParameterError("need at least 500 fit samples per node")
    p, h2, alpha = dom.problem, dom.h2, dom.alpha
    seed = dom.seed if rng_seed is None else rng_seed
    nodes = np.asarray(dom.nodes)
    eb = dom.branch.at(dom.t1)
    U_av_rows = _U_av_fn(p, h2, alpha, nodes)
    d1s, d2s, n_used = [], [], 0
    for k, t in enumerate(nodes):
        E = _region_offsets(p, h2, t, dom.region, n_fit, _rng(seed, 5, k))
        E = np.vstack([E, dom.dv_offsets])
        pert = (error_field_U_batch(p, E, t, alpha, h2) - U_av_rows(E)) / alpha
        y = np.linalg.norm(pert, axis=1)
        dd = np.linalg.norm(E - eb, axis=1)
        d1, d2 = _lp_envelope(dd, y)
        d1s.append(d1)
        d2s.append(d2)
        n_used += len(E)
    d1s, d2s = np.array(d1s), np.array(d2s)
    dist = _worst_distance(dom, e1_set, eb)
    rhs = dom.r2 - dom.rho
    cands = np.unique(np.concatenate([np.linspace(0.0, max(float(d1s.max()), 0.0), 201), [float(np.mean(d1s))]]))
    best = (math.inf, None, None, None)
    for eta1 in cands:
        lhs, b1, eta2 = averaged_jump_lhs(dom.w_hat, alpha, dist, nodes, d1s, d2s, eta1)
        if lhs < best[0]:
            best = (lhs, b1, eta2, float(eta1))
    lhs, b1, eta2, eta1 = best
    if b1 is None:
        reason = "averaging gap too large for this alpha"
        return JumpCertificate(
            dominance=dom, mode="averaged", required_interval=None, actual_interval=dom.t2 - dom.t1, valid=False,
            worst_distance=dist, lhs=math.inf, rhs=rhs, delta_nodes=nodes, delta1=d1s, delta2=d2s,
            n_fit_samples=n_used, reason=reason,
        )
    ok = lhs <= rhs
    return JumpCertificate(
        dominance=dom, mode="averaged", required_interval=None, actual_interval=dom.t2 - dom.t1, valid=ok,
        worst_distance=dist, beta1=b1, beta2=math.exp(eta2), eta1=eta1, eta2=eta2, lhs=lhs, rhs=rhs,
        delta_nodes=nodes, delta1=d1s, delta2=d2s, n_fit_samples=n_used,
        reason="" if ok else f"bound {lhs:.4g} exceeds r2 - rho = {rhs:.4g}",
    )


# -- tracking ----------------------------------------------------------------------------


@dataclass
class TrackingCertificate:
    h2: MinTrajectory
    alpha: float
    c2: float
    r2: float
    gamma_sup: float
    times: np.ndarray
    delta1: np.ndarray
    delta2: np.ndarray
    gamma: np.ndarray
    eta1: float
    eta2: float
    alpha_max: float
    initial_error: float
    n_samples: int
    seed: int
    reference: Optional[float] = None

    @property
    def valid(self) -> bool:
        return self.c2 > 0 and self.alpha <= self.alpha_max and self.initial_error <= self.r2 / math.exp(self.eta2)

    @property
    def ultimate_bound(self) -> float:
        """Limit of the predicted error for large t."""
        beta = self.c2 / self.alpha - self.eta1
        if not beta > 0:
            return math.inf
        return math.exp(self.eta2) * float(np.max(self.delta2 + self.gamma)) / beta

    def _forcing_upper(self):
        """Piecewise-constant upper bound of delta2 + gamma on the fine grid."""
        q = self.delta2 + self.gamma
        ts = self.times
        dt = np.diff(ts)
        lip = float(np.max(np.abs(np.diff(q)) / dt)) if len(ts) > 1 else 0.0
        return np.maximum(q[1:], q[:-1]) + lip * dt

    def predicted_error(self, t, e1_norm=None, t1=None) -> np.ndarray:
        """Bound on |x(t) - h2(t)| for a start at t1 with |e(t1)| = e1_norm.

        The forcing integral is taken exactly for a piecewise-constant upper
        envelope of delta2 + gamma; beyond the certificate grid the supremum
        is used.
        """
        e1 = self.initial_error if e1_norm is None else float(e1_norm)
        t1 = float(self.times[0]) if t1 is None else float(t1)
        beta = self.c2 / self.alpha - self.eta1
        tq = np.atleast_1d(np.asarray(t, dtype=float))
        if not beta > 0:
            return np.full(tq.shape, math.inf)
        b2 = math.exp(self.eta2)
        up = self._forcing_upper()
        qsup = float(np.max(up))
        grid = self.times
        # piecewise constant forcing on [t1, max t]
        t_end = float(np.max(tq))
        knots = [t1]
        vals = []
        i = int(np.searchsorted(grid, t1, side="right")) - 1
        cur = t1
        while cur < t_end:
            if 0 <= i < len(up):
                nxt = min(float(grid[i + 1]), t_end)
                vals.append(float(up[i]))
            else:
                nxt = t_end
                vals.append(qsup)
            if nxt <= cur:
                nxt = t_end
            knots.append(nxt)
            cur = nxt
            i += 1
        knots = np.array(knots)
        vals = np.array(vals)
        # forced response at the knots
        acc = np.zeros(len(knots))
        for j in range(1, len(knots)):
            h = knots[j] - knots[j - 1]
            acc[j] = acc[j - 1] * math.exp(-beta * h) + vals[j - 1] * (-math.expm1(-beta * h)) / beta
        out = np.empty(tq.shape)
        for idx, tt in enumerate(tq):
            if tt <= t1:
                out[idx] = b2 * e1
                continue
            j = int(np.searchsorted(knots, tt, side="right")) - 1
            j = min(j, len(knots) - 1)
            h = tt - knots[j]
            forced = acc[j] * math.exp(-beta * h)
            if j < len(vals):
                forced += vals[j] * (-math.expm1(-beta * h)) / beta
            out[idx] = b2 * e1 * math.exp(-beta * (tt - t1)) + b2 * forced
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "tracking",
            "trajectory": self.h2.label,
            "alpha": self.alpha,
            "c2": self.c2,
            "r2": self.r2,
            "gamma_sup": self.gamma_sup,
            "delta1_max": float(np.max(self.delta1)),
            "delta2_max": float(np.max(self.delta2)),
            "eta1": self.eta1,
            "eta2": self.eta2,
            "alpha_max": _num(self.alpha_max),
            "alpha_max_unbounded": not math.isfinite(self.alpha_max),
            "initial_error": self.initial_error,
            "ultimate_bound": _num(self.ultimate_bound),
            "n_samples": self.n_samples,
            "seed": self.seed,
            "reference_alpha_max": self.reference,
            "valid": self.valid,
            "note": EVIDENCE,
        }


def _alpha_max(c2, r2, eta1, eta2, sup_q):
    den = math.exp(eta2) * sup_q + eta1 * r2
    return math.inf if den <= 0 else c2 * r2 / den


def tracking_certificate(
    p: ProblemDefinition, h2: MinTrajectory, alpha: float, conv: ConvexityCertificate, t_grid,
    n_samples: int = 500, rng_seed: int = 0, initial_error: Optional[float] = None, reference=None,
) -> TrackingCertificate:
    """Largest inertia for which the flow provably stays near h2.

    delta1, delta2 bound the constraint drift |Q g'| over feasible offsets in
    the r2-ball; eta1 is chosen to maximise alpha_max subject to
    ``initial_error <= r2 / exp(eta2)`` (default initial error r2).
    """
    if not conv.valid:
        raise CertificateRefusal("convexity certificate has c_hat <= 0")
    if conv.h.label != h2.label:
        raise CertificateRefusal("convexity certificate refers to another trajectory")
    c2, r2 = conv.c_hat, conv.r
    e1 = r2 if initial_error is None else float(initial_error)
    ts = np.asarray(t_grid, dtype=float)
    if len(ts) < 2 or np.any(np.diff(ts) <= 0):
        raise InvalidParameterError("t_grid must be increasing with at least two points")
    gamma = np.array([float(np.linalg.norm(h2.hdot(t))) for t in ts])
    d1s = np.zeros(len(ts))
    d2s = np.zeros(len(ts))
    used = 0
    if p.m:
        for k, t in enumerate(ts):
            E, _ = ball_offsets(p, h2, t, r2, n_samples, _rng(rng_seed, 6, k))
            E = np.vstack([np.zeros((1, p.n)), E])
            y = _drift_norm_rows(p, E + h2.h(t), t)
            d1s[k], d2s[k] = _lp_envelope(np.linalg.norm(E, axis=1), y)
            used += len(E)
    sup_q = float(np.max(d2s + gamma))
    cap = math.log(r2 / e1) if e1 > 0 else math.inf
    best = None
    for eta1 in np.unique(np.concatenate([np.linspace(0, float(d1s.max()), 401), [float(d1s.mean())]])):
        eta2 = _eta_pair(ts, d1s, eta1)
        if eta2 > cap + 1e-15:
            continue
        am = _alpha_max(c2, r2, eta1, eta2, sup_q)
        if best is None or am > best[0]:
            best = (am, float(eta1), eta2)
    if best is None:
        # no admissible pair: report the one with the smallest eta2
        eta1 = float(d1s.max())
        eta2 = _eta_pair(ts, d1s, eta1)
        best = (_alpha_max(c2, r2, eta1, eta2, sup_q), eta1, eta2)
    am, eta1, eta2 = best
    return TrackingCertificate(
        h2=h2, alpha=float(alpha), c2=c2, r2=r2, gamma_sup=float(gamma.max()), times=ts, delta1=d1s,
        delta2=d2s, gamma=gamma, eta1=eta1, eta2=eta2, alpha_max=am, initial_error=e1, n_samples=used,
        seed=int(rng_seed), reference=reference,
    )


# -- escaping -------------------------------------------------------------------------------


@dataclass
class EscapeCertificate:
    jump: JumpCertificate
    tracking: TrackingCertificate

    @property
    def valid(self) -> bool:
        return self.jump.valid and self.tracking.valid

    def to_dict(self) -> dict:
        return {
            "kind": "escape",
            "from": self.jump.dominance.h1.label,
            "to": self.tracking.h2.label,
            "alpha": self.tracking.alpha,
            "r2": self.tracking.r2,
            "v": self.jump.dominance.v,
            "jump_mode": self.jump.mode,
            "jump_valid": self.jump.valid,
            "tracking_valid": self.tracking.valid,
            "valid": self.valid,
            "note": EVIDENCE,
        }


def escape_certificate(jump: JumpCertificate, track: TrackingCertificate) -> EscapeCertificate:
    """Conjunction of a jump onto h2 and tracking of h2 at the same radius."""
    if jump.dominance.h2.label != track.h2.label:
        raise CertificateRefusal("jump and tracking certificates target different trajectories")
    if abs(jump.dominance.alpha - track.alpha) > 1e-12:
        raise CertificateRefusal("jump and tracking certificates use different alpha")
    if abs(jump.r2 - track.r2) > 1e-12 * max(1.0, track.r2):
        raise CertificateRefusal(f"jump radius {jump.r2} differs from tracking radius {track.r2}")
    return EscapeCertificate(jump, track)


@dataclass
class SequentialJumpReport:
    jumps: list
    chain: list
    valid: bool
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "kind": "sequential-jump",
            "chain": self.chain,
            "intervals": [[j.dominance.t1, j.dominance.t2] for j in self.jumps],
            "valid": self.valid,
            "reason": self.reason,
            "note": EVIDENCE,
        }


def sequential_jump_report(jumps: Sequence[JumpCertificate]) -> SequentialJumpReport:
    """Compose jumps h_a -> h_b, h_b -> h_c, ... over disjoint, ordered intervals."""
    if not jumps:
        raise InvalidParameterError("need at least one jump certificate")
    chain = [jumps[0].dominance.h1.label] + [j.dominance.h2.label for j in jumps]
    for a, b in zip(jumps, jumps[1:]):
        if a.dominance.h2.label != b.dominance.h1.label:
            return SequentialJumpReport(list(jumps), chain, False, "consecutive jumps do not connect")
        if b.dominance.t1 < a.dominance.t2:
            return SequentialJumpReport(list(jumps), chain, False, "intervals overlap or are out of order")
    bad = [i for i, j in enumerate(jumps) if not j.valid]
    if bad:
        return SequentialJumpReport(list(jumps), chain, False, f"jump {bad[0]} is not certified")
    return SequentialJumpReport(list(jumps), chain, True)


# -- empirical jump detection ---------------------------------------------------------------


@dataclass
class JumpEvent:
    t: float
    from_label: str
    to_label: str

    def to_dict(self):
        return {"t": self.t, "from": self.from_label, "to": self.to_label}


def classify_record(p: ProblemDefinition, record: TrajectoryRecord, minima, stride=None, max_points=600):
    """Frozen-time region-of-attraction labels on a decimated copy of the record."""
    n = len(record)
    if stride is None:
        stride = max(1, int(math.ceil(n / max_points)))
    idx = list(range(0, n, stride))
    if idx[-1] != n - 1:
        idx.append(n - 1)
    ordered = sorted(minima, key=lambda h: h.label)
    return [(record.t[i], frozen_flow_classify(p, record.t[i], record.x[i], ordered)) for i in idx]


def detect_jumps(
    p: ProblemDefinition, record: TrajectoryRecord, minima: Sequence[MinTrajectory], window: float = 0.1,
    stride=None, max_points=600,
) -> list:
    """Changes of region-of-attraction label that persist for ``window``.

    Unclassified ("diverged") samples are skipped. The event time is the
    first sample carrying the new label.
    """
    labels = [(t, lab) for t, lab in classify_record(p, record, minima, stride, max_points) if lab != "diverged"]
    events = []
    if not labels:
        return events
    current = labels[0][1]
    i = 1
    while i < len(labels):
        t, lab = labels[i]
        if lab != current:
            j = i
            while j < len(labels) and labels[j][1] == lab:
                j += 1
            if labels[j - 1][0] - t >= window:
                events.append(JumpEvent(float(t), current, lab))
                current = lab
            i = j
        else:
            i += 1
    return events
