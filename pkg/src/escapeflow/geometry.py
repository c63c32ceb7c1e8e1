"""Projection geometry of the moving feasible set.

All quantities follow from the constraint Jacobian J at (x, t):

    P = I - J^T (J J^T)^{-1} J       projector onto the tangent plane
    Q = J^T (J J^T)^{-1}             pulls constraint drift back into state space
    lambda     = -(J J^T)^{-1} J grad f
    lambda_bar = lambda + alpha (J J^T)^{-1} g'

The inertial flow is  x' = -(1/alpha) P grad f - Q g'.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import EvaluationError, RankDeficiencyError, RetractionError
from .problem import MinTrajectory, ProblemDefinition

RANK_TOL = 1e-10
DENSE_LIMIT = 200


class _Gram:
    """Cholesky-factored J J^T with the full-row-rank guard."""

    __slots__ = ("J", "_scalar", "_factor", "sigma_min")

    def __init__(self, J, x, t, rank_tol=RANK_TOL):
        self.J = J
        m = J.shape[0]
        if m == 1:
            row = J[0]
            G = float(row @ row)
            self.sigma_min = G
            # a single row is rank deficient only when it vanishes
            if not (G > 0.0 and np.isfinite(G)):
                raise RankDeficiencyError(x, t, G, rank_tol * G)
            self._scalar = G
            self._factor = None
            return
        G = J @ J.T
        eig = np.linalg.eigvalsh(G)
        self.sigma_min = float(eig[0])
        threshold = rank_tol * float(eig[-1])
        if not eig[0] > threshold or eig[-1] == 0.0:
            raise RankDeficiencyError(x, t, float(eig[0]), threshold)
        self._scalar = None
        self._factor = cho_factor(G)

    def solve(self, rhs):
        if self._scalar is not None:
            return rhs / self._scalar
        return cho_solve(self._factor, rhs)


def _check(name, arr, x, t):
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(name, x, t)
    return arr


def _jac(p, x, t):
    return _check("jac_g", np.asarray(p.jac_g(x, t), dtype=float).reshape(p.m, p.n), x, t)


def _grad(p, x, t):
    return _check("grad_f", np.asarray(p.grad_f(x, t), dtype=float).reshape(p.n), x, t)


def _gprime(p, x, t):
    return _check("gprime", np.asarray(p.gprime(x, t), dtype=float).reshape(p.m), x, t)


@dataclass
class GeometryEval:
    x: np.ndarray
    t: float
    alpha: float
    P: Optional[np.ndarray]  # None above DENSE_LIMIT; use apply_P
    Q: np.ndarray
    J: np.ndarray
    grad_f: np.ndarray
    gprime: np.ndarray
    lam: np.ndarray
    lambda_bar: np.ndarray
    grad_L: np.ndarray
    sigma_min: float

    def apply_P(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.P is not None:
            return self.P @ v
        if self.J.shape[0] == 0:
            return v.copy()
        G = self.J @ self.J.T
        return v - self.J.T @ np.linalg.solve(G, self.J @ v)

    @property
    def projected_gradient(self) -> np.ndarray:
        return self.grad_L

    @property
    def constraint_drift(self) -> np.ndarray:
        """Q g', the state-space correction for constraint motion."""
        if self.J.shape[0] == 0:
            return np.zeros_like(self.x)
        return self.Q @ self.gprime

    @property
    def grad_L_bar(self) -> np.ndarray:
        """Gradient of the Lagrangian at lambda_bar: P grad f + alpha Q g'."""
        return self.grad_L + self.alpha * self.constraint_drift


def evaluate_geometry(p: ProblemDefinition, x, t, alpha: float = 0.0, rank_tol=RANK_TOL) -> GeometryEval:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = float(t)
    n, m = p.n, p.m
    gf = _grad(p, x, t)
    if m == 0:
        return GeometryEval(
            x=x, t=t, alpha=alpha, P=np.eye(n) if n <= DENSE_LIMIT else None,
            Q=np.zeros((n, 0)), J=np.zeros((0, n)), grad_f=gf, gprime=np.zeros(0),
            lam=np.zeros(0), lambda_bar=np.zeros(0), grad_L=gf.copy(), sigma_min=np.inf,
        )
    J = _jac(p, x, t)
    gram = _Gram(J, x, t, rank_tol)
    gp = _gprime(p, x, t)
    lam = -gram.solve(J @ gf)
    lam_bar = lam + alpha * gram.solve(gp)
    grad_L = gf + J.T @ lam
    Q = J.T @ gram.solve(np.eye(m)) if m > 1 else J.T / gram._scalar
    P = None
    if n <= DENSE_LIMIT:
        P = np.eye(n) - Q @ J
        P = 0.5 * (P + P.T)
    return GeometryEval(
        x=x, t=t, alpha=alpha, P=P, Q=Q, J=J, grad_f=gf, gprime=gp,
        lam=lam, lambda_bar=lam_bar, grad_L=grad_L, sigma_min=gram.sigma_min,
    )


def projected_gradient(p: ProblemDefinition, x, t) -> np.ndarray:
    """P(x,t) grad f(x,t), matrix-free."""
    gf = _grad(p, x, t)
    if p.m == 0:
        return gf
    J = _jac(p, x, t)
    return gf - J.T @ _Gram(J, x, t).solve(J @ gf)


def pode_rhs(p: ProblemDefinition, x, t, alpha: float) -> np.ndarray:
    """Right-hand side -(1/alpha) P grad f - Q g' of the inertial flow."""
    gf = _grad(p, x, t)
    if p.m == 0:
        return -gf / alpha
    J = _jac(p, x, t)
    gram = _Gram(J, x, t)
    gp = _gprime(p, x, t)
    # -(1/a)(gf - J^T G^-1 J gf) - J^T G^-1 g'  =  -(1/a) gf + J^T G^-1 (J gf / a - g')
    return -gf / alpha + J.T @ gram.solve(J @ gf / alpha - gp)


def error_field_U(p: ProblemDefinition, e, t, alpha: float, h2: MinTrajectory) -> np.ndarray:
    """U(e,t,alpha) = P grad f + alpha Q g' + alpha h2'(t) at x = e + h2(t).

    The error e = x - h2 evolves as e' = -U / alpha.
    """
    e = np.atleast_1d(np.asarray(e, dtype=float))
    x = e + h2.h(t)
    gf = _grad(p, x, t)
    hd = h2.hdot(t)
    if p.m == 0:
        return gf + alpha * hd
    J = _jac(p, x, t)
    gram = _Gram(J, x, t)
    gp = _gprime(p, x, t)
    return gf + J.T @ gram.solve(alpha * gp - J @ gf) + alpha * hd


def orthogonality_check(p: ProblemDefinition, x, t) -> float:
    """|<P grad f, Q g'>|, which vanishes identically."""
    if p.m == 0:
        return 0.0
    geo = evaluate_geometry(p, x, t)
    return abs(float(geo.grad_L @ geo.constraint_drift))


def lagrangian(p: ProblemDefinition, x, lam, t) -> float:
    val = float(p.f(x, t))
    if p.m:
        val += float(np.asarray(lam) @ np.asarray(p.g(x, t)))
    return val


def reshaped_landscape(p: ProblemDefinition, h2: MinTrajectory, t, grid, alpha: float) -> list:
    """Values of f(e + h2, t) + alpha h2'(t).e over a grid of offsets e.

    With constraints the objective is replaced by the Lagrangian evaluated at
    lambda_bar. Values are shifted so that the grid minimum is zero.
    """
    base = h2.h(t)
    hd = h2.hdot(t)
    out = []
    for e in grid:
        e_arr = np.atleast_1d(np.asarray(e, dtype=float))
        x = e_arr + base
        if p.m == 0:
            v = float(p.f(x, t))
        else:
            geo = evaluate_geometry(p, x, t, alpha)
            v = lagrangian(p, x, geo.lambda_bar, t)
        out.append((e, v + alpha * float(hd @ e_arr)))
    if out:
        lo = min(v for _, v in out)
        out = [(e, v - lo) for e, v in out]
    return out


def retract(p: ProblemDefinition, x, t, tol: float = 1e-10, max_iter: int = 10) -> np.ndarray:
    """Newton retraction x <- x - J^T (J J^T)^{-1} g(x,t) onto the feasible set."""
    x = np.array(x, dtype=float)
    if p.m == 0:
        return x
    for _ in range(max_iter + 1):
        gv = np.asarray(p.g(x, t), dtype=float).reshape(p.m)
        if not np.all(np.isfinite(gv)):
            raise EvaluationError("g", x, t)
        if np.linalg.norm(gv) <= tol:
            return x
        J = _jac(p, x, t)
        x = x - J.T @ _Gram(J, x, t).solve(gv)
    raise RetractionError(
        f"retraction did not reach |g| <= {tol:.1e} within {max_iter} iterations at t={t}"
    )


def tangent_basis(geo: GeometryEval) -> np.ndarray:
    """Orthonormal basis (n, n-m) of the tangent plane, from the projector."""
    n = geo.x.size
    m = geo.J.shape[0]
    if m == 0:
        return np.eye(n)
    P = geo.P if geo.P is not None else np.stack([geo.apply_P(c) for c in np.eye(n)], axis=1)
    w, V = np.linalg.eigh(P)
    return V[:, np.argsort(w)[m:]]


def error_field_U_batch(p: ProblemDefinition, E, t, alpha: float, h2: MinTrajectory, H=None, Hd=None) -> np.ndarray:
    """Row-wise :func:`error_field_U` for a stack of offsets E of shape (k, n).

    Uses the problem's batch evaluators when present. Rows whose Jacobian
    has lost rank come back as NaN. When the batch evaluators accept per-row
    times, t may be a (k,) array with the matching h2 values and slopes
    passed as H and Hd.
    """
    E = np.asarray(E, dtype=float).reshape(-1, p.n)
    hd = h2.hdot(t) if Hd is None else Hd
    X = E + (h2.h(t) if H is None else H)
    B = p.batch
    if B is None:
        return np.array([error_field_U(p, e, t, alpha, h2) for e in E]).reshape(E.shape)
    gf = np.asarray(B.grad_f(X, t), dtype=float).reshape(E.shape)
    if p.m == 0:
        return gf + alpha * hd
    J = np.asarray(B.jac_g(X, t), dtype=float).reshape(len(E), p.m, p.n)
    gp = np.asarray(B.gprime(X, t), dtype=float).reshape(len(E), p.m)
    G = J @ J.transpose(0, 2, 1)
    rhs = alpha * gp - np.einsum("kmn,kn->km", J, gf)
    with np.errstate(divide="ignore", invalid="ignore"):
        if p.m == 1:
            y = rhs / G[:, 0, :]
        else:
            y = np.linalg.solve(G, rhs[..., None])[..., 0]
    out = gf + np.einsum("kmn,km->kn", J, y) + alpha * hd
    return out
