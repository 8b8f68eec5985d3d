"""Projections, L1-regularised NNLS and the inner subproblems of each outer step.

The averaged-surrogate objects passed to :func:`minimize_prox` and
:func:`minimize_radius` are duck typed: they provide ``value``, ``grad`` and
``lipschitz``; quadratics of the form ``c + (a/2)||x - z||^2`` additionally
provide ``isotropic()`` returning ``(a, z)`` so the argmin reduces to a
single projection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .exceptions import ConfigurationError, DomainError, SolverError

__all__ = [
    "InnerTolerance", "FeasibleSet", "Unconstrained", "Box", "NonnegOrthant",
    "NonnegRowBall", "project", "project_ball", "project_intersection",
    "nnls_l1", "nnls_l1_objective", "minimize_prox", "minimize_radius",
    "projected_gradient", "projected_gradient_norm", "stationarity_measure",
]


@dataclass(frozen=True)
class InnerTolerance:
    grad_tol: float = 1e-8
    max_iters: int = 10_000
    dykstra_tol: float = 1e-10
    dykstra_max_iters: int = 5_000

    def __post_init__(self):
        if min(self.grad_tol, self.max_iters, self.dykstra_tol, self.dykstra_max_iters) <= 0:
            raise ConfigurationError("tolerances must be positive")


DEFAULT_TOL = InnerTolerance()


# ---------------------------------------------------------------------------
# feasible sets

class FeasibleSet:
    """Closed convex set with an exact Euclidean projection."""

    def project(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.linalg.norm(x - self.project(x)) <= tol)

    def __repr__(self):
        return f"{type(self).__name__}()"


class Unconstrained(FeasibleSet):
    def project(self, x):
        return np.array(x, dtype=float, copy=True)


class Box(FeasibleSet):
    def __init__(self, lower, upper):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if np.any(lower > upper):
            raise ConfigurationError("box requires lower <= upper")
        self.lower, self.upper = lower, upper

    def project(self, x):
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def __repr__(self):
        return f"Box({self.lower!r}, {self.upper!r})"


class NonnegOrthant(FeasibleSet):
    def project(self, x):
        return np.maximum(np.asarray(x, dtype=float), 0.0)


class NonnegRowBall(FeasibleSet):
    """Nonnegative matrices whose rows have Euclidean norm at most ``cap``.

    Clipping then radial scaling is the exact projection: the set is the
    intersection of a cone with an origin-centred ball.
    """

    def __init__(self, cap: float = 1.0):
        if cap <= 0:
            raise ConfigurationError("row-norm cap must be positive")
        self.cap = float(cap)

    def project(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        if x.ndim == 1:
            nrm = np.linalg.norm(x)
            return x * (self.cap / nrm) if nrm > self.cap else x
        nrm = np.sqrt(np.einsum("...i,...i->...", x, x))[..., None]
        return x * (self.cap / np.maximum(nrm, self.cap))

    def __repr__(self):
        return f"NonnegRowBall(cap={self.cap})"


def project(fset: FeasibleSet, x) -> np.ndarray:
    return fset.project(x)


def project_ball(x, center, radius):
    d = x - center
    nrm = np.linalg.norm(d)
    if nrm <= radius:
        return np.array(x, dtype=float, copy=True)
    return center + d * (radius / nrm)


def project_intersection(fset: FeasibleSet, center, radius, x,
                         tol: InnerTolerance = DEFAULT_TOL) -> np.ndarray:
    """Projection onto ``fset ∩ B(center, radius)`` by Dykstra's algorithm.

    ``center`` must lie in ``fset``.  The last Dykstra sweep projects onto
    ``fset``; a final radial pull towards ``center`` (a convex combination of
    two points of ``fset``) makes the ball constraint hold exactly.
    """
    x = np.asarray(x, dtype=float)
    if isinstance(fset, Unconstrained):
        return project_ball(x, center, radius)
    y = fset.project(x)
    if np.linalg.norm(y - center) <= radius:
        return y
    y = x.copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(tol.dykstra_max_iters):
        z = project_ball(y + p, center, radius)
        p = y + p - z
        y_new = fset.project(z + q)
        q = z + q - y_new
        moved = np.linalg.norm(y_new - y)
        y = y_new
        if moved <= tol.dykstra_tol:
            break
    d = np.linalg.norm(y - center)
    if d > radius:
        y = center + (y - center) * (radius / d)
    return y


# ---------------------------------------------------------------------------
# L1-regularised nonnegative least squares

def nnls_l1_objective(X, W, H, alpha) -> float:
    R = X - W @ H
    return 0.5 * float(np.vdot(R, R)) + alpha * float(np.abs(H).sum())


def nnls_l1(X, W, alpha: float = 0.0, tol: InnerTolerance = DEFAULT_TOL,
            H0: Optional[np.ndarray] = None, nonneg: bool = True) -> np.ndarray:
    """Solve ``min_H 0.5||X - W H||_F^2 + alpha ||H||_1`` (``H >= 0`` by default).

    Cyclic coordinate descent over the rows of ``H`` (all columns updated
    together) with the soft-threshold update.  Coordinates with curvature
    ``G_jj <= 1e-12`` are set to zero.

    Raises
    ------
    SolverError
        If ``tol.max_iters`` sweeps pass without the largest coordinate
        change dropping to ``tol.grad_tol``.
    """
    if alpha < 0:
        raise ConfigurationError("alpha must be nonnegative")
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    if X.ndim == 1:
        return nnls_l1(X[:, None], W, alpha, tol, None if H0 is None else
                       np.asarray(H0, float).reshape(-1, 1), nonneg)[:, 0]
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[0] != X.shape[0]:
        raise DomainError(f"W has {W.shape[0]} rows, X has {X.shape[0]}")
    r = W.shape[1]
    G = W.T @ W
    B = W.T @ X
    H = np.zeros((r, X.shape[1])) if H0 is None else np.array(H0, dtype=float)
    if nonneg:
        np.maximum(H, 0.0, out=H)
    diag = np.diag(G).copy()
    dead = diag <= 1e-12
    H[dead] = 0.0
    live = [j for j in range(r) if not dead[j]]
    if X.shape[1] == 0 or not live:
        return H
    change = math.inf
    for sweep in range(tol.max_iters):
        change = 0.0
        for j in live:
            old = H[j]
            z = B[j] - G[j] @ H + diag[j] * old
            if nonneg:
                new = np.maximum(z - alpha, 0.0)
            else:
                new = np.sign(z) * np.maximum(np.abs(z) - alpha, 0.0)
            new /= diag[j]
            c = np.abs(new - old).max()
            H[j] = new
            if c > change:
                change = c
        if change <= tol.grad_tol:
            return H
    raise SolverError(f"nnls_l1 did not converge in {tol.max_iters} sweeps",
                      residual=change, iterations=tol.max_iters)


# ---------------------------------------------------------------------------
# generic accelerated projected gradient

def projected_gradient(fun: Callable, grad: Callable, proj: Callable, x0, lip: float,
                       tol: float = 1e-8, max_iters: int = 10_000):
    """Accelerated projected gradient with function-value restart.

    Returns ``(x, f(x), residual)`` where ``residual`` is the gradient-mapping
    norm ``lip * ||y - proj(y - grad(y)/lip)||`` at the last extrapolated
    point.  The iterates never increase ``fun``.
    """
    x = np.array(x0, dtype=float)
    fx = fun(x)
    y = x.copy()
    t = 1.0
    res = math.inf
    restarted = False
    for _ in range(max_iters):
        x_new = proj(y - grad(y) / lip)
        d = x_new - y
        res = lip * math.sqrt(float(np.vdot(d, d)))
        f_new = fun(x_new)
        if f_new > fx + 1e-15 * (1 + abs(fx)):
            if restarted:
                # plain step from x already fails to decrease: stationary to rounding
                return x, fx, res
            y, t, restarted = x.copy(), 1.0, True
            continue
        restarted = False
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, fx, t = x_new, f_new, t_new
        if res <= tol:
            return x, fx, res
    raise SolverError("projected gradient did not converge", residual=res,
                      iterations=max_iters)


def _check_feasible(fset, prev):
    if not fset.contains(prev, 1e-9):
        raise DomainError("previous iterate is not feasible")


def minimize_prox(avg, fset: FeasibleSet, prev, rho: float,
                  tol: InnerTolerance = DEFAULT_TOL) -> np.ndarray:
    """``argmin_{x in fset} avg(x) + (rho/2)||x - prev||^2``.

    Isotropic quadratics (prox-linear aggregates) use the closed form
    ``proj((rho*prev + a*z) / (a + rho))``; everything else runs accelerated
    projected gradient started at ``prev`` with step ``1/(lip + rho)``.
    """
    if rho < 0:
        raise ConfigurationError("rho must be nonnegative")
    prev = np.asarray(prev, dtype=float)
    _check_feasible(fset, prev)
    iso = getattr(avg, "isotropic", None)
    if iso is not None:
        curv, center = iso()
        if curv + rho <= 0:
            raise SolverError("no minimiser: zero curvature and rho = 0")
        return fset.project((rho * prev + curv * center) / (curv + rho))

    def fun(x):
        d = x - prev
        return avg.value(x) + 0.5 * rho * float(np.vdot(d, d))

    def grad(x):
        return avg.grad(x) + rho * (x - prev)

    lip = avg.lipschitz() + rho
    if lip <= 0:
        return prev.copy()
    x, fx, _ = projected_gradient(fun, grad, fset.project, prev, lip,
                                  tol.grad_tol, tol.max_iters)
    return x if fx <= fun(prev) else prev.copy()


def minimize_radius(avg, fset: FeasibleSet, prev, radius: float,
                    tol: InnerTolerance = DEFAULT_TOL) -> np.ndarray:
    """``argmin avg(x)`` over ``fset ∩ B(prev, radius)``.

    Radii below ``1e-12`` return ``prev``.  The returned point lies in the
    ball exactly and in ``fset`` up to rounding.
    """
    prev = np.asarray(prev, dtype=float)
    _check_feasible(fset, prev)
    if radius < 1e-12:
        return prev.copy()
    proj = lambda z: project_intersection(fset, prev, radius, z, tol)  # noqa: E731
    iso = getattr(avg, "isotropic", None)
    if iso is not None:
        curv, center = iso()
        if curv > 0:
            return proj(center)
    lip = avg.lipschitz()
    if lip <= 0:
        lip = 1.0
    x, fx, _ = projected_gradient(avg.value, avg.grad, proj, prev, lip,
                                  tol.grad_tol, tol.max_iters)
    return x if fx <= avg.value(prev) else prev.copy()


# ---------------------------------------------------------------------------
# stationarity

def projected_gradient_norm(gradient, fset: FeasibleSet, theta) -> float:
    """``||theta - proj(theta - gradient)||``."""
    theta = np.asarray(theta, dtype=float)
    return float(np.linalg.norm(theta - fset.project(theta - np.asarray(gradient))))


def _box_linear_cap(c, lo, hi) -> float:
    """``max <c, d>`` over ``lo <= d <= hi``, ``||d|| <= 1`` (``lo <= 0 <= hi``)."""
    def d_of(lam):
        return np.clip(c / lam, lo, hi)

    with np.errstate(invalid="ignore"):
        d0 = np.where(c > 0, hi, np.where(c < 0, lo, 0.0))
    if np.all(np.isfinite(d0)) and np.linalg.norm(d0) <= 1.0:
        return float(np.dot(c, d0))
    lam_hi = float(np.linalg.norm(c))  # ||c/lam_hi|| = 1 so clipped norm <= 1
    lam_lo = lam_hi
    while np.linalg.norm(d_of(lam_lo)) <= 1.0:
        lam_lo *= 0.5
        if lam_lo < 1e-300:
            return float(np.dot(c, d_of(lam_hi)))
    while lam_hi - lam_lo > 1e-10 * lam_hi:
        mid = 0.5 * (lam_lo + lam_hi)
        if np.linalg.norm(d_of(mid)) > 1.0:
            lam_lo = mid
        else:
            lam_hi = mid
    return float(np.dot(c, d_of(lam_hi)))


def stationarity_measure(gradient, fset: FeasibleSet, theta,
                         tol: InnerTolerance = DEFAULT_TOL, ascent_iters: int = 500) -> float:
    """``sup <-grad f(theta), x - theta>`` over ``x in fset``, ``||x - theta|| <= 1``.

    ``gradient`` is either the gradient at ``theta`` or a callable returning
    it.  Exact for unconstrained, box and orthant sets; for
    :class:`NonnegRowBall` the best value of projected gradient ascent is
    returned, which is a lower bound.
    """
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(gradient(theta) if callable(gradient) else gradient, dtype=float)
    if g.shape != theta.shape:
        raise DomainError("gradient and theta shapes differ")
    if not fset.contains(theta, 1e-9):
        raise DomainError("theta is not feasible")
    c = -g.ravel()
    if isinstance(fset, Unconstrained):
        return float(np.linalg.norm(c))
    if isinstance(fset, Box):
        lo = np.broadcast_to(fset.lower, theta.shape).ravel() - theta.ravel()
        hi = np.broadcast_to(fset.upper, theta.shape).ravel() - theta.ravel()
        return max(_box_linear_cap(c, np.minimum(lo, 0), np.maximum(hi, 0)), 0.0)
    if isinstance(fset, NonnegOrthant):
        lo = -theta.ravel()
        hi = np.full_like(lo, np.inf)
        return max(_box_linear_cap(c, np.minimum(lo, 0), hi), 0.0)
    cnorm = float(np.linalg.norm(c))
    if cnorm == 0.0:
        return 0.0
    cmat = c.reshape(theta.shape)
    step = 1.0 / cnorm
    x = theta.copy()
    best = 0.0
    for _ in range(ascent_iters):
        x_new = project_intersection(fset, theta, 1.0, x + step * cmat, tol)
        best = max(best, float(np.vdot(cmat, x_new - theta)))
        if np.linalg.norm(x_new - x) <= 1e-12:
            break
        x = x_new
    return best
