"""Finite-sum objectives: distributed NMF, regularised logistic regression, quadratics.

Every problem exposes the same small interface used by the solver:
``n_components``, ``weights``, ``feasible_set``, ``lower_bound``,
``initial_point(seed)``, ``surrogate(v, theta)``, ``value(theta)``,
``gradient(theta)``, ``component_value(v, theta)`` and ``reset()``.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from .exceptions import ConfigurationError, DomainError
from .inner_solvers import (DEFAULT_TOL, FeasibleSet, InnerTolerance, NonnegRowBall,
                            Unconstrained, minimize_prox, minimize_radius, nnls_l1,
                            nnls_l1_objective)
from .surrogate import (ProxLinearSurrogate, VariationalNmfSurrogate,
                        build_variational_nmf)

__all__ = [
    "Problem", "QuadProblem", "LogRegProblem", "NmfProblem",
    "nmf_component_surrogate", "nmf_dictionary_update", "logreg_value_grad",
    "shard_by_label", "regularizer", "regularizer_grad", "synthetic_quadratic",
    "synthetic_nmf", "synthetic_classification", "desk_logreg", "dense_logreg",
]


class Problem:
    feasible_set: FeasibleSet = Unconstrained()
    lower_bound: float = 0.0
    weights: np.ndarray

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def pi_min(self) -> float:
        return float(np.min(self.weights))

    def reset(self) -> None:
        """Drop any warm-start caches so runs are reproducible."""

    def initial_point(self, seed: int = 0) -> np.ndarray:
        raise NotImplementedError

    def surrogate(self, v: int, theta):
        raise NotImplementedError

    def component_value(self, v: int, theta) -> float:
        raise NotImplementedError

    def value(self, theta) -> float:
        return float(sum(w * self.component_value(v, theta) for v, w in enumerate(self.weights)))

    def gradient(self, theta) -> np.ndarray:
        raise NotImplementedError

    def smoothness(self) -> float:
        """A smoothness constant used for ``rho = L * t_target`` presets."""
        raise NotImplementedError


def _uniform(n):
    return np.full(n, 1.0 / n)


# ---------------------------------------------------------------------------
# quadratics

class QuadProblem(Problem):
    """``f^v(x) = 0.5 * sum_i a_vi (x_i - c_vi)^2``.

    ``curvatures`` may be one scalar per component or a full ``(V, p)`` array.
    Surrogates are prox-linear with ``L_v = surrogate_scale * max_i a_vi``;
    ``surrogate_scale = 1`` with scalar curvatures makes them exact.
    """

    def __init__(self, centers, curvatures=None, weights=None, surrogate_scale: float = 1.0,
                 feasible_set: Optional[FeasibleSet] = None, theta0=None):
        self.centers = np.asarray(centers, dtype=float)
        if self.centers.ndim != 2:
            raise ConfigurationError("centers must be a (V, p) array")
        V, p = self.centers.shape
        if curvatures is None:
            curvatures = np.ones(V)
        curv = np.asarray(curvatures, dtype=float)
        if curv.ndim == 1:
            curv = np.repeat(curv[:, None], p, axis=1)
        if curv.shape != (V, p) or np.any(curv <= 0):
            raise ConfigurationError("curvatures must be positive, one per component")
        if surrogate_scale < 1.0:
            raise ConfigurationError("surrogate_scale below 1 does not majorise")
        self.curv = curv
        self.weights = _uniform(V) if weights is None else np.asarray(weights, dtype=float)
        self.surrogate_scale = float(surrogate_scale)
        self.feasible_set = feasible_set or Unconstrained()
        self._theta0 = None if theta0 is None else np.asarray(theta0, dtype=float)
        wc = self.weights[:, None] * self.curv
        self.optimum = (wc * self.centers).sum(axis=0) / wc.sum(axis=0)
        self.lower_bound = self.value(self.optimum)

    def initial_point(self, seed=0):
        if self._theta0 is not None:
            return self._theta0.copy()
        rng = np.random.default_rng(seed)
        return self.feasible_set.project(rng.standard_normal(self.centers.shape[1]))

    def component_value(self, v, theta):
        d = np.asarray(theta, dtype=float) - self.centers[v]
        return 0.5 * float(np.dot(self.curv[v] * d, d))

    def component_grad(self, v, theta):
        return self.curv[v] * (np.asarray(theta, dtype=float) - self.centers[v])

    def gradient(self, theta):
        theta = np.asarray(theta, dtype=float)
        return (self.weights[:, None] * self.curv * (theta[None, :] - self.centers)).sum(axis=0)

    def smoothness(self):
        return float(self.curv.max())

    def surrogate(self, v, theta):
        theta = np.asarray(theta, dtype=float)
        L = self.surrogate_scale * float(self.curv[v].max())
        return ProxLinearSurrogate(theta, self.component_value(v, theta),
                                   self.component_grad(v, theta), L)


def synthetic_quadratic(n_components=10, dim=5, seed=0, surrogate_scale=2.0,
                        feasible_set=None, curvature_range=(0.5, 2.0)) -> QuadProblem:
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_components, dim)) * 2.0
    curv = rng.uniform(*curvature_range, size=(n_components, dim))
    return QuadProblem(centers, curv, surrogate_scale=surrogate_scale,
                       feasible_set=feasible_set)


# ---------------------------------------------------------------------------
# logistic regression with the nonconvex penalty

REG_COEFF = 0.01


def regularizer(theta, coeff: float = REG_COEFF) -> float:
    """``coeff * sum_i theta_i^2 / (1 + theta_i^2)``."""
    t2 = np.square(np.asarray(theta, dtype=float))
    return coeff * float(np.sum(t2 / (1.0 + t2)))


def regularizer_grad(theta, coeff: float = REG_COEFF) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return 2.0 * coeff * theta / np.square(1.0 + theta * theta)


class LogRegProblem(Problem):
    """Logistic loss averaged within each shard plus the nonconvex penalty.

    Parameters
    ----------
    X : array or sparse matrix, shape (n_rows, p)
    y : array of +-1 labels
    shards : list of row-index arrays, one per component
    L : optional global smoothness used for every prox-linear surrogate;
        by default each shard uses ``max ||x||^2 / 4 + 2 * reg_coeff``.
    """

    def __init__(self, X, y, shards: Sequence, reg_coeff: float = REG_COEFF,
                 L: Optional[float] = None, weights=None, heterogeneous: bool = False):
        self.X = sparse.csr_matrix(X) if sparse.issparse(X) else np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        if set(np.unique(self.y)) - {-1.0, 1.0}:
            raise ConfigurationError("labels must be -1 or +1")
        self.shards = [np.asarray(s, dtype=np.int64) for s in shards]
        if any(len(s) == 0 for s in self.shards):
            raise ConfigurationError("every shard must be nonempty")
        if heterogeneous and any(len(np.unique(self.y[s])) != 1 for s in self.shards):
            raise ConfigurationError("heterogeneous preset requires label-pure shards")
        self.reg_coeff = float(reg_coeff)
        self.weights = _uniform(len(self.shards)) if weights is None else np.asarray(weights, float)
        self.dim = self.X.shape[1]
        self._Xs = [self.X[s] for s in self.shards]
        self._ys = [self.y[s] for s in self.shards]
        sq = (self.X.multiply(self.X).sum(axis=1).A1 if sparse.issparse(self.X)
              else np.einsum("ij,ij->i", self.X, self.X))
        self.row_smoothness = np.array([sq[s].max() / 4.0 + 2.0 * self.reg_coeff for s in self.shards])
        self.L = None if L is None else float(L)
        self.lower_bound = 0.0

    def initial_point(self, seed=0):
        return np.zeros(self.dim)

    def component_value_grad(self, v, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DomainError(f"theta must have shape ({self.dim},)")
        Xv, yv = self._Xs[v], self._ys[v]
        margin = yv * (Xv @ theta)
        loss = float(np.mean(np.logaddexp(0.0, -margin)))
        coef = -yv * expit(-margin) / len(yv)
        grad = np.asarray(Xv.T @ coef).ravel()
        return (loss + regularizer(theta, self.reg_coeff),
                grad + regularizer_grad(theta, self.reg_coeff))

    def component_value(self, v, theta):
        return self.component_value_grad(v, theta)[0]

    def value(self, theta):
        return float(sum(w * self.component_value_grad(v, theta)[0]
                         for v, w in enumerate(self.weights)))

    def gradient(self, theta):
        return sum(w * self.component_value_grad(v, theta)[1] for v, w in enumerate(self.weights))

    def smoothness(self):
        return self.L if self.L is not None else float(self.row_smoothness.max())

    def surrogate(self, v, theta):
        theta = np.asarray(theta, dtype=float)
        val, grad = self.component_value_grad(v, theta)
        L = self.L if self.L is not None else float(self.row_smoothness[v])
        return ProxLinearSurrogate(theta, val, grad, L)


def logreg_value_grad(problem: LogRegProblem, v: int, theta):
    """Component value and gradient of the regularised logistic loss."""
    return problem.component_value_grad(v, theta)


def shard_by_label(labels, batch: int, num_vertices: Optional[int] = None, key=None):
    """Split rows into label-pure shards of ``batch`` rows.

    Labels are processed in sorted order; within a label rows are ordered by
    ``key`` (default: row position) and cut into full batches, the remainder
    forming one final shard for that label.  Returns a list of row-index
    arrays.  ``num_vertices``, when given, must be at least the number of
    labels and at least the number of shards produced.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DomainError("no rows to shard")
    if batch < 1:
        raise ConfigurationError("batch must be >= 1")
    classes = np.unique(labels)
    if num_vertices is not None and num_vertices < len(classes):
        raise ConfigurationError("need at least one vertex per label")
    order_key = np.arange(labels.size) if key is None else np.asarray(key)
    shards = []
    for c in classes:
        rows = np.flatnonzero(labels == c)
        rows = rows[np.argsort(order_key[rows], kind="stable")]
        for lo in range(0, len(rows), batch):
            shards.append(rows[lo:lo + batch])
    if num_vertices is not None and len(shards) > num_vertices:
        raise ConfigurationError(f"{len(shards)} shards exceed {num_vertices} vertices")
    return shards


def synthetic_classification(n_rows=2000, n_features=60, active=12, seed=0):
    """Binary sparse rows in the spirit of a9a: ``active`` ones per row, labels +-1."""
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(n_features)
    rows, cols = [], []
    for i in range(n_rows):
        idx = np.sort(rng.choice(n_features, size=active, replace=False))
        rows.extend([i] * active)
        cols.extend(idx.tolist())
    X = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_rows, n_features))
    score = X @ w_true / math.sqrt(active)
    y = np.where(rng.random(n_rows) < expit(2.0 * score), 1.0, -1.0)
    return X, y


def desk_logreg(n_rows=2000, n_features=60, batch=100, seed=0, L=None, scale=None):
    """Desk-scale logistic problem with label-pure shards of ``batch`` rows.

    ``scale`` rescales the features (the default keeps ``||x||^2 = 1``).
    """
    X, y = synthetic_classification(n_rows, n_features, seed=seed)
    active = X[0].nnz
    X = X * ((1.0 / math.sqrt(active)) if scale is None else scale)
    shards = shard_by_label(y, batch)
    return LogRegProblem(X, y, shards, L=L, heterogeneous=True)


def dense_logreg(n_components=20, dim=10, rows_per=50, seed=0, signal=3.0):
    """Smooth unconstrained logistic finite sum with Gaussian features.

    Rows have expected squared norm one; labels follow a planted logistic
    model with weight scale ``signal``.  Shards are contiguous row blocks.
    """
    rng = np.random.default_rng(seed)
    n = n_components * rows_per
    X = rng.standard_normal((n, dim)) / math.sqrt(dim)
    w = rng.standard_normal(dim) * signal
    y = np.where(rng.random(n) < expit(X @ w), 1.0, -1.0)
    return LogRegProblem(X, y, np.array_split(np.arange(n), n_components))


# ---------------------------------------------------------------------------
# distributed NMF

class NmfProblem(Problem):
    """``f(W) = sum_v pi(v) min_{H >= 0} 0.5||X_v - W H||_F^2 + alpha||H||_1``.

    The dictionary ``W`` is ``p x r``, nonnegative with rows of norm at most
    one.  ``codes`` caches the last code computed for each shard (warm
    starts); it is owned by the solver loop and cleared by :meth:`reset`.
    """

    def __init__(self, shards: Sequence, rank: int, alpha: float = 1.0 / 28, weights=None,
                 tol: InnerTolerance = DEFAULT_TOL, surrogate_smoothness=None,
                 nonneg_codes: bool = True):
        self.shards = [np.asarray(X, dtype=float) for X in shards]
        if not self.shards:
            raise ConfigurationError("need at least one shard")
        p = self.shards[0].shape[0]
        if any(X.ndim != 2 or X.shape[0] != p for X in self.shards):
            raise ConfigurationError("all shards must be p x d_v matrices with the same p")
        if any(np.any(X < 0) for X in self.shards):
            raise ConfigurationError("NMF data must be nonnegative")
        if rank < 1 or alpha < 0:
            raise ConfigurationError("rank >= 1 and alpha >= 0 required")
        self.p, self.rank, self.alpha = p, int(rank), float(alpha)
        self.weights = _uniform(len(self.shards)) if weights is None else np.asarray(weights, float)
        self.tol = tol
        self.surrogate_smoothness = surrogate_smoothness
        self.nonneg_codes = nonneg_codes
        self.feasible_set = NonnegRowBall(1.0)
        self.lower_bound = 0.0
        self.reset()

    def reset(self):
        self.codes = [None] * len(self.shards)
        self._eval_codes = [None] * len(self.shards)

    def initial_point(self, seed=0):
        rng = np.random.default_rng(seed)
        return self.feasible_set.project(rng.random((self.p, self.rank)))

    def _eval_code(self, v, W):
        # warm start from the solver-owned code so values depend only on solver state
        W = np.asarray(W, dtype=float)
        hit = self._eval_codes[v]
        if hit is not None and np.array_equal(hit[0], W):
            return hit[1]
        H = nnls_l1(self.shards[v], W, self.alpha, self.tol, H0=self.codes[v],
                    nonneg=self.nonneg_codes)
        self._eval_codes[v] = (W.copy(), H)
        return H

    def component_value(self, v, W):
        H = self._eval_code(v, W)
        return nnls_l1_objective(self.shards[v], W, H, self.alpha)

    def component_grad(self, v, W):
        H = self._eval_code(v, W)
        return (W @ H - self.shards[v]) @ H.T

    def gradient(self, W):
        W = np.asarray(W, dtype=float)
        return sum(w * self.component_grad(v, W) for v, w in enumerate(self.weights))

    def smoothness(self):
        return float(max(np.linalg.norm(X, 2) ** 2 for X in self.shards))

    def surrogate(self, v, W):
        return nmf_component_surrogate(self, v, W)


def nmf_component_surrogate(problem: NmfProblem, v: int, W_prev) -> VariationalNmfSurrogate:
    """Code update for shard ``v`` at ``W_prev``; caches the code and returns the surrogate."""
    W_prev = np.asarray(W_prev, dtype=float)
    rec = build_variational_nmf(problem.shards[v], W_prev, problem.alpha, problem.tol,
                                H0=problem.codes[v], smoothness=problem.surrogate_smoothness,
                                nonneg=problem.nonneg_codes)
    problem.codes[v] = rec.H
    return rec


def nmf_dictionary_update(aggregate, W_prev, rho: Optional[float] = None,
                          radius: Optional[float] = None, cap: float = 1.0,
                          tol: InnerTolerance = DEFAULT_TOL):
    """Dictionary step: proximal (``rho``) or trust-region (``radius``) over the row-ball set."""
    fset = NonnegRowBall(cap)
    if (rho is None) == (radius is None):
        raise ConfigurationError("give exactly one of rho or radius")
    if radius is not None:
        return minimize_radius(aggregate, fset, W_prev, radius, tol)
    return minimize_prox(aggregate, fset, W_prev, rho, tol)


def synthetic_nmf(n_shards=12, p=12, d=20, rank=3, n_classes=4, noise=0.05, seed=0):
    """Label-ordered nonnegative shards: each class has its own planted dictionary.

    Shards of one class are contiguous, so on a cycle graph neighbouring
    vertices hold similar data.
    """
    rng = np.random.default_rng(seed)
    protos = [rng.random((p, rank)) ** 2 for _ in range(n_classes)]
    labels = np.repeat(np.arange(n_classes), -(-n_shards // n_classes))[:n_shards]
    shards = []
    for c in labels:
        H = rng.exponential(1.0, size=(rank, d)) * (rng.random((rank, d)) < 0.7)
        X = protos[c] @ H + noise * rng.random((p, d))
        shards.append(np.maximum(X, 0.0))
    return shards, labels
