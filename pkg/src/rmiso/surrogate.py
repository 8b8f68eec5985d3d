"""First-order surrogates and their weighted average.

A surrogate ``g`` of a component ``f`` at an anchor majorises ``f`` on the
feasible set, is tight at the anchor (value and gradient) and has an
approximation error ``h = g - f`` with Lipschitz gradient.  Each record
reports ``smoothness`` (Lipschitz constant of ``grad h``) and ``convexity``
(strong convexity modulus of ``g``).

The averaged surrogate keeps kind-specific sufficient statistics so that
replacing one component costs time independent of the number of components.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError, DomainError
from .inner_solvers import DEFAULT_TOL, InnerTolerance, nnls_l1

__all__ = [
    "Component", "SurrogateRecord", "ProxLinearSurrogate", "ProximalSurrogate",
    "DCSurrogate", "VariationalNmfSurrogate", "build_prox_linear",
    "build_proximal", "build_dc", "build_variational_nmf", "AveragedSurrogate",
    "ProxLinearAverage", "NmfAverage", "GenericAverage", "make_average",
    "replace", "eval_averaged", "grad_averaged", "error_gradient_norm",
    "save_snapshot", "load_snapshot", "dumps_snapshot", "loads_snapshot",
]


@dataclass
class Component:
    """Value/gradient oracle for one component ``f^v``."""

    value: Callable
    grad: Callable
    smoothness: Optional[float] = None


class SurrogateRecord:
    kind = "abstract"
    anchor: np.ndarray
    smoothness: float
    convexity: float
    gradient_lipschitz: float

    def value(self, theta) -> float:
        raise NotImplementedError

    def grad(self, theta) -> np.ndarray:
        raise NotImplementedError


class ProxLinearSurrogate(SurrogateRecord):
    """``f(a) + <grad f(a), x - a> + (L/2)||x - a||^2``."""

    kind = "prox_linear"

    def __init__(self, anchor, fval, gradient, L):
        self.anchor = np.array(anchor, dtype=float)
        self.fval = float(fval)
        self.gradient = np.array(gradient, dtype=float).reshape(self.anchor.shape)
        self.L = float(L)
        self.smoothness = 2.0 * self.L
        self.convexity = self.L
        self.gradient_lipschitz = self.L

    def value(self, theta):
        d = np.asarray(theta, dtype=float) - self.anchor
        return self.fval + float(np.vdot(self.gradient, d)) + 0.5 * self.L * float(np.vdot(d, d))

    def grad(self, theta):
        return self.gradient + self.L * (np.asarray(theta, dtype=float) - self.anchor)


class ProximalSurrogate(SurrogateRecord):
    """``f(x) + (gamma/2)||x - a||^2`` for an ``L_f``-smooth ``f`` and ``gamma >= L_f``."""

    kind = "proximal"

    def __init__(self, component: Component, anchor, gamma, L_f):
        self.component = component
        self.anchor = np.array(anchor, dtype=float)
        self.gamma = float(gamma)
        self.smoothness = float(L_f) + self.gamma
        self.convexity = max(self.gamma - float(L_f), 0.0)
        self.gradient_lipschitz = float(L_f) + self.gamma

    def value(self, theta):
        d = np.asarray(theta, dtype=float) - self.anchor
        return float(self.component.value(theta)) + 0.5 * self.gamma * float(np.vdot(d, d))

    def grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.asarray(self.component.grad(theta)) + self.gamma * (theta - self.anchor)


class DCSurrogate(SurrogateRecord):
    """``f1(x) + f2(a) + <grad f2(a), x - a>`` for convex ``f1`` and concave smooth ``f2``."""

    kind = "dc"

    def __init__(self, convex: Component, concave: Component, anchor, L_concave):
        self.convex = convex
        self.anchor = np.array(anchor, dtype=float)
        self.concave_value = float(concave.value(self.anchor))
        self.concave_grad = np.asarray(concave.grad(self.anchor), dtype=float)
        self.smoothness = 2.0 * float(L_concave)
        self.convexity = 0.0
        self.gradient_lipschitz = float(convex.smoothness or 0.0)

    def value(self, theta):
        d = np.asarray(theta, dtype=float) - self.anchor
        return float(self.convex.value(theta)) + self.concave_value + float(np.vdot(self.concave_grad, d))

    def grad(self, theta):
        return np.asarray(self.convex.grad(theta)) + self.concave_grad


class VariationalNmfSurrogate(SurrogateRecord):
    """``0.5||X - W H||_F^2 + alpha||H||_1`` with the code ``H`` frozen at the anchor."""

    kind = "variational"

    def __init__(self, X, H, alpha, anchor, smoothness=None):
        self.X = np.asarray(X, dtype=float)
        self.H = np.asarray(H, dtype=float)
        self.alpha = float(alpha)
        self.anchor = np.array(anchor, dtype=float)
        self.HHt = self.H @ self.H.T
        self.HXt = self.H @ self.X.T
        self.l1 = float(np.abs(self.H).sum())
        self.xnorm2 = float(np.vdot(self.X, self.X))
        eig = np.linalg.eigvalsh(self.HHt) if self.H.size else np.zeros(1)
        self.convexity = max(float(eig[0]), 0.0)
        self.gradient_lipschitz = float(eig[-1])
        if smoothness is None:
            smoothness = default_nmf_smoothness(self.X, self.H)
        self.smoothness = float(smoothness)

    def value(self, W):
        R = self.X - np.asarray(W, dtype=float) @ self.H
        return 0.5 * float(np.vdot(R, R)) + self.alpha * self.l1

    def grad(self, W):
        return np.asarray(W, dtype=float) @ self.HHt - self.HXt.T


def default_nmf_smoothness(X, H) -> float:
    """Working value for the error-gradient Lipschitz constant of an NMF surrogate.

    No closed form is available; this is ``2 * (lambda_max(H H^T) + ||X||_2^2)``
    and is checked empirically by the test-suite.
    """
    s_h = float(np.linalg.norm(H, 2)) ** 2 if H.size else 0.0
    s_x = float(np.linalg.norm(X, 2)) ** 2 if X.size else 0.0
    return 2.0 * (s_h + s_x)


def build_prox_linear(f_v, anchor, L: float) -> ProxLinearSurrogate:
    """Prox-linear surrogate of ``f_v`` (a :class:`Component` or ``(value, grad)`` pair)."""
    if not L > 0:
        raise ConfigurationError("prox-linear surrogate needs L > 0")
    value, grad = _oracle(f_v)
    anchor = np.asarray(anchor, dtype=float)
    return ProxLinearSurrogate(anchor, value(anchor), grad(anchor), L)


def build_proximal(f_v, anchor, gamma: float, L_f: float) -> ProximalSurrogate:
    if gamma < L_f or L_f < 0:
        raise ConfigurationError("proximal surrogate needs gamma >= L_f >= 0")
    value, grad = _oracle(f_v)
    return ProximalSurrogate(Component(value, grad, L_f), anchor, gamma, L_f)


def build_dc(convex, concave, anchor, L_concave: float) -> DCSurrogate:
    if L_concave <= 0:
        raise ConfigurationError("L_concave must be positive")
    cv, cg = _oracle(convex)
    smooth = getattr(convex, "smoothness", None)
    return DCSurrogate(Component(cv, cg, smooth), Component(*_oracle(concave)), anchor, L_concave)


def build_variational_nmf(X_v, W_anchor, alpha: float, tol: InnerTolerance = DEFAULT_TOL,
                          H0=None, smoothness=None, nonneg: bool = True) -> VariationalNmfSurrogate:
    """Solve the code subproblem at ``W_anchor`` and freeze the code."""
    if alpha < 0:
        raise ConfigurationError("alpha must be nonnegative")
    H = nnls_l1(X_v, W_anchor, alpha, tol, H0=H0, nonneg=nonneg)
    return VariationalNmfSurrogate(X_v, H, alpha, W_anchor, smoothness)


def _oracle(f):
    if isinstance(f, Component) or (hasattr(f, "value") and hasattr(f, "grad")):
        return f.value, f.grad
    value, grad = f
    return value, grad


# ---------------------------------------------------------------------------
# averaged surrogate

class AveragedSurrogate:
    """``sum_v pi(v) g^v`` over one record per index."""

    kind = "abstract"

    def __init__(self, records: Sequence[SurrogateRecord], weights=None):
        records = list(records)
        if not records:
            raise ConfigurationError("need at least one record")
        if weights is None:
            weights = np.full(len(records), 1.0 / len(records))
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(records),):
            raise ConfigurationError("one weight per record required")
        for rec in records:
            self._check_kind(rec)
        self.records = records
        self.weights = weights
        self.shape = records[0].anchor.shape
        self._rebuild()

    def __len__(self):
        return len(self.records)

    def _check_kind(self, rec):
        if rec.kind != self.kind:
            raise ConfigurationError(f"record kind {rec.kind!r} does not match {self.kind!r}")

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.shape:
            raise DomainError(f"theta has shape {theta.shape}, expected {self.shape}")
        return theta

    def replace(self, v: int, fresh: SurrogateRecord) -> "AveragedSurrogate":
        if not 0 <= v < len(self.records):
            raise DomainError(f"index {v} out of range")
        self._check_kind(fresh)
        old = self.records[v]
        self._update(self.weights[v], old, fresh)
        self.records[v] = fresh
        return self

    def recomputed(self) -> "AveragedSurrogate":
        """Fresh aggregate built from scratch over the current records."""
        return type(self)(list(self.records), self.weights)

    def value(self, theta) -> float:
        theta = self._check_theta(theta)
        return float(sum(w * r.value(theta) for w, r in zip(self.weights, self.records)))

    def grad(self, theta) -> np.ndarray:
        theta = self._check_theta(theta)
        return sum(w * r.grad(theta) for w, r in zip(self.weights, self.records))

    def convexity(self) -> float:
        return float(np.dot(self.weights, [r.convexity for r in self.records]))

    def lipschitz(self) -> float:
        return float(np.dot(self.weights, [r.gradient_lipschitz for r in self.records]))

    def statistics(self) -> dict:
        return {}

    def _rebuild(self):
        pass

    def _update(self, w, old, new):
        pass


class GenericAverage(AveragedSurrogate):
    """Average of records without a compact sufficient statistic (proximal, dc)."""

    kind = "generic"

    def _check_kind(self, rec):
        if getattr(self, "_kind", None) is None:
            self._kind = rec.kind
        if rec.kind != self._kind:
            raise ConfigurationError("records must share one kind")


class ProxLinearAverage(AveragedSurrogate):
    """Average of prox-linear surrogates.

    Tracks ``L_bar = sum pi L_v``, ``La = sum pi L_v a_v``, the mean gradient
    and three scalars so that ``value`` is exact and ``O(p)``.  With a shared
    ``L`` the mean anchor is ``La / L``.
    """

    kind = "prox_linear"

    def _rebuild(self):
        w = self.weights
        self.Lbar = float(sum(wi * r.L for wi, r in zip(w, self.records)))
        self.La = sum(wi * r.L * r.anchor for wi, r in zip(w, self.records))
        self.gbar = sum(wi * r.gradient for wi, r in zip(w, self.records))
        self.F = float(sum(wi * r.fval for wi, r in zip(w, self.records)))
        self.D = float(sum(wi * float(np.vdot(r.gradient, r.anchor)) for wi, r in zip(w, self.records)))
        self.LQ = float(sum(wi * r.L * float(np.vdot(r.anchor, r.anchor)) for wi, r in zip(w, self.records)))

    def _update(self, w, old, new):
        self.Lbar += w * (new.L - old.L)
        self.La = self.La + w * (new.L * new.anchor - old.L * old.anchor)
        self.gbar = self.gbar + w * (new.gradient - old.gradient)
        self.F += w * (new.fval - old.fval)
        self.D += w * (float(np.vdot(new.gradient, new.anchor)) - float(np.vdot(old.gradient, old.anchor)))
        self.LQ += w * (new.L * float(np.vdot(new.anchor, new.anchor))
                        - old.L * float(np.vdot(old.anchor, old.anchor)))

    @property
    def mean_anchor(self) -> np.ndarray:
        return self.La / self.Lbar

    @property
    def mean_gradient(self) -> np.ndarray:
        return self.gbar

    def value(self, theta):
        theta = self._check_theta(theta)
        quad = 0.5 * (self.Lbar * float(np.vdot(theta, theta)) - 2.0 * float(np.vdot(theta, self.La)) + self.LQ)
        return self.F - self.D + float(np.vdot(self.gbar, theta)) + quad

    def grad(self, theta):
        theta = self._check_theta(theta)
        return self.gbar + self.Lbar * theta - self.La

    def isotropic(self):
        """``(a, z)`` with ``value(x) = const + (a/2)||x - z||^2``."""
        return self.Lbar, (self.La - self.gbar) / self.Lbar

    def lipschitz(self):
        return self.Lbar

    def convexity(self):
        return self.Lbar

    def statistics(self):
        return {"Lbar": self.Lbar, "La": self.La, "gbar": self.gbar,
                "F": self.F, "D": self.D, "LQ": self.LQ}


class NmfAverage(AveragedSurrogate):
    """Average of NMF surrogates: ``C + 0.5 tr(W A W^T) - tr(W B)``.

    ``A = sum pi H_v H_v^T`` (r x r), ``B = sum pi H_v X_v^T`` (r x p) and
    ``C = sum pi (0.5||X_v||^2 + alpha||H_v||_1)``.
    """

    kind = "variational"

    def _rebuild(self):
        w = self.weights
        self.A = sum(wi * r.HHt for wi, r in zip(w, self.records))
        self.B = sum(wi * r.HXt for wi, r in zip(w, self.records))
        self.C = float(sum(wi * (0.5 * r.xnorm2 + r.alpha * r.l1) for wi, r in zip(w, self.records)))

    def _update(self, w, old, new):
        self.A = self.A + w * (new.HHt - old.HHt)
        self.B = self.B + w * (new.HXt - old.HXt)
        self.C += w * (0.5 * (new.xnorm2 - old.xnorm2) + new.alpha * new.l1 - old.alpha * old.l1)

    def value(self, W):
        W = self._check_theta(W)
        return self.C + 0.5 * float(np.vdot(W @ self.A, W)) - float(np.vdot(W, self.B.T))

    def grad(self, W):
        W = self._check_theta(W)
        return W @ self.A - self.B.T

    def lipschitz(self):
        return float(np.linalg.eigvalsh(self.A)[-1])

    def convexity(self):
        """Smallest eigenvalue of ``A`` (the strong convexity modulus), clipped at 0."""
        return max(float(np.linalg.eigvalsh(self.A)[0]), 0.0)

    def statistics(self):
        return {"A": self.A, "B": self.B, "C": self.C}


def make_average(records, weights=None) -> AveragedSurrogate:
    kind = records[0].kind
    if kind == "prox_linear":
        return ProxLinearAverage(records, weights)
    if kind == "variational":
        return NmfAverage(records, weights)
    return GenericAverage(records, weights)


def replace(avg: AveragedSurrogate, v: int, fresh: SurrogateRecord) -> AveragedSurrogate:
    return avg.replace(v, fresh)


def eval_averaged(avg: AveragedSurrogate, theta) -> float:
    return avg.value(theta)


def grad_averaged(avg: AveragedSurrogate, theta) -> np.ndarray:
    return avg.grad(theta)


def error_gradient_norm(avg: AveragedSurrogate, f_grad, theta) -> float:
    """``||grad avg(theta) - grad f(theta)||``; ``f_grad`` is a callable or an array."""
    theta = np.asarray(theta, dtype=float)
    g = f_grad(theta) if callable(f_grad) else f_grad
    return float(np.linalg.norm(avg.grad(theta) - np.asarray(g)))


# ---------------------------------------------------------------------------
# binary snapshots
#
# Little-endian.  Header: magic b"RMSG", u16 version, u16 kind tag, u32 number
# of records, u32 ndim, u64 shape[ndim]; then kind specific sections of
# row-major float64 values.

_MAGIC = b"RMSG"
_VERSION = 1
_KIND_TAGS = {"prox_linear": 1, "variational": 2}


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def dumps_snapshot(avg: AveragedSurrogate) -> bytes:
    if avg.kind not in _KIND_TAGS:
        raise ConfigurationError(f"snapshots are not supported for {avg.kind!r} aggregates")
    out = io.BytesIO()
    shape = avg.shape
    out.write(struct.pack("<4sHHII", _MAGIC, _VERSION, _KIND_TAGS[avg.kind], len(avg), len(shape)))
    out.write(struct.pack(f"<{len(shape)}Q", *shape))
    out.write(_f64(avg.weights))
    if avg.kind == "prox_linear":
        recs = avg.records
        out.write(_f64([r.L for r in recs]))
        out.write(_f64([r.fval for r in recs]))
        out.write(_f64(np.stack([r.anchor for r in recs])))
        out.write(_f64(np.stack([r.gradient for r in recs])))
        out.write(_f64([avg.Lbar, avg.F, avg.D, avg.LQ]))
        out.write(_f64(avg.La))
        out.write(_f64(avg.gbar))
    else:
        recs = avg.records
        r = recs[0].H.shape[0]
        out.write(struct.pack("<I", r))
        out.write(struct.pack(f"<{len(recs)}Q", *[rec.H.shape[1] for rec in recs]))
        out.write(_f64([recs[0].alpha]))
        out.write(_f64([rec.smoothness for rec in recs]))
        out.write(_f64(np.stack([rec.anchor for rec in recs])))
        for rec in recs:
            out.write(_f64(rec.H))
        out.write(_f64(avg.A))
        out.write(_f64(avg.B))
        out.write(_f64([avg.C]))
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def unpack(self, fmt):
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += struct.calcsize(fmt)
        return vals

    def floats(self, count, shape=None):
        arr = np.frombuffer(self.buf, dtype="<f8", count=count, offset=self.pos).astype(float)
        self.pos += 8 * count
        return arr.reshape(shape) if shape is not None else arr


def loads_snapshot(buf: bytes, shards=None) -> AveragedSurrogate:
    """Inverse of :func:`dumps_snapshot`; NMF snapshots need the data ``shards``."""
    rd = _Reader(buf)
    magic, version, tag, nrec, ndim = rd.unpack("<4sHHII")
    if magic != _MAGIC:
        raise DomainError("not a surrogate snapshot")
    if version != _VERSION:
        raise DomainError(f"unsupported snapshot version {version}")
    shape = rd.unpack(f"<{ndim}Q")
    size = int(np.prod(shape))
    weights = rd.floats(nrec)
    if tag == _KIND_TAGS["prox_linear"]:
        Ls = rd.floats(nrec)
        fvals = rd.floats(nrec)
        anchors = rd.floats(nrec * size, (nrec, *shape))
        grads = rd.floats(nrec * size, (nrec, *shape))
        recs = [ProxLinearSurrogate(anchors[i], fvals[i], grads[i], Ls[i]) for i in range(nrec)]
        avg = ProxLinearAverage(recs, weights)
        avg.Lbar, avg.F, avg.D, avg.LQ = (float(x) for x in rd.floats(4))
        avg.La = rd.floats(size, shape)
        avg.gbar = rd.floats(size, shape)
        return avg
    if tag == _KIND_TAGS["variational"]:
        if shards is None or len(shards) != nrec:
            raise ConfigurationError("NMF snapshot needs one data shard per record")
        (r,) = rd.unpack("<I")
        dims = rd.unpack(f"<{nrec}Q")
        (alpha,) = rd.floats(1)
        smooth = rd.floats(nrec)
        anchors = rd.floats(nrec * size, (nrec, *shape))
        recs = []
        for i in range(nrec):
            H = rd.floats(r * dims[i], (r, dims[i]))
            recs.append(VariationalNmfSurrogate(shards[i], H, alpha, anchors[i], smooth[i]))
        avg = NmfAverage(recs, weights)
        avg.A = rd.floats(r * r, (r, r))
        avg.B = rd.floats(r * shape[0], (r, shape[0]))
        (avg.C,) = (float(x) for x in rd.floats(1))
        return avg
    raise DomainError(f"unknown snapshot kind tag {tag}")


def save_snapshot(avg: AveragedSurrogate, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_snapshot(avg))


def load_snapshot(path, shards=None) -> AveragedSurrogate:
    with open(path, "rb") as fh:
        return loads_snapshot(fh.read(), shards)
