"""Recurrent index samplers, visit bookkeeping and recurrence constants.

Steps are 1-based: the first sampled index is ``v_1``.  A ``VisitLog``
stores the last passage time ``k^v(n)`` of every index with the convention
that an index never visited has ``k^v(n) = 1``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .exceptions import ConfigurationError, DomainError, EstimationError

__all__ = [
    "Graph", "cycle_graph", "complete_graph", "lonely_graph", "load_edge_list",
    "IndexSpace", "IID", "RandomWalk", "Cyclic", "Reshuffle", "SamplerKind",
    "Sampler", "VisitLog", "make_sampler", "make_rng", "next_index",
    "last_passage", "dynamic_staleness", "RecurrenceEstimates",
    "estimate_recurrence", "t_cov_bound", "exact_chain_constants",
]


# ---------------------------------------------------------------------------
# graphs

@dataclass(frozen=True)
class Graph:
    """Undirected simple graph stored as sorted neighbour lists."""

    neighbors: tuple

    @property
    def size(self) -> int:
        return len(self.neighbors)

    @classmethod
    def from_edges(cls, n: int, edges) -> "Graph":
        nbrs = [set() for _ in range(n)]
        for u, v in edges:
            u, v = int(u), int(v)
            if not (0 <= u < n and 0 <= v < n):
                raise DomainError(f"edge ({u}, {v}) outside 0..{n - 1}")
            if u == v:
                continue
            nbrs[u].add(v)
            nbrs[v].add(u)
        return cls(tuple(tuple(sorted(s)) for s in nbrs))

    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=np.int64)

    def is_connected(self) -> bool:
        n = self.size
        if n == 0:
            return False
        rows = [u for u, nb in enumerate(self.neighbors) for _ in nb]
        cols = [v for nb in self.neighbors for v in nb]
        adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        ncomp, _ = connected_components(adj, directed=False)
        return ncomp == 1

    def neighbor_table(self):
        """Padded ``(n, max_degree)`` neighbour table and degree vector."""
        deg = self.degrees()
        table = np.zeros((self.size, max(int(deg.max()), 1)), dtype=np.int64)
        for u, nb in enumerate(self.neighbors):
            table[u, :len(nb)] = nb
        return table, deg

    def transition_matrix(self) -> np.ndarray:
        n = self.size
        P = np.zeros((n, n))
        for u, nb in enumerate(self.neighbors):
            if nb:
                P[u, list(nb)] = 1.0 / len(nb)
        return P

    def stationary(self) -> np.ndarray:
        deg = self.degrees().astype(float)
        return deg / deg.sum()


def cycle_graph(n: int) -> Graph:
    if n < 3:
        return Graph.from_edges(n, [(0, 1)] if n == 2 else [])
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def complete_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def lonely_graph(n: int) -> Graph:
    """Clique on ``n - 1`` vertices plus vertex ``n - 1`` hanging off vertex 0."""
    if n < 3:
        raise ConfigurationError("lonely graph needs at least 3 vertices")
    edges = [(i, j) for i in range(n - 1) for j in range(i + 1, n - 1)]
    edges.append((0, n - 1))
    return Graph.from_edges(n, edges)


def load_edge_list(path, n: Optional[int] = None) -> Graph:
    """Read a whitespace separated ``u v`` edge list with 0-based vertices."""
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ConfigurationError(f"{path}:{lineno}: expected 'u v'")
            edges.append((int(parts[0]), int(parts[1])))
    if n is None:
        n = 1 + max((max(e) for e in edges), default=-1)
    return Graph.from_edges(n, edges)


# ---------------------------------------------------------------------------
# index space and sampler kinds

class IndexSpace:
    """Finite index set ``{0, ..., size-1}`` with weights ``pi`` and optional graph."""

    def __init__(self, size: int, weights=None, topology: Optional[Graph] = None):
        size = int(size)
        if size < 1:
            raise ConfigurationError("index space must be nonempty")
        if weights is None:
            weights = np.full(size, 1.0 / size)
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (size,):
            raise ConfigurationError("weights must have one entry per index")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigurationError("weights must be a probability vector")
        if topology is not None:
            if topology.size != size:
                raise ConfigurationError("topology size does not match index space")
            if not topology.is_connected():
                raise ConfigurationError("topology must be connected")
        self.size = size
        self.weights = weights
        self.topology = topology

    @property
    def pi_min(self) -> float:
        return float(self.weights.min())

    @classmethod
    def uniform(cls, size: int, topology: Optional[Graph] = None) -> "IndexSpace":
        return cls(size, None, topology)


@dataclass(frozen=True)
class IID:
    probs: Optional[Sequence[float]] = None  # None means uniform


@dataclass(frozen=True)
class RandomWalk:
    graph: Graph
    start: int = 0


@dataclass(frozen=True)
class Cyclic:
    permutation: Optional[Sequence[int]] = None  # None means identity


@dataclass(frozen=True)
class Reshuffle:
    pass


SamplerKind = (IID, RandomWalk, Cyclic, Reshuffle)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox generator; ``stream`` selects an independent substream."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# visit log

class VisitLog:
    """Sampling history: current step, current index and last passage times."""

    def __init__(self, size: int):
        if size < 1:
            raise ConfigurationError("empty index space")
        self.size = int(size)
        self.step = 0
        self.current: Optional[int] = None
        self._last = np.zeros(self.size, dtype=np.int64)  # 0 = never visited
        self.counts = np.zeros(self.size, dtype=np.int64)

    @property
    def visited(self) -> np.ndarray:
        return self._last > 0

    def record(self, v: int) -> None:
        if not 0 <= v < self.size:
            raise DomainError(f"index {v} out of range")
        self.step += 1
        self.current = int(v)
        self._last[v] = self.step
        self.counts[v] += 1

    def last_passage(self, v: int) -> int:
        if not 0 <= v < self.size:
            raise DomainError(f"index {v} out of range 0..{self.size - 1}")
        k = int(self._last[v])
        return k if k > 0 else 1

    def last_passages(self) -> np.ndarray:
        return np.where(self._last > 0, self._last, 1)

    def staleness(self) -> int:
        if self.step == 0:
            return 0
        return int(self.step - self.last_passages().min())

    def state(self) -> dict:
        return {"step": self.step, "current": self.current,
                "last": self._last.tolist(), "counts": self.counts.tolist()}

    @classmethod
    def from_state(cls, state: dict) -> "VisitLog":
        log = cls(len(state["last"]))
        log.step = int(state["step"])
        log.current = state["current"]
        log._last = np.asarray(state["last"], dtype=np.int64)
        log.counts = np.asarray(state["counts"], dtype=np.int64)
        return log


def last_passage(log: VisitLog, v: int) -> int:
    """Last passage time ``k^v(n)``; 1 when ``v`` has not been visited."""
    return log.last_passage(v)


def dynamic_staleness(log: VisitLog) -> int:
    """``max_v (n - k^v(n))`` at the log's current step."""
    return log.staleness()


# ---------------------------------------------------------------------------
# samplers

class Sampler:
    """Stateful index generator for one of the sampler kinds."""

    def __init__(self, kind, space: IndexSpace, seed: int = 0, stream: int = 0):
        self.kind = kind
        self.space = space
        self.seed = int(seed)
        self.stream = int(stream)
        self.rng = make_rng(seed, stream)
        n = space.size
        self._pos = 0
        self._perm = None
        if isinstance(kind, IID):
            probs = space.weights if kind.probs is None else np.asarray(kind.probs, float)
            if probs.shape != (n,) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12:
                raise ConfigurationError("IID distribution must be a probability vector")
            self._cdf = np.cumsum(probs)
            self._probs = probs
        elif isinstance(kind, RandomWalk):
            graph = kind.graph
            if graph.size != n:
                raise ConfigurationError("random walk graph size mismatch")
            if not graph.is_connected():
                raise ConfigurationError("random walk requires a connected graph")
            if not 0 <= kind.start < n:
                raise ConfigurationError("random walk start index out of range")
            self._table, self._deg = graph.neighbor_table()
            self._pos = int(kind.start)
        elif isinstance(kind, Cyclic):
            perm = np.arange(n) if kind.permutation is None else np.asarray(kind.permutation)
            if sorted(perm.tolist()) != list(range(n)):
                raise ConfigurationError("cyclic order must be a permutation of the indices")
            self._perm = perm.astype(np.int64)
        elif isinstance(kind, Reshuffle):
            pass
        else:
            raise ConfigurationError(f"unknown sampler kind {kind!r}")

    def draw(self, step: int) -> int:
        """Index ``v_step`` given that ``step - 1`` indices were drawn before."""
        kind, n = self.kind, self.space.size
        if isinstance(kind, IID):
            u = self.rng.random()
            return int(min(np.searchsorted(self._cdf, u, side="right"), n - 1))
        if isinstance(kind, RandomWalk):
            j = int(self.rng.integers(self._deg[self._pos]))
            self._pos = int(self._table[self._pos, j])
            return self._pos
        if isinstance(kind, Cyclic):
            return int(self._perm[(step - 1) % n])
        # reshuffle: fresh permutation at steps 1, n+1, 2n+1, ...
        if (step - 1) % n == 0:
            self._perm = self.rng.permutation(n)
        return int(self._perm[(step - 1) % n])

    def state(self) -> dict:
        """JSON-serialisable snapshot (generator arrays become integer lists)."""
        return {"pos": self._pos,
                "perm": None if self._perm is None else self._perm.tolist(),
                "rng": _plain(self.rng.bit_generator.state)}

    def restore(self, state: dict) -> None:
        self._pos = int(state["pos"])
        if state["perm"] is not None:
            self._perm = np.asarray(state["perm"], dtype=np.int64)
        rng = dict(state["rng"])
        rng["state"] = {k: np.asarray(v, dtype=np.uint64) for k, v in rng["state"].items()}
        rng["buffer"] = np.asarray(rng["buffer"], dtype=np.uint64)
        self.rng.bit_generator.state = rng


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(x) for x in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def make_sampler(kind, space: IndexSpace, seed: int = 0) -> Sampler:
    return Sampler(kind, space, seed)


def next_index(sampler: Sampler, log: VisitLog) -> int:
    """Draw ``v_{n+1}`` and advance the log."""
    if log.size != sampler.space.size:
        raise ConfigurationError("log and sampler disagree on the index space")
    v = sampler.draw(log.step + 1)
    log.record(v)
    return v


# ---------------------------------------------------------------------------
# recurrence constants

@dataclass
class RecurrenceEstimates:
    t_hit: float
    t_target: float
    t_cov: float
    stderr_hit: float = 0.0
    stderr_target: float = 0.0
    stderr_cov: float = 0.0
    method: str = "analytic"
    replicas: int = 0
    horizon: int = 0
    censored: int = 0
    observations: int = 0
    notes: str = ""

    def csv_row(self) -> str:
        vals = [self.t_hit, self.t_target, self.t_cov,
                self.stderr_hit, self.stderr_target, self.stderr_cov]
        return ",".join([*(format(float(x), ".17g") for x in vals),
                         self.method, str(self.replicas), str(self.horizon)])

    CSV_HEADER = "t_hit,t_target,t_cov,stderr_hit,stderr_target,stderr_cov,method,replicas,horizon"


def t_cov_bound(t_hit: float, size: int) -> float:
    """Upper bound ``(2 t_hit + 1) log2(4 |V|)`` on the cover time."""
    return (2.0 * t_hit + 1.0) * math.log2(4.0 * size)


def _is_uniform(p) -> bool:
    p = np.asarray(p, dtype=float)
    return bool(np.allclose(p, 1.0 / p.size, rtol=0, atol=1e-15))


def _analytic(kind, space: IndexSpace):
    n = space.size
    if isinstance(kind, IID) and (kind.probs is None or _is_uniform(kind.probs)) \
            and _is_uniform(space.weights):
        harmonic = sum(1.0 / k for k in range(1, n + 1))
        return RecurrenceEstimates(float(n), float(n), n * harmonic, method="analytic")
    if isinstance(kind, Cyclic) and _is_uniform(space.weights):
        return RecurrenceEstimates(float(n), (n - 1) / 2.0, float(n), method="analytic")
    return None


def _simulate_batch(kind, space: IndexSpace, seed: int, streams: np.ndarray, length: int):
    """Trajectories ``v_0..v_length`` (one row per replica stream).

    Column 0 holds the walk position before the first draw (-1 when the
    kind has no such notion).
    """
    R, n = len(streams), space.size
    out = np.empty((R, length + 1), dtype=np.int64)
    out[:, 0] = -1
    if isinstance(kind, Cyclic):
        perm = np.arange(n) if kind.permutation is None else np.asarray(kind.permutation)
        out[:, 1:] = perm[np.arange(length) % n][None, :]
        return out
    rngs = [make_rng(seed, int(s)) for s in streams]
    if isinstance(kind, IID):
        probs = space.weights if kind.probs is None else np.asarray(kind.probs, float)
        cdf = np.cumsum(probs)
        for i, rng in enumerate(rngs):
            u = rng.random(length)
            out[i, 1:] = np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)
        return out
    if isinstance(kind, Reshuffle):
        epochs = -(-length // n)
        for i, rng in enumerate(rngs):
            seq = np.concatenate([rng.permutation(n) for _ in range(epochs)])
            out[i, 1:] = seq[:length]
        return out
    if isinstance(kind, RandomWalk):
        table, deg = kind.graph.neighbor_table()
        u = np.stack([rng.random(length) for rng in rngs])
        pos = np.full(R, int(kind.start), dtype=np.int64)
        out[:, 0] = pos
        for t in range(length):
            j = np.minimum((u[:, t] * deg[pos]).astype(np.int64), deg[pos] - 1)
            pos = table[pos, j]
            out[:, t + 1] = pos
        return out
    raise ConfigurationError(f"unknown sampler kind {kind!r}")


def _condition_keys(kind, traj: np.ndarray, n: int) -> tuple[np.ndarray, int]:
    """Conditioning key for each observation time (columns 1..T of ``traj``).

    Random walk and cyclic: the current index (a sufficient statistic of the
    history); reshuffle: position within the epoch; iid: a single key.
    """
    T = traj.shape[1] - 1
    if isinstance(kind, (RandomWalk, Cyclic)):
        return traj[:, 1:], n
    if isinstance(kind, Reshuffle):
        return np.broadcast_to(np.arange(T) % n, (traj.shape[0], T)), n
    return np.zeros((traj.shape[0], T), dtype=np.int64), 1


def _ratio_stderr(sums: np.ndarray, counts: np.ndarray) -> float:
    """Delta-method standard error of ``sum(sums)/sum(counts)`` across replicas."""
    R = len(sums)
    total = counts.sum()
    if total == 0:
        return math.inf
    m = sums.sum() / total
    if R < 2:
        return 0.0
    resid = sums - m * counts
    var = (resid ** 2).sum() / (R * (R - 1))
    return float(math.sqrt(var) / (total / R))


def estimate_recurrence(kind, space: IndexSpace, replicas: int = 1000, horizon: int = 0,
                        seed: int = 0, method: str = "auto", batch: int = 500,
                        max_censored_fraction: float = 0.01) -> RecurrenceEstimates:
    """Estimate ``t_hit``, ``t_target`` and ``t_cov`` for a sampler.

    Exact values are returned for uniform iid and uniform-weight cyclic
    samplers unless ``method="monte_carlo"``.  The Monte Carlo branch
    observes, for every replica and every time ``n = 1..horizon``, the return
    times ``tau_{n,v}`` (looking ahead at most ``horizon`` steps).  Return
    times are averaged conditionally on a finite history summary (see
    ``_condition_keys``); ``t_hit`` is the max over keys and targets of these
    averages, ``t_target`` the max over keys of their pi-average and
    ``t_cov`` the max over keys of the mean of ``max_v tau_{n,v}``.
    Standard errors are those of the maximising cell, computed across
    replicas.

    Censored return times are imputed as ``horizon + 1``; more than
    ``max_censored_fraction`` censored observations raises
    :class:`EstimationError` carrying the partial estimate.
    """
    n = space.size
    if replicas < 1:
        raise ConfigurationError("replicas must be >= 1")
    if horizon == 0:
        horizon = 50 * n
    if horizon < n:
        raise ConfigurationError("horizon must be at least |V|")
    if method not in ("auto", "analytic", "monte_carlo"):
        raise ConfigurationError(f"unknown method {method!r}")
    if method != "monte_carlo":
        est = _analytic(kind, space)
        if est is not None:
            est.horizon = horizon
            return est
        if method == "analytic":
            raise ConfigurationError("no analytic formula for this sampler")

    pi = space.weights
    K = n if isinstance(kind, (RandomWalk, Cyclic, Reshuffle)) else 1
    S = np.zeros((replicas, K, n))      # sum of tau per (replica, key, target)
    C = np.zeros((replicas, K))         # sum of max_v tau
    N = np.zeros((replicas, K))         # observation counts
    censored = 0
    rows = np.arange(replicas)
    for lo in range(0, replicas, batch):
        hi = min(lo + batch, replicas)
        traj = _simulate_batch(kind, space, seed, rows[lo:hi], 2 * horizon)
        keys, _ = _condition_keys(kind, traj, n)
        B = hi - lo
        nxt = np.full((B, n), 2 * horizon + 1 + horizon, dtype=np.int64)
        # next visit strictly after time t: scan backwards
        tau_sum = np.zeros((B, K, n))
        cov_sum = np.zeros((B, K))
        cnt = np.zeros((B, K))
        b_idx = np.arange(B)
        for t in range(2 * horizon, 0, -1):
            if t <= horizon:
                tau = nxt - t
                cens = tau > horizon
                if cens.any():
                    censored += int(cens.sum())
                    tau = np.where(cens, horizon + 1, tau)
                k = keys[:, t - 1]
                tau_sum[b_idx, k, :] += tau
                cov_sum[b_idx, k] += tau.max(axis=1)
                cnt[b_idx, k] += 1
            nxt[b_idx, traj[:, t]] = t
        S[lo:hi] = tau_sum
        C[lo:hi] = cov_sum
        N[lo:hi] = cnt

    tot_N = N.sum(axis=0)                       # (K,)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_tau = S.sum(axis=0) / tot_N[:, None]   # (K, n)
        mean_cov = C.sum(axis=0) / tot_N
    valid = tot_N > 0
    mean_tau[~valid] = -np.inf
    mean_cov[~valid] = -np.inf
    kh, vh = np.unravel_index(np.argmax(mean_tau), mean_tau.shape)
    target_by_key = np.where(valid, mean_tau @ pi, -np.inf)
    kt = int(np.argmax(target_by_key))
    kc = int(np.argmax(mean_cov))
    est = RecurrenceEstimates(
        t_hit=float(mean_tau[kh, vh]),
        t_target=float(target_by_key[kt]),
        t_cov=float(mean_cov[kc]),
        stderr_hit=_ratio_stderr(S[:, kh, vh], N[:, kh]),
        stderr_target=_ratio_stderr(S[:, kt, :] @ pi, N[:, kt]),
        stderr_cov=_ratio_stderr(C[:, kc], N[:, kc]),
        method="monte_carlo",
        replicas=replicas,
        horizon=horizon,
        censored=censored,
        observations=int(tot_N.sum() * n),
        notes="max over conditioning keys of time-averaged conditional return times",
    )
    if censored:
        frac = censored / max(est.observations, 1)
        if frac > max_censored_fraction:
            raise EstimationError(
                f"{censored} of {est.observations} return times censored "
                f"({frac:.2%}); increase horizon", estimate=est)
        warnings.warn(f"{censored} censored return times imputed as horizon+1",
                      RuntimeWarning, stacklevel=2)
    return est


def exact_chain_constants(P: np.ndarray, pi: np.ndarray):
    """Exact ``(t_hit, t_target)`` of a finite Markov chain by first-step analysis.

    ``E_w[tau_v] = 1 + sum_{u != v} P[w, u] E_u[tau_v]`` is solved as one
    linear system per target ``v``.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    M = np.empty((n, n))  # M[w, v] = E_w[tau_{0,v}]
    for v in range(n):
        Q = P.copy()
        Q[:, v] = 0.0
        M[:, v] = np.linalg.solve(np.eye(n) - Q, np.ones(n))
    return float(M.max()), float((M @ pi).max()), M
