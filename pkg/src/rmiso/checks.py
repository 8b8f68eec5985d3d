"""Acceptance checks run by ``rmiso check`` and by the test-suite.

Each check returns a :class:`CheckResult`.  Checks that share the seeded
run matrix (monotonicity, energy, gap sum, radius feasibility) compute it
once per process and reuse it.
"""
from __future__ import annotations

import math
import os
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import lsq_linear, minimize

from .exceptions import ConfigurationError
from .inner_solvers import (Box, InnerTolerance, NonnegRowBall, minimize_prox, nnls_l1,
                            nnls_l1_objective)
from .problems import (NmfProblem, dense_logreg, desk_logreg, nmf_dictionary_update,
                       synthetic_nmf, synthetic_quadratic)
from .sampling import (IID, Cyclic, IndexSpace, RandomWalk, Sampler, complete_graph,
                       cycle_graph, estimate_recurrence, exact_chain_constants, lonely_graph,
                       t_cov_bound)
from .solver import Solver, SolverConfig, Variant
from .surrogate import (Component, ProxLinearSurrogate, VariationalNmfSurrogate, build_dc,
                        build_prox_linear, build_proximal, build_variational_nmf, make_average)

__all__ = ["CheckResult", "CHECKS", "run_checks", "run_matrix", "DEFAULT_SEEDS"]

DEFAULT_SEEDS = tuple(range(10))
MATRIX_ITERS = 2000
MATRIX_PROBLEMS = ("quadratic", "nmf", "logistic")
TIGHT = InnerTolerance(grad_tol=1e-12, max_iters=100_000)


@dataclass
class CheckResult:
    name: str
    number: int
    passed: bool
    detail: str
    elapsed: float
    budget: Optional[float] = None
    metrics: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        budget = f"/{self.budget:.0f}s" if self.budget else ""
        return f"[{status}] {self.number:2d} {self.name}: {self.detail} ({self.elapsed:.1f}s{budget})"


# ---------------------------------------------------------------------------
# shared run matrix

def _matrix_problem(name: str, seed: int):
    """Problem, rho and graph for one cell of the run matrix."""
    if name == "quadratic":
        return synthetic_quadratic(20, 10, seed=seed), 1.0
    if name == "nmf":
        shards, _ = synthetic_nmf(seed=seed)
        return NmfProblem(shards, 3), 50.0
    if name == "logistic":
        prob = desk_logreg(seed=seed)
        return prob, 50.0 * prob.smoothness()
    raise ConfigurationError(f"unknown matrix problem {name!r}")


@dataclass
class MatrixRun:
    problem: str
    variant: Variant
    seed: int
    summary: object


_MATRIX_CACHE: dict = {}


def run_matrix(seeds: Sequence[int] = DEFAULT_SEEDS, iters: int = MATRIX_ITERS,
               variants: Sequence[Variant] = tuple(Variant)):
    """Every variant on every matrix problem and seed (random walk on a cycle)."""
    key = (tuple(seeds), iters, tuple(variants), os.environ.get("RMISO_MUTATION", ""))
    if key in _MATRIX_CACHE:
        return _MATRIX_CACHE[key]
    t0 = time.perf_counter()
    runs = []
    for seed in seeds:
        for name in MATRIX_PROBLEMS:
            for variant in variants:
                prob, rho = _matrix_problem(name, seed)
                V = prob.n_components
                graph = cycle_graph(V)
                cfg = SolverConfig(variant, rho=rho, max_iters=iters, seed=seed,
                                   record_every=iters // 4, timing=False)
                sampler = Sampler(RandomWalk(graph), IndexSpace.uniform(V, graph), seed)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    summary = Solver(prob, cfg, sampler).run()
                runs.append(MatrixRun(name, variant, seed, summary))
    result = (runs, time.perf_counter() - t0)
    _MATRIX_CACHE[key] = result
    return result


def _worst(values):
    values = list(values)
    return max(values) if values else 0.0


# ---------------------------------------------------------------------------
# criteria

def check_monotonicity(seeds=DEFAULT_SEEDS):
    runs, elapsed = run_matrix(seeds)
    worst, bad = -math.inf, []
    for r in runs:
        g = r.summary.surrogate_values
        rel = np.max((g[1:] - g[:-1]) / (1.0 + np.abs(g[:-1])))
        worst = max(worst, float(rel))
        if rel > 1e-9 or not r.summary.checks["intermediate"]["passed"]:
            bad.append(f"{r.problem}/{r.variant.value}/{r.seed}")
    ok = not bad
    return ok, (f"{len(runs)} runs, worst relative increase {worst:.2e}"
                + (f", failing {bad[:5]}" if bad else "")), {"worst": worst}, elapsed


def check_energy(seeds=DEFAULT_SEEDS):
    runs, _ = run_matrix(seeds)
    slack, bad = [], []
    for r in runs:
        if r.variant not in (Variant.RMISO_CPR, Variant.RMISO_DPR):
            continue
        s = r.summary
        excess = s.energy - s.delta0 - 1e-6
        slack.append(excess)
        if excess > 0:
            bad.append(f"{r.problem}/{r.variant.value}/{r.seed}")
    return not bad, (f"{len(slack)} CPR/DPR runs, max(energy - delta0) {_worst(slack):.3e}"
                     + (f", failing {bad[:5]}" if bad else "")), {"worst": _worst(slack)}, None


def check_gap_sum(seeds=DEFAULT_SEEDS):
    runs, _ = run_matrix(seeds)
    slack, bad = [], []
    for r in runs:
        s = r.summary
        excess = s.gap_sum - s.delta0 / s.pi_min - 1e-6
        slack.append(excess)
        if excess > 0:
            bad.append(f"{r.problem}/{r.variant.value}/{r.seed}")
    return not bad, (f"{len(runs)} runs, max(gap sum - delta0/pi_min) {_worst(slack):.3e}"
                     + (f", failing {bad[:5]}" if bad else "")), {"worst": _worst(slack)}, None


def check_dr_feasibility(seeds=DEFAULT_SEEDS):
    runs, _ = run_matrix(seeds)
    steps = long_points = 0
    worst_step, worst_long, bad = -math.inf, 0.0, []
    for r in runs:
        if r.variant is not Variant.RMISO_DR:
            continue
        s = r.summary
        steps += s.iterations
        long_points += s.long_points
        worst_step = max(worst_step, s.checks["dr_feasible"]["worst_excess"])
        worst_long = max(worst_long, s.long_point_worst)
        if not s.checks["dr_feasible"]["passed"] or s.long_point_failures:
            bad.append(f"{r.problem}/{r.seed}")
    detail = (f"{steps} steps, worst step excess {worst_step:.2e}; {long_points} long points, "
              f"worst residual {worst_long:.2e}")
    ok = not bad and long_points > 0
    return ok, detail + (f", failing {bad[:5]}" if bad else ""), \
        {"long_points": long_points, "worst_residual": worst_long}, None


RATE_NS = (100, 1000, 10_000)


def rate_slope(seed: int, ns=RATE_NS, record_every: int = 10) -> float:
    """Log-log slope of the running minimum gradient norm against N."""
    prob = dense_logreg(20, 10, seed=seed)
    cfg = SolverConfig(Variant.RMISO_CPR, rho=9.5 * prob.smoothness(), max_iters=max(ns),
                       seed=seed, record_every=record_every, timing=False)
    summary = Solver(prob, cfg, Sampler(Cyclic(), IndexSpace.uniform(20), seed)).run()
    n = np.array([r.n for r in summary.records])
    grad = np.array([r.stationarity for r in summary.records])
    mins = [grad[n <= N].min() for N in ns]
    return float(np.polyfit(np.log(ns), np.log(mins), 1)[0])


def check_rates(seeds=DEFAULT_SEEDS):
    slopes = [rate_slope(s) for s in seeds]
    ok = all(s <= -0.45 for s in slopes)
    return ok, f"slopes in [{min(slopes):.3f}, {max(slopes):.3f}] (need <= -0.45)", \
        {"slopes": slopes}, None


def check_recurrence(seeds=DEFAULT_SEEDS):
    R = 10_000
    notes, ok = [], True
    for n in (4, 10, 20):
        est = estimate_recurrence(Cyclic(), IndexSpace.uniform(n))
        good = est.t_hit == n and est.t_target == (n - 1) / 2
        ok &= good
    notes.append(f"cyclic analytic {'exact' if ok else 'WRONG'}")

    est = estimate_recurrence(IID(), IndexSpace.uniform(10), replicas=R, method="monte_carlo")
    z = abs(est.t_target - 10) / est.stderr_target
    ok &= z <= 3
    notes.append(f"iid t_target z={z:.2f}")

    g = cycle_graph(8)
    space = IndexSpace.uniform(8, g)
    est = estimate_recurrence(RandomWalk(g), space, replicas=R, horizon=200)
    hit, target, _ = exact_chain_constants(g.transition_matrix(), space.weights)
    z_hit = abs(est.t_hit - hit) / est.stderr_hit
    z_tgt = abs(est.t_target - target) / est.stderr_target
    ok &= z_hit <= 3 and z_tgt <= 3
    notes.append(f"cycle walk z_hit={z_hit:.2f} z_target={z_tgt:.2f}")

    ratios = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for name, graph, horizon in (("lonely", lonely_graph(20), 3000),
                                     ("complete", complete_graph(20), 300)):
            e = estimate_recurrence(RandomWalk(graph), IndexSpace.uniform(20, graph),
                                    replicas=R, horizon=horizon)
            ratios[name] = e.t_hit / e.t_target
    ok &= ratios["lonely"] > ratios["complete"]
    notes.append(f"hit/target lonely {ratios['lonely']:.2f} vs complete {ratios['complete']:.2f}")
    return bool(ok), "; ".join(notes), ratios, None


def check_cover_time(seeds=DEFAULT_SEEDS):
    rows, ok = [], True
    for n in (4, 8, 16):
        graph = cycle_graph(n)
        for label, kind in (("cyclic", Cyclic()), ("iid", IID()), ("walk", RandomWalk(graph))):
            space = IndexSpace.uniform(n, graph)
            horizon = 40 * n * (n if label == "walk" else 1)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                mc = estimate_recurrence(kind, space, replicas=2000, horizon=horizon,
                                         method="monte_carlo")
            t_hit = estimate_recurrence(kind, space, replicas=2000, horizon=horizon).t_hit
            bound = t_cov_bound(t_hit, n)
            good = mc.t_cov - mc.stderr_cov <= bound
            ok &= good
            rows.append((label, n, mc.t_cov, bound))
    worst = max(r[2] / r[3] for r in rows)
    return bool(ok), f"{len(rows)} samplers, max t_cov/bound {worst:.3f}", \
        {"rows": rows}, None


def check_prox_linear(seeds=DEFAULT_SEEDS, instances: int = 50):
    """Closed form against a bounded least-squares oracle."""
    rng = np.random.default_rng(12345)
    worst = 0.0
    for _ in range(instances):
        p, V = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        lo = -rng.random(p) * 2
        hi = rng.random(p) * 2
        fset = Box(lo, hi)
        w = rng.dirichlet(np.ones(V))
        recs = [ProxLinearSurrogate(fset.project(rng.normal(size=p) * 2), rng.normal(),
                                    rng.normal(size=p) * 3, rng.uniform(0.1, 5))
                for _ in range(V)]
        avg = make_average(recs, w)
        prev = fset.project(rng.normal(size=p))
        for rho in (0.0, 1.0, 100.0):
            x = minimize_prox(avg, fset, prev, rho)
            # sum_v w L/2 ||x - (a - g/L)||^2 + rho/2 ||x - prev||^2 as stacked least squares
            blocks, rhs = [], []
            for wi, r in zip(w, recs):
                s = math.sqrt(wi * r.L)
                blocks.append(s * np.eye(p))
                rhs.append(s * (r.anchor - r.gradient / r.L))
            if rho > 0:
                blocks.append(math.sqrt(rho) * np.eye(p))
                rhs.append(math.sqrt(rho) * prev)
            sol = lsq_linear(np.vstack(blocks), np.concatenate(rhs), bounds=(lo, hi),
                             method="bvls", tol=1e-15)
            worst = max(worst, float(np.max(np.abs(sol.x - x))))
    ok = worst <= 1e-8
    return ok, f"{instances} instances x 3 rho, max deviation {worst:.2e}", {"worst": worst}, None


def _dictionary_oracle(A, B, prev, rho):
    """Grid search over the quarter disc followed by a local polish (p = 1, r = 2)."""
    def obj(w):
        d = w - prev
        return 0.5 * w @ A @ w - w @ B[:, 0] + 0.5 * rho * d @ d

    radii = np.linspace(0, 1, 201)
    angles = np.linspace(0, math.pi / 2, 201)
    rr, aa = np.meshgrid(radii, angles)
    pts = np.stack([(rr * np.cos(aa)).ravel(), (rr * np.sin(aa)).ravel()], axis=1)
    vals = 0.5 * np.einsum("ij,jk,ik->i", pts, A, pts) - pts @ B[:, 0] \
        + 0.5 * rho * ((pts - prev) ** 2).sum(axis=1)
    start = pts[np.argmin(vals)]
    res = minimize(obj, start, method="SLSQP", bounds=[(0, 1), (0, 1)],
                   constraints=[{"type": "ineq", "fun": lambda w: 1.0 - w @ w}],
                   options={"ftol": 1e-15, "maxiter": 500})
    best = res.x if obj(res.x) <= obj(start) else start
    return best


def check_nmf_statistics(seeds=DEFAULT_SEEDS):
    shards, _ = synthetic_nmf(seed=0)
    prob = NmfProblem(shards, 3)
    space = IndexSpace.uniform(len(shards))
    cfg = SolverConfig(Variant.RMISO_CPR, rho=50.0, max_iters=500, record_every=500,
                       timing=False)
    solver = Solver(prob, cfg, Sampler(IID(), space, 0))
    solver.run()
    full = solver.avg.recomputed()
    err_A = np.linalg.norm(solver.avg.A - full.A) / np.linalg.norm(full.A)
    err_B = np.linalg.norm(solver.avg.B - full.B) / np.linalg.norm(full.B)

    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(30):
        X = rng.random((1, 10)) * 2
        H = rng.random((2, 10))
        rec = VariationalNmfSurrogate(X, H, 0.05, np.zeros((1, 2)))
        avg = make_average([rec])
        prev = NonnegRowBall(1.0).project(rng.random((1, 2)))
        rho = (0.0, 0.1, 1.0)[i % 3]
        W = nmf_dictionary_update(avg, prev, rho=rho, tol=TIGHT)
        oracle = _dictionary_oracle(avg.A, avg.B, prev[0], rho)
        worst = max(worst, float(np.max(np.abs(W[0] - oracle))))
    ok = err_A <= 1e-9 and err_B <= 1e-9 and worst <= 1e-3
    return ok, (f"relative drift A {err_A:.1e}, B {err_B:.1e}; "
                f"dictionary update vs oracle {worst:.1e}"), \
        {"err_A": err_A, "err_B": err_B, "oracle": worst}, None


ORDER_ITERS = 3000
ORDER_EVERY = 50


def ordering_trajectory(seed: int, sampler: str, shards, iters=ORDER_ITERS, every=ORDER_EVERY):
    """Objective every ``every`` steps for the cyclic (rho=50) or walk (rho=2500) preset."""
    graph = cycle_graph(len(shards))
    kind = Cyclic() if sampler == "cyclic" else RandomWalk(graph)
    rho = 50.0 if sampler == "cyclic" else 2500.0
    prob = NmfProblem(shards, 3)
    cfg = SolverConfig(Variant.RMISO_CPR, rho=rho, max_iters=iters, record_every=every,
                       seed=seed, timing=False)
    solver = Solver(prob, cfg, Sampler(kind, IndexSpace.uniform(len(shards), graph), seed))
    summary = solver.run()
    n = np.array([0] + [r.n for r in summary.records])
    f = np.array([summary.objective_values[0]] + [r.objective for r in summary.records])
    return n, f


def _first_hit(n, f, target):
    hit = np.flatnonzero(f <= target)
    return float(n[hit[0]]) if hit.size else math.inf


def check_cyclic_vs_walk(seeds=DEFAULT_SEEDS):
    shards, _ = synthetic_nmf(n_shards=12, p=12, rank=3, seed=0)
    cyc = [ordering_trajectory(s, "cyclic", shards) for s in seeds]
    walk = [ordering_trajectory(s, "walk", shards) for s in seeds]
    target = float(np.median([f[-1] for _, f in walk]))
    wins = sum(_first_hit(*c, target) < _first_hit(*w, target) for c, w in zip(cyc, walk))
    need = math.ceil(0.8 * len(seeds))
    return wins >= need, f"cyclic faster on {wins}/{len(seeds)} seeds (need {need})", \
        {"wins": wins, "target": target}, None


def _fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _axioms(rec, f, points):
    """Worst violations of the four surrogate axioms for one record."""
    a = rec.anchor
    fa = f(a)
    tight = abs(rec.value(a) - fa) / (1.0 + abs(fa))
    grad_err = float(np.max(np.abs(rec.grad(a) - _fd_grad(f, a))))
    maj, bound = math.inf, -math.inf
    for x in points:
        fx, gx = f(x), rec.value(x)
        d2 = float(np.vdot(x - a, x - a))
        maj = min(maj, gx - fx)
        bound = max(bound, abs(gx - fx) - 0.5 * rec.smoothness * d2)
    return maj, tight, grad_err, bound


def check_surrogate_axioms(seeds=DEFAULT_SEEDS, n_points: int = 1000):
    rng = np.random.default_rng(2024)
    results = {}

    prob = desk_logreg(n_rows=400, n_features=20, batch=40, seed=1)
    comp = Component(lambda t: prob.component_value(0, t),
                     lambda t: prob.component_value_grad(0, t)[1], prob.row_smoothness[0])
    a = rng.normal(size=20) * 0.5
    pts = [a + rng.normal(size=20) * rng.uniform(0.01, 3) for _ in range(n_points)]
    L = float(prob.row_smoothness[0])
    results["prox_linear"] = _axioms(build_prox_linear(comp, a, L), comp.value, pts)
    results["proximal"] = _axioms(build_proximal(comp, a, 1.5 * L, L), comp.value, pts)

    M = rng.normal(size=(8, 6))
    b = rng.normal(size=8)
    c = 0.7
    convex = Component(lambda t: 0.5 * float(np.sum((M @ t - b) ** 2)),
                       lambda t: M.T @ (M @ t - b), float(np.linalg.norm(M, 2) ** 2))
    concave = Component(lambda t: -c * float(np.sum(np.logaddexp(t, -t) - math.log(2))),
                        lambda t: -c * np.tanh(t))
    a6 = rng.normal(size=6)
    pts6 = [a6 + rng.normal(size=6) * rng.uniform(0.01, 3) for _ in range(n_points)]
    dc = build_dc(convex, concave, a6, c)
    results["dc"] = _axioms(dc, lambda t: convex.value(t) + concave.value(t), pts6)

    shards, _ = synthetic_nmf(seed=3)
    X = shards[0]
    fset = NonnegRowBall(1.0)
    W0 = fset.project(rng.random((X.shape[0], 3)))

    def f_nmf(W):
        H = nnls_l1(X, W, 1.0 / 28, TIGHT)
        return nnls_l1_objective(X, W, H, 1.0 / 28)

    rec = build_variational_nmf(X, W0, 1.0 / 28, TIGHT)
    ptsW = [fset.project(W0 + rng.normal(size=W0.shape) * rng.uniform(0.01, 1))
            for _ in range(n_points)]
    results["variational"] = _axioms(rec, f_nmf, ptsW)

    ok = True
    parts = []
    for name, (maj, tight, grad_err, bound) in results.items():
        good = maj >= -1e-9 and tight <= 1e-10 and grad_err <= 1e-5 and bound <= 1e-9
        ok &= good
        parts.append(f"{name} {'ok' if good else 'FAIL'}(maj {maj:.1e}, tight {tight:.0e}, "
                     f"grad {grad_err:.0e}, bound {bound:.1e})")
    return ok, "; ".join(parts), {k: list(v) for k, v in results.items()}, None


@dataclass(frozen=True)
class Check:
    number: int
    name: str
    func: Callable
    budget: Optional[float] = None


CHECKS = (
    Check(1, "monotonicity", check_monotonicity, 120.0),
    Check(2, "energy", check_energy),
    Check(3, "gap_sum", check_gap_sum),
    Check(4, "dr_feasibility", check_dr_feasibility),
    Check(5, "rates", check_rates, 180.0),
    Check(6, "recurrence", check_recurrence, 60.0),
    Check(7, "cover_time", check_cover_time),
    Check(8, "prox_linear", check_prox_linear),
    Check(9, "nmf_statistics", check_nmf_statistics),
    Check(10, "cyclic_vs_walk", check_cyclic_vs_walk, 300.0),
    Check(11, "surrogate_axioms", check_surrogate_axioms),
)

CHECK_NAMES = tuple(c.name for c in CHECKS)


def run_checks(only: Optional[Sequence[str]] = None, seeds: Sequence[int] = DEFAULT_SEEDS,
               report: Optional[Callable[[str], None]] = None) -> list:
    """Run the selected checks in order; ``report`` receives one line per check."""
    if only:
        unknown = set(only) - set(CHECK_NAMES)
        if unknown:
            raise ConfigurationError(f"unknown check(s) {sorted(unknown)}; "
                                     f"choose from {', '.join(CHECK_NAMES)}")
    results = []
    for chk in CHECKS:
        if only and chk.name not in only:
            continue
        t0 = time.perf_counter()
        ok, detail, metrics, shared = chk.func(seeds=tuple(seeds))
        elapsed = time.perf_counter() - t0
        # the run matrix is shared; its cost is charged to the check that owns the budget
        timed = shared if shared is not None else elapsed
        if chk.budget is not None and timed > chk.budget:
            ok = False
            detail += f"; over the {chk.budget:.0f}s budget"
        res = CheckResult(chk.name, chk.number, bool(ok), detail, timed, chk.budget, metrics)
        results.append(res)
        if report is not None:
            report(res.line())
    return results
