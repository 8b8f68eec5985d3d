"""Outer MISO / RMISO loop with per-step diagnostics and invariant bookkeeping."""
from __future__ import annotations

import enum
import io
import json
import math
import os
import struct
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .exceptions import ConfigurationError, DomainError, SolverError
from .inner_solvers import (DEFAULT_TOL, Box, InnerTolerance, NonnegOrthant, Unconstrained,
                            minimize_prox, minimize_radius, projected_gradient_norm,
                            stationarity_measure)
from .sampling import Sampler, VisitLog, next_index
from .surrogate import dumps_snapshot, loads_snapshot, make_average

__all__ = ["Variant", "SolverConfig", "IterationRecord", "RunSummary", "Solver",
           "default_radius", "init", "step", "run", "long_point_check", "CSV_HEADER"]


class Variant(str, enum.Enum):
    MISO = "MISO"
    RMISO_CPR = "RMISO_CPR"
    RMISO_DPR = "RMISO_DPR"
    RMISO_DR = "RMISO_DR"


def default_radius(n: int) -> float:
    """``r_n = 1 / (sqrt(n) log(n + 1))``: nonincreasing, not summable, square summable."""
    return 1.0 / (math.sqrt(n) * math.log(n + 1.0))


@dataclass
class SolverConfig:
    variant: Variant = Variant.RMISO_CPR
    rho: float = 0.0
    radius_schedule: Callable[[int], float] = default_radius
    max_iters: int = 1000
    seed: int = 0
    record_every: int = 1
    invariant_checks: bool = True
    tol: InnerTolerance = DEFAULT_TOL
    lower_bound: Optional[float] = None
    timing: bool = True

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.rho < 0:
            raise ConfigurationError("rho must be nonnegative")
        if self.record_every < 1:
            raise ConfigurationError("record_every must be >= 1")


CSV_HEADER = ("iter,elapsed_ms,objective,surrogate,stationarity,error_grad_norm,"
              "rho_n,radius_n,step_norm,sampled_index,staleness_max")


@dataclass
class IterationRecord:
    n: int
    elapsed_ms: float
    objective: float
    surrogate_value: float
    stationarity: float
    error_grad_norm: float
    rho_n: float
    radius_n: float
    step_norm: float
    sampled_index: int
    staleness_max: int

    def csv_row(self) -> str:
        return ",".join(v if isinstance(v, str) else
                        (str(v) if isinstance(v, (int, np.integer)) else format(float(v), ".17g"))
                        for v in (self.n, self.elapsed_ms, self.objective, self.surrogate_value,
                                  self.stationarity, self.error_grad_norm, self.rho_n,
                                  self.radius_n, self.step_norm, self.sampled_index,
                                  self.staleness_max))


@dataclass
class RunSummary:
    records: list
    surrogate_values: np.ndarray        # gbar_n(theta_n), n = 0..N
    objective_values: np.ndarray        # f(theta_n) at recorded steps (NaN elsewhere)
    min_stationarity: float
    step_sq_sum: float
    energy: float
    gap_sum: float
    C_N: float
    delta0: float
    lower_bound: float
    pi_min: float
    checks: dict
    long_points: int
    long_point_failures: int
    long_point_worst: float
    theta: np.ndarray
    iterations: int

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())


def _mutations() -> set:
    return {m for m in os.environ.get("RMISO_MUTATION", "").split(",") if m}


class _Check:
    """Running worst-case excess for an inequality ``lhs <= rhs``."""

    def __init__(self):
        self.worst = -math.inf
        self.violations = 0
        self.count = 0

    def add(self, excess: float):
        self.count += 1
        if excess > self.worst:
            self.worst = excess
        if excess > 0:
            self.violations += 1

    def as_dict(self):
        return {"passed": self.violations == 0, "violations": self.violations,
                "worst_excess": self.worst if self.count else 0.0, "count": self.count}


class Solver:
    """State of one MISO/RMISO run.

    Construction performs the initialisation step: one surrogate per index
    anchored at ``theta0`` (so ``gbar_0(theta0) = f(theta0)``).
    """

    def __init__(self, problem, config: SolverConfig, sampler: Sampler, theta0=None):
        self.problem = problem
        self.config = config
        self.sampler = sampler
        if sampler.space.size != problem.n_components:
            raise ConfigurationError("sampler index space does not match the problem")
        self.fset = problem.feasible_set
        theta0 = problem.initial_point(config.seed) if theta0 is None else np.asarray(theta0, float)
        if not self.fset.contains(theta0, 1e-9):
            raise DomainError("initial point is not feasible")
        problem.reset()
        self.theta = np.array(theta0, dtype=float)
        self.log = VisitLog(problem.n_components)
        records = [problem.surrogate(v, self.theta) for v in range(problem.n_components)]
        self.avg = make_average(records, problem.weights)
        self.g_value = self.avg.value(self.theta)
        f0 = problem.value(self.theta)
        if abs(self.g_value - f0) > 1e-9 * (1.0 + abs(f0)):
            raise SolverError(f"initial surrogate not tight: {self.g_value} vs {f0}")
        self.lower_bound = problem.lower_bound if config.lower_bound is None else config.lower_bound
        self.delta0 = self.g_value - self.lower_bound
        self.pi_min = float(np.min(problem.weights))
        self._validate_variant()
        self._t0 = time.perf_counter()
        self.surrogate_values = [self.g_value]
        self.objective_values = [f0]
        self.step_sq_sum = 0.0
        self.energy = 0.0
        self.gap_sum = 0.0
        self.C_N = 0.0
        self.min_stationarity = math.inf
        self.checks = {name: _Check() for name in
                       ("monotone", "intermediate", "majorization", "dr_feasible", "long_point")}
        self.long_points = 0
        self.long_point_failures = 0
        self.long_point_worst = 0.0
        self.last = None
        self._last_radius = math.nan
        self._last_step = math.nan

    # -- setup --------------------------------------------------------------
    def _validate_variant(self):
        cfg = self.config
        if cfg.variant is Variant.MISO and self.avg.convexity() <= 0:
            warnings.warn("MISO with surrogates that are not strongly convex: the argmin "
                          "may not exist", RuntimeWarning, stacklevel=3)
        if cfg.variant is Variant.RMISO_DR:
            radii = [cfg.radius_schedule(n) for n in range(1, 1001)]
            if any(r <= 0 for r in radii) or any(b > a for a, b in zip(radii, radii[1:])):
                raise ConfigurationError("radius schedule must be positive and nonincreasing")

    def rho_for_step(self, staleness: int) -> float:
        v = self.config.variant
        if v is Variant.MISO:
            return 0.0
        if v is Variant.RMISO_DPR:
            return self.config.rho + staleness
        return self.config.rho

    # -- one iteration ------------------------------------------------------
    def step(self) -> IterationRecord:
        cfg, problem, avg = self.config, self.problem, self.avg
        theta_prev = self.theta
        v = next_index(self.sampler, self.log)
        n = self.log.step
        try:
            fresh = problem.surrogate(v, theta_prev)
        except SolverError as exc:
            raise SolverError(f"step {n}, index {v}: {exc}", exc.residual, exc.iterations) from exc
        # h_{n-1}^{v_n}(theta_{n-1}), measured on the stale record before replacement
        self.gap_sum += avg.records[v].value(theta_prev) - fresh.value(theta_prev)
        g_before = self.g_value
        avg.replace(v, fresh)
        g_mid = avg.value(theta_prev)
        staleness = self.log.staleness()
        rho_n = self.rho_for_step(staleness) if cfg.variant is not Variant.RMISO_DR else math.nan
        radius_n = math.nan
        try:
            if cfg.variant is Variant.RMISO_DR:
                radius_n = float(cfg.radius_schedule(n))
                theta = minimize_radius(avg, self.fset, theta_prev, radius_n, cfg.tol)
            else:
                solve_rho = rho_n
                if cfg.variant is Variant.RMISO_DPR and "dpr_rho" in _mutations():
                    solve_rho = 0.0
                theta = minimize_prox(avg, self.fset, theta_prev, solve_rho, cfg.tol)
        except SolverError as exc:
            raise SolverError(f"step {n}, index {v}: {exc}", exc.residual, exc.iterations) from exc
        self.theta = theta
        self._last_radius = radius_n
        g_new = avg.value(theta)
        step_norm = float(np.linalg.norm(theta - theta_prev))
        self._last_step = step_norm
        mu = avg.convexity()
        self.step_sq_sum += step_norm ** 2
        if cfg.variant is not Variant.RMISO_DR:
            self.energy += 0.5 * (rho_n + mu) * step_norm ** 2
        else:
            self.C_N += radius_n ** 2
        # monotonicity, energy and gap sums are always accumulated; the
        # per-step diagnostics below are the optional part
        scale = 1e-9 * (1.0 + abs(g_before))
        self.checks["monotone"].add(g_new - g_before - scale)
        self.checks["intermediate"].add(g_mid - g_before - scale)
        if cfg.variant is Variant.RMISO_DR:
            self.checks["dr_feasible"].add(step_norm - radius_n - 1e-9)
        if cfg.variant is Variant.RMISO_DR and cfg.invariant_checks:
            diag = self.long_point_check()
            if diag["applicable"]:
                self.long_points += 1
                self.long_point_worst = max(self.long_point_worst, diag["residual"])
                self.checks["long_point"].add(diag["residual"] - 1e-5)
                if not diag["passed"]:
                    self.long_point_failures += 1
        self.g_value = g_new
        self.surrogate_values.append(g_new)

        recording = n % cfg.record_every == 0 or n == cfg.max_iters
        objective = stationarity = err = math.nan
        if recording:
            objective = problem.value(theta)
            grad = problem.gradient(theta)
            stationarity = self._stationarity(grad, theta)
            err = float(np.linalg.norm(avg.grad(theta) - grad))
            self.min_stationarity = min(self.min_stationarity, stationarity)
            if cfg.invariant_checks:
                self.checks["majorization"].add(objective - g_new - 1e-9 * (1.0 + abs(objective)))
        self.objective_values.append(objective)
        elapsed = (time.perf_counter() - self._t0) * 1e3 if cfg.timing else 0.0
        rec = IterationRecord(n, elapsed, objective, g_new, stationarity, err,
                              rho_n, radius_n, step_norm, v, staleness)
        self.last = rec
        return rec

    def _stationarity(self, grad, theta) -> float:
        if isinstance(self.fset, (Unconstrained, Box, NonnegOrthant)):
            return stationarity_measure(grad, self.fset, theta)
        return projected_gradient_norm(grad, self.fset, theta)

    def long_point_check(self) -> dict:
        """For a diminishing-radius step strictly inside its ball, check that
        ``theta_n`` is stationary for ``gbar_n`` over the whole feasible set."""
        if self.config.variant is not Variant.RMISO_DR:
            raise ConfigurationError("long point check applies to RMISO_DR only")
        if not self._last_step < self._last_radius - 1e-7:
            return {"applicable": False, "passed": None, "residual": math.nan}
        res = projected_gradient_norm(self.avg.grad(self.theta), self.fset, self.theta)
        return {"applicable": True, "passed": res <= 1e-5, "residual": res}

    # -- driver ---------------------------------------------------------------
    def run(self, N: Optional[int] = None, callback=None) -> RunSummary:
        N = self.config.max_iters if N is None else int(N)
        if N < 1:
            raise ConfigurationError("N must be >= 1")
        records = []
        for _ in range(N):
            rec = self.step()
            if rec.n % self.config.record_every == 0 or rec.n == self.config.max_iters:
                records.append(rec)
                if callback is not None:
                    callback(rec)
        return self.summary(records)

    def bound_checks(self) -> dict:
        """Energy and gap-sum budgets against ``delta0``."""
        out = {}
        if self.config.variant is not Variant.RMISO_DR:
            excess = self.energy - self.delta0 - 1e-6
            out["energy_bound"] = {"passed": excess <= 0, "violations": int(excess > 0),
                                   "worst_excess": excess, "count": 1}
        excess = self.gap_sum - self.delta0 / self.pi_min - 1e-6
        out["gap_bound"] = {"passed": excess <= 0, "violations": int(excess > 0),
                            "worst_excess": excess, "count": 1}
        return out

    def summary(self, records=None) -> RunSummary:
        checks = {k: c.as_dict() for k, c in self.checks.items()}
        checks.update(self.bound_checks())
        return RunSummary(
            records=records or [],
            surrogate_values=np.array(self.surrogate_values),
            objective_values=np.array(self.objective_values),
            min_stationarity=self.min_stationarity,
            step_sq_sum=self.step_sq_sum,
            energy=self.energy,
            gap_sum=self.gap_sum,
            C_N=self.C_N,
            delta0=self.delta0,
            lower_bound=self.lower_bound,
            pi_min=self.pi_min,
            checks=checks,
            long_points=self.long_points,
            long_point_failures=self.long_point_failures,
            long_point_worst=self.long_point_worst,
            theta=self.theta.copy(),
            iterations=self.log.step,
        )

    # -- snapshots ------------------------------------------------------------
    _MAGIC = b"RMSS"

    def snapshot(self) -> bytes:
        """Sampler, visit log, accumulators, ``theta`` and the aggregate in one blob."""
        meta = {
            "version": 1,
            "sampler": self.sampler.state(),
            "log": self.log.state(),
            "g_value": self.g_value,
            "surrogate_values": self.surrogate_values,
            "objective_values": [None if math.isnan(x) else x for x in self.objective_values],
            "acc": [self.step_sq_sum, self.energy, self.gap_sum, self.C_N,
                    self.min_stationarity if math.isfinite(self.min_stationarity) else None],
            "delta0": self.delta0,
            "lower_bound": self.lower_bound,
            "shape": list(self.theta.shape),
            "long": [self.long_points, self.long_point_failures, self.long_point_worst],
            "checks": {k: [c.worst if c.count else None, c.violations, c.count]
                       for k, c in self.checks.items()},
        }
        head = json.dumps(meta).encode()
        out = io.BytesIO()
        out.write(struct.pack("<4sI", self._MAGIC, len(head)))
        out.write(head)
        out.write(np.ascontiguousarray(self.theta, dtype="<f8").tobytes())
        out.write(dumps_snapshot(self.avg))
        return out.getvalue()

    @classmethod
    def restore(cls, blob: bytes, problem, config: SolverConfig, sampler: Sampler) -> "Solver":
        magic, hlen = struct.unpack_from("<4sI", blob, 0)
        if magic != cls._MAGIC:
            raise DomainError("not a solver snapshot")
        meta = json.loads(blob[8:8 + hlen].decode())
        pos = 8 + hlen
        shape = tuple(meta["shape"])
        size = int(np.prod(shape))
        theta = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).astype(float).reshape(shape)
        pos += 8 * size
        self = cls.__new__(cls)
        self.problem, self.config, self.sampler = problem, config, sampler
        self.fset = problem.feasible_set
        self.theta = theta
        self.avg = loads_snapshot(blob[pos:], getattr(problem, "shards", None))
        problem.reset()
        if hasattr(problem, "codes"):
            problem.codes = [rec.H for rec in self.avg.records]
        sampler.restore(meta["sampler"])
        self.log = VisitLog.from_state(meta["log"])
        self.g_value = meta["g_value"]
        self.surrogate_values = list(meta["surrogate_values"])
        self.objective_values = [math.nan if x is None else x for x in meta["objective_values"]]
        acc = meta["acc"]
        self.step_sq_sum, self.energy, self.gap_sum, self.C_N = acc[:4]
        self.min_stationarity = math.inf if acc[4] is None else acc[4]
        self.delta0, self.lower_bound = meta["delta0"], meta["lower_bound"]
        self.pi_min = float(np.min(problem.weights))
        self.long_points, self.long_point_failures, self.long_point_worst = meta["long"]
        self.checks = {}
        for k, (worst, viol, count) in meta["checks"].items():
            c = _Check()
            c.worst = -math.inf if worst is None else worst
            c.violations, c.count = viol, count
            self.checks[k] = c
        self._t0 = time.perf_counter()
        self.last = None
        self._last_radius = math.nan
        self._last_step = math.nan
        return self


# module-level operations mirroring the method API

def init(problem, config: SolverConfig, sampler: Sampler, theta0=None) -> Solver:
    return Solver(problem, config, sampler, theta0)


def step(state: Solver) -> IterationRecord:
    return state.step()


def run(state: Solver, N: Optional[int] = None) -> RunSummary:
    return state.run(N)


def long_point_check(state: Solver) -> dict:
    return state.long_point_check()
