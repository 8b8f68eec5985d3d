"""Command line front end: ``rmiso run``, ``rmiso estimate`` and ``rmiso check``.

Run configurations are INI-style text (``key = value`` lines grouped under
``[section]`` headers); see the README for the grammar and every key.
"""
from __future__ import annotations

import argparse
import configparser
import io
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence


from .checks import CHECK_NAMES, run_checks
from .datasets import images_to_shards, read_dense_csv, read_idx, read_svmlight
from .exceptions import ConfigurationError, EstimationError, RmisoError
from .problems import (LogRegProblem, NmfProblem, desk_logreg, shard_by_label,
                       synthetic_nmf, synthetic_quadratic)
from .sampling import (IID, Cyclic, IndexSpace, RandomWalk, RecurrenceEstimates, Reshuffle,
                       Sampler, complete_graph, cycle_graph, estimate_recurrence,
                       load_edge_list, lonely_graph)
from .solver import CSV_HEADER, Solver, SolverConfig, Variant

__all__ = ["RunConfig", "parse_config", "load_config", "build_problem", "build_sampler",
           "cmd_run", "cmd_estimate", "cmd_check", "main", "SUMMARY_HEADER"]

# section -> key -> default (as text); the order here is the serialisation order
DEFAULTS = {
    "problem": {"kind": "quadratic", "components": "20", "dim": "10", "seed": "0",
                "surrogate_scale": "2.0"},
    "sampler": {"kind": "cyclic", "graph": "cycle"},
    "solver": {"variant": "RMISO_CPR", "rho": "1.0", "iters": "1000", "record_every": "1",
               "invariant_checks": "true"},
    "run": {"seeds": "0", "timing": "false"},
    "output": {"dir": "rmiso-out"},
}

PROBLEM_KEYS = {
    "quadratic": ("components", "dim", "seed", "surrogate_scale"),
    "nmf": ("shards", "p", "d", "rank", "classes", "noise", "alpha", "seed", "data", "header",
            "images", "labels", "batch"),
    "logistic": ("rows", "features", "batch", "seed", "data", "L", "reg"),
}
FILE_KEYS = ("data", "images", "labels")
SAMPLER_KINDS = ("cyclic", "iid", "random_walk", "reshuffle")
GRAPHS = ("cycle", "complete", "lonely")


def _as_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def _as_int(text: str, key: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: expected an integer, got {text!r}") from exc


def _as_float(text: str, key: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: expected a number, got {text!r}") from exc


def _list(text: str) -> list:
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


@dataclass
class RunConfig:
    """Validated run configuration; ``sections`` keeps the normalised text values."""

    sections: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def get(self, section: str, key: str, default: Optional[str] = None) -> Optional[str]:
        return self.sections.get(section, {}).get(key, default)

    @property
    def seeds(self) -> list:
        return [_as_int(s, "run.seeds") for s in _list(self.get("run", "seeds", "0"))]

    @property
    def timing(self) -> bool:
        return _as_bool(self.get("run", "timing", "false"))

    @property
    def out_dir(self) -> Path:
        return self._path(self.get("output", "dir", "rmiso-out"))

    def _path(self, text: str) -> Path:
        p = Path(text)
        return p if p.is_absolute() else self.base_dir / p

    def files(self, key: str) -> list:
        return [self._path(t) for t in _list(self.get("problem", key, ""))]

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for name in DEFAULTS:
            if name in self.sections:
                parser[name] = self.sections[name]
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def parse_config(text: str, base_dir=".", overrides: Optional[dict] = None) -> RunConfig:
    """Parse and validate configuration text.

    Missing keys take their defaults, values are normalised (so that
    ``parse_config(cfg.to_text())`` reproduces ``cfg``) and referenced data
    files must exist.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - set(DEFAULTS)
    if unknown:
        raise ConfigurationError(f"unknown section(s): {sorted(unknown)}")
    sections = {name: dict(defaults) for name, defaults in DEFAULTS.items()}
    for name in parser.sections():
        sections[name].update({k: v.strip() for k, v in parser[name].items()})
    for (sec, key), value in (overrides or {}).items():
        sections[sec][key] = value
    cfg = RunConfig(sections, Path(base_dir))
    _normalise(cfg)
    return cfg


def _normalise(cfg: RunConfig) -> None:
    prob = cfg.sections["problem"]
    kind = prob["kind"]
    if kind not in PROBLEM_KEYS:
        raise ConfigurationError(f"problem.kind must be one of {sorted(PROBLEM_KEYS)}")
    if kind != "quadratic":
        # drop the quadratic defaults that do not apply
        for key in ("components", "dim", "surrogate_scale"):
            if key not in PROBLEM_KEYS[kind]:
                prob.pop(key, None)
    extra = set(prob) - set(PROBLEM_KEYS[kind]) - {"kind"}
    if extra:
        raise ConfigurationError(f"keys {sorted(extra)} do not apply to problem.kind={kind}")
    for key in FILE_KEYS:
        if key in prob:
            paths = cfg.files(key)
            if not paths:
                raise ConfigurationError(f"problem.{key} is empty")
            for p in paths:
                if not p.exists():
                    raise ConfigurationError(f"problem.{key}: file not found: {p}")
            prob[key] = ", ".join(_list(prob[key]))

    smp = cfg.sections["sampler"]
    if smp["kind"] not in SAMPLER_KINDS:
        raise ConfigurationError(f"sampler.kind must be one of {SAMPLER_KINDS}")
    if smp["graph"] not in GRAPHS and not cfg._path(smp["graph"]).exists():
        raise ConfigurationError(f"sampler.graph: {smp['graph']!r} is neither "
                                 f"{'/'.join(GRAPHS)} nor an existing edge-list file")

    sol = cfg.sections["solver"]
    try:
        sol["variant"] = Variant(sol["variant"].upper()).value
    except ValueError as exc:
        raise ConfigurationError(f"solver.variant must be one of "
                                 f"{[v.value for v in Variant]}") from exc
    if sol["rho"] != "auto":
        rho = _as_float(sol["rho"], "solver.rho")
        if rho < 0:
            raise ConfigurationError("solver.rho must be nonnegative")
        sol["rho"] = repr(rho)
    for key in ("iters", "record_every"):
        if _as_int(sol[key], f"solver.{key}") < 1:
            raise ConfigurationError(f"solver.{key} must be >= 1")
    sol["invariant_checks"] = str(_as_bool(sol["invariant_checks"])).lower()

    run = cfg.sections["run"]
    seeds = cfg.seeds
    if not seeds:
        raise ConfigurationError("run.seeds must list at least one seed")
    if any(s < 0 for s in seeds):
        raise ConfigurationError("seeds must be nonnegative")
    run["seeds"] = ", ".join(str(s) for s in seeds)
    run["timing"] = str(_as_bool(run["timing"])).lower()


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent, overrides)


# ---------------------------------------------------------------------------
# builders

def build_problem(cfg: RunConfig):
    prob = cfg.sections["problem"]
    kind = prob["kind"]
    g = lambda key, default: prob.get(key, default)  # noqa: E731
    seed = _as_int(g("seed", "0"), "problem.seed")
    if kind == "quadratic":
        return synthetic_quadratic(_as_int(g("components", "20"), "problem.components"),
                                   _as_int(g("dim", "10"), "problem.dim"), seed=seed,
                                   surrogate_scale=_as_float(g("surrogate_scale", "2.0"),
                                                             "problem.surrogate_scale"))
    if kind == "nmf":
        rank = _as_int(g("rank", "3"), "problem.rank")
        alpha = _as_float(g("alpha", repr(1.0 / 28)), "problem.alpha")
        if "data" in prob:
            header = _as_bool(g("header", "false"))
            shards = [read_dense_csv(p, header) for p in cfg.files("data")]
        elif "images" in prob:
            if "labels" not in prob:
                raise ConfigurationError("problem.images needs problem.labels")
            images = read_idx(cfg.files("images")[0])
            labels = read_idx(cfg.files("labels")[0])
            shards, _ = images_to_shards(images, labels, _as_int(g("batch", "100"), "batch"))
        else:
            shards, _ = synthetic_nmf(_as_int(g("shards", "12"), "problem.shards"),
                                      _as_int(g("p", "12"), "problem.p"),
                                      _as_int(g("d", "20"), "problem.d"), rank,
                                      _as_int(g("classes", "4"), "problem.classes"),
                                      _as_float(g("noise", "0.05"), "problem.noise"), seed)
        return NmfProblem(shards, rank, alpha)
    # logistic
    L = None if "L" not in prob else _as_float(prob["L"], "problem.L")
    batch = _as_int(g("batch", "100"), "problem.batch")
    if "data" in prob:
        X, y = read_svmlight(cfg.files("data")[0])
        reg = _as_float(g("reg", "0.01"), "problem.reg")
        return LogRegProblem(X, y, shard_by_label(y, batch), reg_coeff=reg, L=L,
                             heterogeneous=True)
    return desk_logreg(_as_int(g("rows", "2000"), "problem.rows"),
                       _as_int(g("features", "60"), "problem.features"), batch, seed, L=L)


def _graph(cfg: RunConfig, n: int):
    name = cfg.get("sampler", "graph", "cycle")
    if name == "cycle":
        return cycle_graph(n)
    if name == "complete":
        return complete_graph(n)
    if name == "lonely":
        return lonely_graph(n)
    return load_edge_list(cfg._path(name), n)


def sampler_kind(kind: str, graph):
    if kind == "cyclic":
        return Cyclic()
    if kind == "iid":
        return IID()
    if kind == "reshuffle":
        return Reshuffle()
    if kind == "random_walk":
        if not graph.is_connected():
            raise ConfigurationError("random walk needs a connected graph")
        return RandomWalk(graph)
    raise ConfigurationError(f"unknown sampler kind {kind!r}")


def build_sampler(cfg: RunConfig, problem, seed: int) -> Sampler:
    n = problem.n_components
    graph = _graph(cfg, n)
    space = IndexSpace(n, problem.weights, graph)
    return Sampler(sampler_kind(cfg.get("sampler", "kind"), graph), space, seed)


def auto_rho(cfg: RunConfig, problem) -> float:
    """``rho = L * t_target`` with ``t_target`` from the recurrence estimator."""
    n = problem.n_components
    graph = _graph(cfg, n)
    space = IndexSpace(n, problem.weights, graph)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        est = estimate_recurrence(sampler_kind(cfg.get("sampler", "kind"), graph), space,
                                  replicas=1000, seed=0)
    return problem.smoothness() * est.t_target


# ---------------------------------------------------------------------------
# run

SUMMARY_HEADER = ("seed,iterations,final_objective,final_surrogate,min_stationarity,"
                  "step_sq_sum,energy,gap_sum,delta0,lower_bound,pi_min,C_N,rho,"
                  "long_points,long_point_failures,checks_passed,failed_checks")


def _fmt(x) -> str:
    return format(float(x), ".17g")


def run_seed(cfg: RunConfig, seed: int, out_dir: Path) -> str:
    """Run one seed, write ``seed_<n>.csv`` and return its summary row."""
    problem = build_problem(cfg)
    sol = cfg.sections["solver"]
    rho = auto_rho(cfg, problem) if sol["rho"] == "auto" else float(sol["rho"])
    config = SolverConfig(Variant(sol["variant"]), rho=rho, max_iters=int(sol["iters"]),
                          seed=seed, record_every=int(sol["record_every"]),
                          invariant_checks=_as_bool(sol["invariant_checks"]),
                          timing=cfg.timing)
    solver = Solver(problem, config, build_sampler(cfg, problem, seed))
    path = out_dir / f"seed_{seed}.csv"
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        summary = solver.run(callback=lambda rec: fh.write(rec.csv_row() + "\n"))
    last = summary.records[-1]
    failed = [k for k, c in summary.checks.items() if not c["passed"]]
    passed = "skipped" if not config.invariant_checks else str(not failed).lower()
    vals = [last.objective, last.surrogate_value, summary.min_stationarity,
            summary.step_sq_sum, summary.energy, summary.gap_sum, summary.delta0,
            summary.lower_bound, summary.pi_min, summary.C_N, rho]
    return ",".join([str(seed), str(summary.iterations), *map(_fmt, vals),
                     str(summary.long_points), str(summary.long_point_failures), passed,
                     ";".join(failed)])


def _workers(n_jobs: int) -> int:
    cap = os.environ.get("RMISO_THREADS")
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError as exc:
            raise ConfigurationError(f"RMISO_THREADS must be an integer, got {cap!r}") from exc
    return max(1, min(limit, n_jobs))


def cmd_run(cfg: RunConfig, err=None) -> int:
    """Run every seed; exit 0 on success, 1 on failed invariants, 2 on errors."""
    err = err or sys.stderr
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg.seeds
    workers = _workers(len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_seed, [cfg] * len(seeds), seeds, [out] * len(seeds)))
    else:
        rows = [run_seed(cfg, s, out) for s in seeds]
    with open(out / "summary.csv", "w") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        for row in rows:
            fh.write(row + "\n")
    bad = [r.split(",", 1)[0] for r in rows if r.split(",")[-2] == "false"]
    if bad:
        print(f"invariant checks failed for seed(s) {', '.join(bad)}; see {out / 'summary.csv'}",
              file=err)
        return 1
    return 0


# ---------------------------------------------------------------------------
# estimate

def cmd_estimate(kind: str, size: int, graph: str = "cycle", replicas: int = 1000,
                 horizon: int = 0, seed: int = 0, method: str = "auto", header: bool = False,
                 out=None, err=None) -> int:
    out, err = out or sys.stdout, err or sys.stderr
    if size < 1:
        raise ConfigurationError("size must be >= 1")
    if graph in GRAPHS:
        g = {"cycle": cycle_graph, "complete": complete_graph, "lonely": lonely_graph}[graph](size)
    else:
        g = load_edge_list(graph, size)
    space = IndexSpace.uniform(size, g)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            est = estimate_recurrence(sampler_kind(kind, g), space, replicas=replicas,
                                      horizon=horizon, seed=seed, method=method)
    except EstimationError as exc:
        print(f"error: {exc}", file=err)
        if exc.estimate is not None:
            print(f"partial estimate: {exc.estimate.csv_row()}", file=err)
        return 2
    if est.method == "analytic":
        est.replicas = 0
    if header:
        print(RecurrenceEstimates.CSV_HEADER, file=out)
    print(est.csv_row(), file=out)
    return 0


# ---------------------------------------------------------------------------
# check

def cmd_check(only: Optional[Sequence[str]] = None, seeds: Optional[Sequence[int]] = None,
              out=None) -> int:
    out = out or sys.stdout
    results = run_checks(only=only, seeds=seeds or tuple(range(10)),
                         report=lambda line: print(line, file=out, flush=True))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failing criteria: {', '.join(failed)}", file=out)
        return 1
    print(f"all {len(results)} criteria passed", file=out)
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _rho_arg(text: str) -> str:
    if text == "auto":
        return text
    try:
        value = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected 'auto' or a number") from exc
    if value < 0:
        raise argparse.ArgumentTypeError("rho must be nonnegative")
    return repr(value)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmiso", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the solver for each seed and write CSV metrics")
    run.add_argument("--config", required=True, help="run configuration file")
    run.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
    run.add_argument("--out", help="output directory")
    run.add_argument("--rho", type=_rho_arg, help="'auto' or a nonnegative number")

    est = sub.add_parser("estimate", help="estimate recurrence constants of a sampler")
    est.add_argument("--config", help="take sampler kind/graph from this config")
    est.add_argument("--sampler", choices=SAMPLER_KINDS)
    est.add_argument("--size", type=int, help="number of indices |V|")
    est.add_argument("--graph", help="cycle, complete, lonely or an edge-list file")
    est.add_argument("--replicas", type=int, default=1000)
    est.add_argument("--horizon", type=int, default=0, help="0 means 50|V|")
    est.add_argument("--seed", type=int, action="append")
    est.add_argument("--method", choices=("auto", "analytic", "monte_carlo"), default="auto")
    est.add_argument("--header", action="store_true", help="print the CSV header first")

    chk = sub.add_parser("check", help="run the acceptance criteria")
    chk.add_argument("--config", help="take seeds from this config")
    chk.add_argument("--only", action="append", choices=CHECK_NAMES,
                     help="run only this criterion (repeatable)")
    chk.add_argument("--seed", type=int, action="append")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "run":
            overrides = {}
            if args.seed:
                overrides[("run", "seeds")] = ", ".join(map(str, args.seed))
            if args.out:
                overrides[("output", "dir")] = str(Path(args.out).resolve())
            if args.rho:
                overrides[("solver", "rho")] = args.rho
            return cmd_run(load_config(args.config, overrides))
        if args.command == "estimate":
            kind, graph, size = args.sampler, args.graph, args.size
            if args.config:
                cfg = load_config(args.config)
                kind = kind or cfg.get("sampler", "kind")
                graph = graph or cfg.get("sampler", "graph")
                if size is None:
                    size = build_problem(cfg).n_components
            if kind is None or size is None:
                raise ConfigurationError("estimate needs --sampler and --size (or --config)")
            seed = args.seed[0] if args.seed else 0
            return cmd_estimate(kind, size, graph or "cycle", args.replicas, args.horizon,
                                seed, args.method, args.header)
        seeds = args.seed
        if args.config and not seeds:
            seeds = load_config(args.config).seeds
        return cmd_check(args.only, seeds)
    except RmisoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
