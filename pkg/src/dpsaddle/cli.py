"""Command-line experiment runner.

``dpsaddle run CONFIG`` executes a YAML experiment and writes ``results.csv``
and ``manifest.json`` to the output directory (overridable with the
``DPSADDLE_OUTPUT_DIR`` environment variable). ``dpsaddle fit CSV --x COL
--y COL`` fits a power law to two CSV columns.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import __version__
from .evaluation import (
    empirical_gap_mc,
    run_trials,
    strong_gap_from_outputs,
    uas_probe,
    variance_probe,
    weak_gap_from_outputs,
)
from .estimators import LocalDPSGDASaddle, NoisySGDASaddle, RecursiveRegularizationSaddle, RegularizedSaddle
from .problems import PROBLEM_KINDS, ProblemSpec, dataset_mean_algorithm, make_problem, mode_algorithm

OUTPUT_DIR_ENV = "DPSADDLE_OUTPUT_DIR"
CSV_COLUMNS = (
    "problem", "algorithm", "n", "d", "epsilon", "delta", "kind", "mean", "std_error", "trials", "seed",
    "gradient_evaluations", "error",
)
ESTIMATE_KINDS = ("strong", "weak", "empirical", "stability", "variance")
ALGORITHM_PARAMS = {
    "mode": set(),
    "dataset_mean": set(),
    "constant": {"point"},
    "regularized_erm": {"lam"},
    "recursive_regularization": {"subroutine", "lam", "lambda_scale"},
    "noisy_sgda": {"batch_rule"},
    "local_dp_sgda": set(),
}
TOP_KEYS = {"problem", "algorithm", "algorithms", "n_grid", "privacy", "trials", "seed", "estimates", "output_dir", "workers"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AlgorithmConfig:
    name: str
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    problem_kind: str
    d_w: int
    d_theta: int
    problem_params: Dict[str, Any]
    algorithms: Tuple[AlgorithmConfig, ...]
    n_grid: Tuple[int, ...]
    epsilon: float
    delta: float
    trials: int
    seed: int
    estimates: Tuple[str, ...] = ("strong",)
    output_dir: str = "results"
    workers: int = 1

    def echo(self) -> dict:
        out = asdict(self)
        out["algorithms"] = [asdict(a) for a in self.algorithms]
        return out


# ---------------------------------------------------------------------------
# config parsing


def _line_map(node, path=(), out=None) -> Dict[tuple, int]:
    """1-based source line of every node in a composed YAML tree, keyed by path."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            out[path + (key.value,)] = key.start_mark.line + 1
            _line_map(value, path + (key.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _line_map(item, path + (i,), out)
    return out


class _Checker:
    def __init__(self, source: str, lines: Dict[tuple, int]):
        self.source = source
        self.lines = lines

    def fail(self, path: tuple, message: str):
        probe = path
        while probe not in self.lines and probe:
            probe = probe[:-1]
        line = self.lines.get(probe, 1)
        where = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{self.source}:{line}: {where}: {message}")

    def mapping(self, value, path, allowed, required=()):
        if not isinstance(value, dict):
            self.fail(path, "expected a mapping")
        for key in value:
            if key not in allowed:
                self.fail(path + (key,), f"unknown key {key!r}; allowed: {sorted(allowed)}")
        for key in required:
            if key not in value:
                self.fail(path, f"missing required key {key!r}")
        return value

    def integer(self, value, path, minimum=None):
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(path, f"expected an integer, got {value!r}")
        if minimum is not None and value < minimum:
            self.fail(path, f"must be >= {minimum}, got {value}")
        return value

    def number(self, value, path, positive=False):
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                self.fail(path, f"expected a number, got {value!r}")
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            self.fail(path, f"expected a finite number, got {value!r}")
        if positive and value <= 0:
            self.fail(path, f"must be positive, got {value}")
        return float(value)


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, source=path)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{source}:{line}: invalid YAML: {exc}") from exc
    if node is None:
        raise ConfigError(f"{source}:1: empty configuration")
    check = _Checker(source, _line_map(node))
    check.mapping(data, (), TOP_KEYS, required=("problem", "n_grid", "trials"))

    prob = check.mapping(data["problem"], ("problem",), {"kind", "d_w", "d_theta", "params"}, required=("kind",))
    kind = prob["kind"]
    if kind not in PROBLEM_KINDS:
        check.fail(("problem", "kind"), f"unknown problem kind {kind!r}; expected one of {PROBLEM_KINDS}")
    d_w = check.integer(prob.get("d_w", 1), ("problem", "d_w"), 1)
    d_theta = check.integer(prob.get("d_theta", 1), ("problem", "d_theta"), 1)
    params = prob.get("params") or {}
    if not isinstance(params, dict):
        check.fail(("problem", "params"), "expected a mapping")
    try:
        make_problem(kind, d_w, d_theta, params)
    except (ValueError, TypeError) as exc:
        check.fail(("problem",), f"cannot build problem: {exc}")

    if ("algorithm" in data) == ("algorithms" in data):
        check.fail((), "exactly one of 'algorithm' or 'algorithms' is required")
    if "algorithm" in data:
        raw_algs, base = [data["algorithm"]], ("algorithm",)
    else:
        raw_algs, base = data["algorithms"], ("algorithms",)
        if not isinstance(raw_algs, list) or not raw_algs:
            check.fail(base, "expected a non-empty list")
    algorithms = []
    for i, raw in enumerate(raw_algs):
        path = base + (i,) if base == ("algorithms",) else base
        check.mapping(raw, path, {"name", "params"}, required=("name",))
        name = raw["name"]
        if name not in ALGORITHM_PARAMS:
            check.fail(path + ("name",), f"unknown algorithm {name!r}; expected one of {sorted(ALGORITHM_PARAMS)}")
        alg_params = check.mapping(raw.get("params") or {}, path + ("params",), ALGORITHM_PARAMS[name])
        if "lam" in alg_params and alg_params["lam"] != "auto":
            check.number(alg_params["lam"], path + ("params", "lam"), positive=True)
        if "lambda_scale" in alg_params:
            check.number(alg_params["lambda_scale"], path + ("params", "lambda_scale"), positive=True)
        if "subroutine" in alg_params and alg_params["subroutine"] not in ("exact", "noisy_sgda", "smooth"):
            check.fail(path + ("params", "subroutine"), f"unknown subroutine {alg_params['subroutine']!r}")
        algorithms.append(AlgorithmConfig(name, dict(alg_params)))

    grid = data["n_grid"]
    if not isinstance(grid, list) or not grid:
        check.fail(("n_grid",), "expected a non-empty list of dataset sizes")
    n_grid = tuple(check.integer(v, ("n_grid", i), 1) for i, v in enumerate(grid))

    privacy = check.mapping(data.get("privacy") or {}, ("privacy",), {"epsilon", "delta"})
    epsilon = check.number(privacy.get("epsilon", 1.0), ("privacy", "epsilon"), positive=True)
    delta = check.number(privacy.get("delta", 1e-5), ("privacy", "delta"), positive=True)
    if delta >= 1:
        check.fail(("privacy", "delta"), "must be < 1")

    trials = check.integer(data["trials"], ("trials",), 1)
    seed = check.integer(data.get("seed", 0), ("seed",), 0)
    estimates = data.get("estimates", ["strong"])
    if not isinstance(estimates, list) or not estimates:
        check.fail(("estimates",), "expected a non-empty list")
    for i, e in enumerate(estimates):
        if e not in ESTIMATE_KINDS:
            check.fail(("estimates", i), f"unknown estimate {e!r}; expected one of {ESTIMATE_KINDS}")
        if e in ("weak", "variance") and trials < 2:
            check.fail(("trials",), f"estimate {e!r} needs trials >= 2")
    output_dir = data.get("output_dir", "results")
    if not isinstance(output_dir, str):
        check.fail(("output_dir",), "expected a path string")
    workers = check.integer(data.get("workers", 1), ("workers",), 1)
    return ExperimentConfig(
        problem_kind=kind,
        d_w=d_w,
        d_theta=d_theta,
        problem_params=dict(params),
        algorithms=tuple(algorithms),
        n_grid=n_grid,
        epsilon=epsilon,
        delta=delta,
        trials=trials,
        seed=seed,
        estimates=tuple(estimates),
        output_dir=output_dir,
        workers=workers,
    )


# ---------------------------------------------------------------------------
# running


def build_algorithm(config: AlgorithmConfig, problem: ProblemSpec, epsilon: float, delta: float):
    """Algorithm callable or unfitted estimator named by ``config``."""
    params = config.params
    if config.name == "mode":
        return mode_algorithm
    if config.name == "dataset_mean":
        return dataset_mean_algorithm(problem.domain)
    if config.name == "constant":
        point = params.get("point")
        point = problem.population_saddle if point is None else np.asarray(point, dtype=float)
        if point is None or point.shape != (problem.dim,):
            raise ValueError("constant algorithm needs a point of the joint dimension")
        return lambda samples, rng: point
    if config.name == "regularized_erm":
        return RegularizedSaddle(problem, lam=float(params.get("lam", 1.0)))
    if config.name == "recursive_regularization":
        lam = params.get("lam", "auto")
        return RecursiveRegularizationSaddle(
            problem,
            subroutine=params.get("subroutine", "exact"),
            lam=lam if lam == "auto" else float(lam),
            lambda_scale=float(params.get("lambda_scale", 48.0)),
            epsilon=epsilon,
            delta=delta,
        )
    if config.name == "noisy_sgda":
        return NoisySGDASaddle(problem, epsilon=epsilon, delta=delta, batch_rule=params.get("batch_rule", "accountant"))
    if config.name == "local_dp_sgda":
        return LocalDPSGDASaddle(problem, epsilon=epsilon, delta=delta)
    raise ValueError(f"unknown algorithm {config.name!r}")


def algorithm_labels(algorithms: Sequence[AlgorithmConfig]) -> List[str]:
    """CSV labels: the name, plus the subroutine when given, plus ``#index`` if still ambiguous."""
    labels = [a.name + (f":{a.params['subroutine']}" if "subroutine" in a.params else "") for a in algorithms]
    return [f"{lab}#{i}" if labels.count(lab) > 1 else lab for i, lab in enumerate(labels)]


def cell_seed(master: int, alg_index: int, n: int) -> int:
    return int(np.random.SeedSequence([master, alg_index, n]).generate_state(1, dtype=np.uint32)[0])


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_cell(config: ExperimentConfig, alg_index: int, n: int) -> List[Dict[str, Any]]:
    """All requested estimates for one (algorithm, n) cell; failures become error rows."""
    alg = config.algorithms[alg_index]
    seed = cell_seed(config.seed, alg_index, n)
    base = {
        "problem": config.problem_kind,
        "algorithm": algorithm_labels(config.algorithms)[alg_index],
        "n": n,
        "epsilon": config.epsilon,
        "delta": config.delta,
        "trials": config.trials,
        "seed": seed,
    }
    rows = []
    try:
        problem = make_problem(config.problem_kind, config.d_w, config.d_theta, config.problem_params)
        base["d"] = problem.dim
        algorithm = build_algorithm(alg, problem, config.epsilon, config.delta)
    except Exception as exc:
        base["d"] = config.d_w + config.d_theta
        return [dict(base, kind=k, mean="", std_error="", gradient_evaluations="", error=_error(exc))
                for k in config.estimates]

    outputs = None
    for kind in config.estimates:
        row = dict(base, kind=kind, error="")
        try:
            if kind in ("strong", "weak"):
                if outputs is None:
                    outputs = run_trials(problem, algorithm, n, config.trials, seed)
                report = (strong_gap_from_outputs if kind == "strong" else weak_gap_from_outputs)(
                    problem, outputs, seed
                )
                row.update(mean=report.mean, std_error=report.std_error, gradient_evaluations=report.gradient_evaluations)
            elif kind == "empirical":
                report = empirical_gap_mc(problem, algorithm, n, config.trials, seed)
                row.update(mean=report.mean, std_error=report.std_error, gradient_evaluations=report.gradient_evaluations)
            elif kind == "stability":
                report = uas_probe(algorithm, problem, n, config.trials, seed)
                d = np.array(report.distances)
                se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
                row.update(mean=report.mean_distance, std_error=se, gradient_evaluations="")
            else:
                row.update(mean=variance_probe(algorithm, problem, n, config.trials, seed), std_error="",
                           gradient_evaluations="")
        except Exception as exc:
            row.update(mean="", std_error="", gradient_evaluations="", error=_error(exc))
        rows.append(row)
    return rows


def _error(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}".replace("\n", " ")


def _sort_key(row):
    return (row["algorithm"], int(row["n"]), ESTIMATE_KINDS.index(row["kind"]))


def run_experiment(config: ExperimentConfig, output_dir: Optional[str] = None) -> Tuple[str, List[dict]]:
    """Run every cell and write ``results.csv`` and ``manifest.json``; returns the CSV path and rows."""
    output_dir = output_dir or os.environ.get(OUTPUT_DIR_ENV) or config.output_dir
    os.makedirs(output_dir, exist_ok=True)
    cells = [(a, n) for a in range(len(config.algorithms)) for n in config.n_grid]
    if config.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run_cell, [config] * len(cells), *zip(*cells)))
    else:
        results = [run_cell(config, a, n) for a, n in cells]
    rows = sorted((row for cell in results for row in cell), key=_sort_key)

    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in CSV_COLUMNS})
    csv_path = os.path.join(output_dir, "results.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buffer.getvalue())
    manifest = {
        "version": __version__,
        "config": config.echo(),
        "cells": len(cells),
        "rows": len(rows),
        "errors": sum(1 for r in rows if r["error"]),
        "created": datetime.now(timezone.utc).isoformat(),
    }
    with open(os.path.join(output_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return csv_path, rows


# ---------------------------------------------------------------------------
# rate fitting


def fit_rate(csv_path: str, x: str, y: str, where: Optional[Dict[str, str]] = None) -> Tuple[float, float, float]:
    """Least-squares fit of ``log y = slope * log x + intercept``; returns ``(slope, intercept, r2)``."""
    with open(csv_path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in (x, y, *(where or {})) if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"columns not in CSV: {missing}")
        rows = [r for r in reader if all(r[k] == v for k, v in (where or {}).items())]
    xs, ys = [], []
    for r in rows:
        if r.get("error"):
            continue
        try:
            xv, yv = float(r[x]), float(r[y])
        except ValueError as exc:
            raise ValueError(f"non-numeric value in row {r}") from exc
        if xv <= 0 or yv <= 0:
            raise ValueError(f"log-log fit needs positive values, got {x}={xv}, {y}={yv}")
        xs.append(xv)
        ys.append(yv)
    return fit_power_law(xs, ys)


def fit_power_law(xs: Sequence[float], ys: Sequence[float]) -> Tuple[float, float, float]:
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if xs.size < 3:
        raise ValueError(f"need at least 3 rows, got {xs.size}")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("log-log fit needs positive values")
    lx, ly = np.log(xs), np.log(ys)
    design = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - design @ np.array([slope, intercept])
    total = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - float(resid @ resid) / total if total > 0 else 1.0
    return float(slope), float(intercept), r2


# ---------------------------------------------------------------------------
# entry point


def _parse_where(items) -> Dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--where expects COLUMN=VALUE, got {item!r}")
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpsaddle", description="Private saddle-point experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--output-dir", default=None, help=f"overrides the config and ${OUTPUT_DIR_ENV}")
    fit = sub.add_parser("fit", help="log-log rate fit of two CSV columns")
    fit.add_argument("csv")
    fit.add_argument("--x", required=True)
    fit.add_argument("--y", required=True)
    fit.add_argument("--where", action="append", metavar="COL=VALUE", help="row filter, repeatable")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        try:
            config = load_config(args.config)
        except (ConfigError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        csv_path, rows = run_experiment(config, args.output_dir)
        errors = [r for r in rows if r["error"]]
        print(f"wrote {len(rows)} rows to {csv_path}")
        for r in errors:
            print(f"cell {r['algorithm']} n={r['n']} {r['kind']}: {r['error']}", file=sys.stderr)
        return 1 if errors else 0
    try:
        slope, intercept, r2 = fit_rate(args.csv, args.x, args.y, _parse_where(args.where))
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"slope": slope, "intercept": intercept, "r2": r2}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
