"""Monte-Carlo gap estimators and stability probes.

An *algorithm* is any callable ``algorithm(samples, rng)`` returning a joint
point, or an object with a ``point`` attribute (and optionally
``gradient_evaluations``). Fitted-estimator style objects are adapted with
:func:`as_algorithm`. Every trial gets its own seeds spawned from the
master seed, so reports are replayable from ``(seed, trials)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .core import BestResponseError, Domain, LossSpec, gap_value
from .problems import Dataset, PackingInstance, ProblemSpec, population_best_response, sample_dataset

__all__ = [
    "GapReport",
    "StabilityReport",
    "TrialError",
    "TrialOutputs",
    "as_algorithm",
    "empirical_gap",
    "empirical_gap_mc",
    "gap_at_point",
    "packing_tradeoff",
    "run_trials",
    "separation_check",
    "strong_gap_mc",
    "uas_probe",
    "variance_probe",
    "weak_gap_from_outputs",
    "weak_gap_mc",
]


class TrialError(RuntimeError):
    """An algorithm failed inside a Monte-Carlo trial."""

    def __init__(self, trial: int, cause: BaseException):
        super().__init__(f"trial {trial}: {type(cause).__name__}: {cause}")
        self.trial = trial
        self.cause = cause


@dataclass(frozen=True)
class GapReport:
    mean: float
    std_error: float
    trials: int
    kind: str
    seed: Optional[int]
    gradient_evaluations: float = 0.0
    values: Tuple[float, ...] = field(default=(), repr=False)


@dataclass(frozen=True)
class StabilityReport:
    """Mean distance between outputs on random adjacent datasets.

    Pairs are drawn at random rather than searched adversarially, so a value
    below a claimed stability bound is evidence, not a certificate; a value
    above it is a genuine violation.
    """

    mean_distance: float
    pairs: int
    coupling: str = "shared-seed"
    max_distance: float = 0.0
    distances: Tuple[float, ...] = field(default=(), repr=False)


@dataclass
class TrialOutputs:
    points: np.ndarray
    gradient_evaluations: np.ndarray
    datasets: Optional[List[Dataset]] = None


def as_algorithm(estimator) -> Callable:
    """Adapt an unfitted estimator (``fit`` + ``random_state``) into an algorithm callable."""
    if not hasattr(estimator, "fit"):
        return estimator
    from sklearn.base import clone

    def algorithm(samples, rng):
        est = clone(estimator)
        if "random_state" in est.get_params():
            est.set_params(random_state=int(rng.integers(0, 2**63 - 1)))
        est.fit(np.asarray(getattr(samples, "samples", samples)))
        return est

    return algorithm


def _call(algorithm, samples, rng) -> Tuple[np.ndarray, float]:
    out = algorithm(samples, rng)
    evaluations = float(getattr(out, "gradient_evaluations", getattr(out, "gradient_evaluations_", 0)) or 0)
    point = getattr(out, "point", getattr(out, "point_", out))
    return np.asarray(point, dtype=float).ravel(), evaluations


def _trial_seeds(seed, trials: int):
    return np.random.SeedSequence(seed).spawn(trials)


def run_trials(problem: ProblemSpec, algorithm, n: int, trials: int, seed=None, keep_datasets=False) -> TrialOutputs:
    """Run ``algorithm`` on ``trials`` independent datasets of size ``n``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    algorithm = as_algorithm(algorithm)
    points, evaluations, datasets = [], [], []
    for k, child in enumerate(_trial_seeds(seed, trials)):
        data_seed, algo_seed = child.spawn(2)
        dataset = sample_dataset(problem, n, np.random.default_rng(data_seed))
        try:
            point, evals = _call(algorithm, dataset, np.random.default_rng(algo_seed))
        except Exception as exc:
            raise TrialError(k, exc) from exc
        points.append(point)
        evaluations.append(evals)
        if keep_datasets:
            datasets.append(dataset)
    return TrialOutputs(np.array(points), np.array(evaluations), datasets if keep_datasets else None)


def _report(values, kind, seed, evaluations) -> GapReport:
    values = np.asarray(values, dtype=float)
    trials = values.size
    std_error = float(values.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return GapReport(
        mean=float(values.mean()),
        std_error=std_error,
        trials=trials,
        kind=kind,
        seed=seed,
        gradient_evaluations=float(np.mean(evaluations)) if len(evaluations) else 0.0,
        values=tuple(values.tolist()),
    )


# ---------------------------------------------------------------------------
# gaps


def gap_at_point(problem: ProblemSpec, z, loss: Optional[LossSpec] = None) -> float:
    """``max_theta F_D(w, theta) - min_w F_D(w, theta)`` at ``z = [w, theta]``."""
    return problem.gap(np.asarray(z, dtype=float), loss)


def empirical_gap(dataset, loss: LossSpec, z, domain: Domain) -> float:
    """Gap of ``z`` against the finite-sum objective ``F_S``."""
    X = np.asarray(getattr(dataset, "samples", dataset), dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return gap_value(loss, domain, np.asarray(z, dtype=float), X)


def strong_gap_mc(problem: ProblemSpec, algorithm, n: int, trials: int, seed=None) -> GapReport:
    """Average of the population gap of each trial's output."""
    outputs = run_trials(problem, algorithm, n, trials, seed)
    return strong_gap_from_outputs(problem, outputs, seed)


def strong_gap_from_outputs(problem: ProblemSpec, outputs: TrialOutputs, seed=None) -> GapReport:
    values = [gap_at_point(problem, z) for z in outputs.points]
    return _report(values, "strong", seed, outputs.gradient_evaluations)


def empirical_gap_mc(problem: ProblemSpec, algorithm, n: int, trials: int, seed=None) -> GapReport:
    """Average gap of each output against its own training set."""
    outputs = run_trials(problem, algorithm, n, trials, seed, keep_datasets=True)
    values = [
        empirical_gap(S, problem.loss, z, problem.domain) for S, z in zip(outputs.datasets, outputs.points)
    ]
    return _report(values, "empirical", seed, outputs.gradient_evaluations)


def weak_gap_mc(problem: ProblemSpec, algorithm, n: int, trials: int, seed=None) -> GapReport:
    """Gap of the trial-averaged objective.

    The max side is ``max_theta (1/K) sum_k F_D(w_k, theta)`` and the min side
    ``min_w (1/K) sum_k F_D(w, theta_k)``; the expectation over datasets sits
    inside the optimization, unlike :func:`strong_gap_mc`.
    """
    if trials < 2:
        raise ValueError("weak gap estimation needs at least 2 trials")
    outputs = run_trials(problem, algorithm, n, trials, seed)
    return weak_gap_from_outputs(problem, outputs, seed)


def weak_gap_from_outputs(problem: ProblemSpec, outputs: TrialOutputs, seed=None) -> GapReport:
    points = outputs.points
    upper = _mixture_best_value(problem, points, "dual")
    lower = _mixture_best_value(problem, points, "primal")
    value = upper - lower
    return GapReport(
        mean=float(value),
        std_error=0.0,
        trials=points.shape[0],
        kind="weak",
        seed=seed,
        gradient_evaluations=float(np.mean(outputs.gradient_evaluations)),
        values=(float(value),),
    )


def _mixture_value(problem: ProblemSpec, points: np.ndarray, u: np.ndarray, side: str) -> float:
    """``(1/K) sum_k F_D`` with block ``side`` set to ``u`` and the other block from ``points[k]``."""
    d_w = problem.loss.d_w
    total = 0.0
    for z in points:
        z = z.copy()
        if side == "primal":
            z[:d_w] = u
        else:
            z[d_w:] = u
        total += problem.loss.mean_value(z, problem.population_points, problem.population_weights)
    return total / points.shape[0]


def _mixture_best_value(problem: ProblemSpec, points: np.ndarray, side: str) -> float:
    """Optimal value of the trial-averaged objective over block ``side``.

    With an affine saddle operator the block gradient of the average equals
    the block gradient at the averaged point, so the best response at the
    mean output is optimal for the average. For separable losses the best
    response does not depend on the other block at all. Otherwise the
    averaged objective is optimized by projected gradient steps.
    """
    loss = problem.loss
    anchor = points.mean(axis=0)
    if loss.affine_fn is not None or loss.separable:
        u, _ = population_best_response(problem, anchor, side)
        return _mixture_value(problem, points, u, side)
    return _numeric_mixture_best_value(problem, points, side, anchor)


def _numeric_mixture_best_value(problem, points, side, anchor, tol=1e-9, max_iter=100_000):
    loss, domain = problem.loss, problem.domain
    beta = loss.total_smoothness
    if beta is None or beta <= 0:
        raise BestResponseError("averaged best response needs a smooth loss", float("inf"))
    d_w = loss.d_w
    lo, hi = (0, d_w) if side == "primal" else (d_w, domain.dim)
    cset = domain.primal_set if side == "primal" else domain.dual_set

    def grad(u):
        g = np.zeros(hi - lo)
        for z in points:
            z = z.copy()
            z[lo:hi] = u
            g += loss.mean_operator(z, problem.population_points, problem.population_weights)[lo:hi]
        # the saddle operator already carries the minus sign on the dual block
        return g / points.shape[0]

    step = 1.0 / beta
    u = cset.project(anchor[lo:hi])
    for _ in range(max_iter):
        u_next = cset.project(u - step * grad(u))
        if np.linalg.norm(u_next - u) / step <= tol:
            return _mixture_value(problem, points, u_next, side)
        u = u_next
    raise BestResponseError("averaged best response did not converge", float(np.linalg.norm(u_next - u) / step))


# ---------------------------------------------------------------------------
# stability and variance


def uas_probe(
    algorithm,
    problem: ProblemSpec,
    n: int,
    pairs: int,
    seed=None,
    base_dataset: Optional[Dataset] = None,
    perturb: Optional[Callable[[Dataset, np.random.Generator], Dataset]] = None,
) -> StabilityReport:
    """Distances ``||A(S) - A(S')||`` over random adjacent pairs with shared algorithm seeds.

    ``S`` is drawn fresh per pair unless ``base_dataset`` is given; ``S'``
    replaces one uniformly chosen entry by a fresh draw, or is produced by
    ``perturb`` when supplied.
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    algorithm = as_algorithm(algorithm)
    distances = []
    for child in _trial_seeds(seed, pairs):
        data_seed, swap_seed, algo_seed = child.spawn(3)
        S = base_dataset if base_dataset is not None else sample_dataset(problem, n, np.random.default_rng(data_seed))
        swap_rng = np.random.default_rng(swap_seed)
        if perturb is not None:
            S_prime = perturb(S, swap_rng)
        else:
            index = int(swap_rng.integers(0, S.n))
            S_prime = S.replace_entry(index, problem.sampler(swap_rng, 1)[0])
        z, _ = _call(algorithm, S, np.random.default_rng(algo_seed))
        z_prime, _ = _call(algorithm, S_prime, np.random.default_rng(algo_seed))
        distances.append(float(np.linalg.norm(z - z_prime)))
    distances = np.array(distances)
    return StabilityReport(
        mean_distance=float(distances.mean()),
        pairs=pairs,
        max_distance=float(distances.max()),
        distances=tuple(distances.tolist()),
    )


def variance_probe(algorithm, problem: ProblemSpec, n: int, trials: int, seed=None) -> float:
    """Unbiased estimate of ``E ||A(S) - E A(S)||^2`` from independent datasets."""
    if trials < 2:
        raise ValueError("variance estimation needs at least 2 trials")
    outputs = run_trials(problem, algorithm, n, trials, seed)
    return _output_variance(outputs.points)


def _output_variance(points: np.ndarray) -> float:
    centered = points - points.mean(axis=0)
    return float(np.sum(centered**2) / (points.shape[0] - 1))


def separation_check(problem: ProblemSpec, algorithm, n: int, trials: int, seed=None) -> Tuple[float, float]:
    """``(strong - weak, L * tau)`` from one shared set of trial outputs.

    ``tau`` is the square root of the estimated output variance.
    """
    if trials < 2:
        raise ValueError("separation check needs at least 2 trials")
    outputs = run_trials(problem, algorithm, n, trials, seed)
    strong = strong_gap_from_outputs(problem, outputs, seed).mean
    weak = weak_gap_from_outputs(problem, outputs, seed).mean
    tau = math.sqrt(_output_variance(outputs.points))
    return strong - weak, problem.lipschitz * tau


# ---------------------------------------------------------------------------
# stability against excess risk on the packing construction


def packing_tradeoff(instance: PackingInstance, lam: float) -> Tuple[float, float]:
    """Stability and excess empirical risk of ``lam``-regularized ERM on a packing dataset.

    The regularized problem is ``min_{||w|| <= B} <w, mean(S)> + (lam/2)||w||^2``.
    Stability is the largest output distance over the ``K`` single-sign flips
    (each an adjacent dataset); the excess risk is measured against the exact
    constrained minimizer.
    """
    from .core import regularize
    from .problems import make_problem
    from .solvers import solve_regularized_empirical

    if lam <= 0:
        raise ValueError("lam must be positive")
    problem = make_problem("packing_erm", instance.d, 1, {"instance": instance})
    loss = regularize(problem.loss, lam / 2.0, problem.domain.center)

    def solve(inst):
        return solve_regularized_empirical(inst.dataset, loss, problem.domain, 1e-12).point

    z = solve(instance)
    stability = max(float(np.linalg.norm(z - solve(instance.flip(j)))) for j in range(instance.K))
    w = z[: instance.d]
    xbar = instance.dataset.mean(axis=0)
    excess = float(w @ xbar) - instance.min_value
    return stability, excess
