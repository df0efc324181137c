"""Saddle-point solvers: (noisy) SGDA, exact regularized solves, recursive regularization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .core import Domain, LossSpec, gap_value, regularize
from .privacy import (
    BudgetLike,
    PrivacyBudget,
    PrivacyPreconditionError,
    SgdaPrivacyPlan,
    calibrate_noisy_sgda,
    gaussian_noise,
    output_perturbation_sigma,
)

__all__ = [
    "EFFECTIVE_LIPSCHITZ_FACTOR",
    "ExactSubroutine",
    "NoisySGDASubroutine",
    "PhaseContext",
    "RecursionResult",
    "RecursionSchedule",
    "SaddleSolverError",
    "SmoothPhaseSubroutine",
    "SubroutineResult",
    "find_saddle",
    "local_dp_sgda",
    "make_schedule",
    "noisy_sgda",
    "noisy_sgda_alpha",
    "per_phase_size",
    "phase_count",
    "recursive_regularization",
    "sgda",
    "smooth_phase_subroutine",
    "smooth_theory_lambda",
    "solve_regularized_empirical",
    "theory_lambda",
]

# Lipschitz bound of every phase objective of recursive regularization, in
# units of the base loss's constant.
EFFECTIVE_LIPSCHITZ_FACTOR = 5.0


class SaddleSolverError(RuntimeError):
    def __init__(self, message: str, certificate: float):
        super().__init__(f"{message} (last squared-distance certificate {certificate:.3e})")
        self.certificate = certificate


@dataclass
class SubroutineResult:
    point: np.ndarray
    gradient_evaluations: int
    noise_injected: bool = False
    details: dict = field(default_factory=dict)


def _as_samples(dataset) -> np.ndarray:
    X = np.asarray(getattr(dataset, "samples", dataset), dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# SGDA family


def sgda(
    oracle: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    z0,
    T: int,
    eta: float,
    domain: Domain,
    noise_sigma: float = 0.0,
    rng=None,
) -> np.ndarray:
    """Projected stochastic gradient descent-ascent; returns the average iterate.

    ``oracle(z, rng)`` must return an unbiased estimate of the saddle
    operator at ``z``. When ``noise_sigma > 0`` an independent
    ``N(0, noise_sigma^2 I)`` vector is added to every estimate. The output
    averages ``z_0, ..., z_{T-1}``; the oracle is queried ``T`` times.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if eta <= 0:
        raise ValueError("eta must be positive")
    rng = _rng(rng)
    z = domain.project(np.asarray(z0, dtype=float))
    total = np.zeros_like(z)
    for _ in range(T):
        total += z
        estimate = oracle(z, rng)
        if noise_sigma > 0:
            estimate = estimate + gaussian_noise(rng, z.shape[0], noise_sigma)
        z = domain.project(z - eta * estimate)
    return total / T


def noisy_sgda(
    dataset, loss: LossSpec, plan: SgdaPrivacyPlan, z0, domain: Domain, seed=None, require_private: bool = True
) -> SubroutineResult:
    """Noisy minibatch SGDA on the empirical objective of ``dataset``.

    Minibatches of ``plan.m`` indices are drawn uniformly with replacement;
    a batch size equal to ``n`` means the full dataset. Refuses to run when
    the plan's accountant preconditions fail, unless ``require_private`` is
    switched off (useful for non-private baselines and reductions).
    """
    X = _as_samples(dataset)
    n = X.shape[0]
    if n != plan.n:
        raise PrivacyPreconditionError(f"plan calibrated for n={plan.n}, dataset has n={n}")
    ok, reasons = plan.check_preconditions()
    if require_private and not ok:
        raise PrivacyPreconditionError("refusing to run noisy SGDA: " + "; ".join(reasons))
    rng = _rng(seed)

    if plan.m >= n:
        def oracle(z, _rng):
            return loss.mean_operator(z, X)
    else:
        def oracle(z, gen):
            return loss.mean_operator(z, X[gen.integers(0, n, size=plan.m)])

    point = sgda(oracle, z0, plan.T, plan.eta, domain, plan.sigma, rng)
    return SubroutineResult(point, plan.T * plan.m, noise_injected=plan.sigma > 0, details={"private": ok})


def local_dp_sgda(
    samples, loss: LossSpec, budget: BudgetLike, domain: Domain, z0=None, seed=None, n: Optional[int] = None
) -> SubroutineResult:
    """One-pass SGDA with per-sample Gaussian noise (local model).

    Every sample is used once, in a random order; each operator evaluation
    is privatized with noise of scale ``L sqrt(log(1/delta)) / eps`` before
    use, and the step size is ``B / (sqrt(n d log(1/delta)) L eps)``.
    """
    X = _as_samples(samples)
    n = X.shape[0] if n is None else n
    if X.shape[0] < n:
        raise ValueError(f"stream holds {X.shape[0]} samples, need {n}")
    budget = PrivacyBudget.coerce(budget).require_positive()
    eps, delta = budget.epsilon, budget.delta
    L, B, d = loss.lipschitz, domain.diameter, domain.dim
    log_term = math.log(1.0 / delta)
    sigma = L * math.sqrt(log_term) / eps
    eta = B / (math.sqrt(n * d * log_term) * L * eps)
    rng = _rng(seed)
    order = rng.permutation(n)
    stream = iter(order)

    def oracle(z, _gen):
        i = next(stream)
        return loss.saddle_op(z, X[i : i + 1])[0]

    z0 = domain.center if z0 is None else z0
    point = sgda(oracle, z0, n, eta, domain, sigma, rng)
    return SubroutineResult(point, n, noise_injected=sigma > 0)


# ---------------------------------------------------------------------------
# Exact solves of strongly-monotone problems


def find_saddle(
    loss: LossSpec,
    domain: Domain,
    X,
    weights=None,
    distance_tolerance: float = 1e-10,
    max_iter: int = 200_000,
    z0=None,
    check_every: int = 25,
) -> SubroutineResult:
    """Saddle point of ``sum_i p_i f(.; x_i)`` for an SC/SC (regularized) loss.

    Affine operators with an interior solution are solved in closed form.
    Otherwise projected forward steps with step ``mu / beta^2`` are iterated
    until a certificate bounds ``||z - z*||^2`` by ``distance_tolerance^2``.
    Two certificates are used, whichever is smaller: the SC/SC gap bound
    ``(2 / mu) gap(z)`` and the natural-residual bound
    ``((1 + eta beta) / (eta mu))^2 ||z - P(z - eta G(z))||^2``.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if weights is None:
        weights = np.full(n, 1.0 / n)
    mu = loss.modulus
    if mu <= 0:
        raise ValueError("find_saddle needs a strongly-convex/strongly-concave objective")
    tol_sq = distance_tolerance**2

    affine = loss.affine_operator(X, weights)
    if affine is not None:
        A, b = affine
        z_free = np.linalg.solve(A, -b)
        if domain.contains(z_free):
            return SubroutineResult(z_free, n, details={"certificate": 0.0, "iterations": 0, "closed_form": True})
        beta = float(np.linalg.norm(A, 2))

        def G(z):
            return A @ z + b
    else:
        beta = loss.total_smoothness
        if beta is None or not math.isfinite(beta):
            raise SaddleSolverError("iterative saddle solve needs a smooth loss", float("inf"))

        def G(z):
            return loss.mean_operator(z, X, weights)

    beta = max(beta, mu)
    eta = mu / beta**2
    z = domain.center if z0 is None else domain.project(np.asarray(z0, dtype=float))
    certificate = float("inf")
    evals = 0
    for it in range(1, max_iter + 1):
        z_next = domain.project(z - eta * G(z))
        evals += n
        if it % check_every == 0 or it == max_iter:
            residual = np.linalg.norm(z_next - domain.project(z_next - eta * G(z_next)))
            evals += n
            certificate = ((1 + eta * beta) / (eta * mu) * residual) ** 2
            if certificate > tol_sq:
                try:
                    certificate = min(certificate, 2.0 / mu * max(gap_value(loss, domain, z_next, X, weights), 0.0))
                except RuntimeError:
                    pass
            if certificate <= tol_sq:
                return SubroutineResult(
                    z_next, evals, details={"certificate": certificate, "iterations": it, "closed_form": False}
                )
        z = z_next
    raise SaddleSolverError("saddle solver exhausted its iteration budget", certificate)


def solve_regularized_empirical(
    dataset, loss: LossSpec, domain: Domain, distance_tolerance: float, max_iter: int = 200_000, z0=None
) -> SubroutineResult:
    """Saddle point of the regularized empirical objective to a squared-distance tolerance."""
    X = _as_samples(dataset)
    return find_saddle(loss, domain, X, None, distance_tolerance, max_iter, z0=z0)


def smooth_phase_subroutine(
    dataset,
    loss: LossSpec,
    t: int,
    lam: float,
    n_prime: int,
    budget: BudgetLike,
    domain: Domain,
    seed=None,
    z0=None,
) -> SubroutineResult:
    """Output perturbation for phase ``t`` of recursive regularization (smooth losses).

    Solves the phase objective to squared distance
    ``(delta/5 * L / (2^t lam n'))^2``, adds ``N(0, sigma_t^2 I)`` and
    projects back onto the domain.
    """
    if loss.smoothness is None:
        raise ValueError("smooth_phase_subroutine requires a smooth loss")
    budget = PrivacyBudget.coerce(budget).require_positive()
    L = loss.lipschitz
    tolerance = budget.delta / 5.0 * L / (2.0**t * lam * n_prime)
    solved = solve_regularized_empirical(dataset, loss, domain, tolerance, z0=z0)
    sigma = output_perturbation_sigma(t, lam, n_prime, budget, L)
    rng = _rng(seed)
    noisy = solved.point + gaussian_noise(rng, domain.dim, sigma)
    point = domain.project(noisy)
    return SubroutineResult(
        point,
        solved.gradient_evaluations,
        noise_injected=True,
        details={"sigma": sigma, "tolerance": tolerance, "solver_point": solved.point},
    )


# ---------------------------------------------------------------------------
# Recursive regularization


@dataclass(frozen=True)
class RecursionSchedule:
    lam: float
    T: int
    n_prime: int
    D_hats: Tuple[float, ...]

    @property
    def blocks(self) -> List[Tuple[int, int]]:
        return [((t - 1) * self.n_prime, t * self.n_prime) for t in range(1, self.T + 1)]


@dataclass(frozen=True)
class PhaseContext:
    """What a subroutine learns about the phase it is solving."""

    t: int
    lam: float
    n_prime: int
    D_hat: float
    lipschitz: float
    domain: Domain


@dataclass
class RecursionResult:
    point: np.ndarray
    iterates: np.ndarray
    phase_losses: List[LossSpec]
    schedule: RecursionSchedule
    gradient_evaluations: int
    blocks: List[Tuple[int, int]]
    phase_results: List[SubroutineResult]


def phase_count(L: float, B: float, lam: float) -> int:
    return max(1, math.ceil(math.log2(L / (B * lam)) - 1e-12))


def make_schedule(n: int, L: float, B: float, lam: float) -> RecursionSchedule:
    """Phase count, per-phase sample size and distance bounds for ``n`` samples."""
    if n < 2:
        raise ValueError("recursive regularization needs n >= 2")
    floor = L / (B * math.sqrt(n))
    if lam < floor * (1 - 1e-12):
        raise ValueError(f"lambda={lam:.6g} below the floor L/(B sqrt(n)) = {floor:.6g}")
    T = phase_count(L, B, lam)
    n_prime = n // math.ceil(math.log2(n))
    if n_prime < 1 or T * n_prime > n:
        raise ValueError(f"cannot partition n={n} into T={T} blocks of size {n_prime}")
    D_hats = tuple(B / 2.0**t for t in range(1, T + 1))
    return RecursionSchedule(lam=lam, T=T, n_prime=n_prime, D_hats=D_hats)


def per_phase_size(n: int) -> int:
    return n // math.ceil(math.log2(n))


def theory_lambda(n: int, L: float, B: float, alpha_hat: float = 0.0, scale: float = 48.0) -> float:
    """``(scale / B) (alpha_hat + L / sqrt(n'))``; ``scale=48`` is the constant of the convergence analysis."""
    return scale / B * (alpha_hat + L / math.sqrt(per_phase_size(n)))


def smooth_theory_lambda(n: int, d: int, L: float, B: float, budget: BudgetLike, scale: float = 48.0) -> float:
    """``(scale / B) (L / sqrt(n') + L sqrt(d log(2/delta)) / (n' eps))``."""
    budget = PrivacyBudget.coerce(budget).require_positive()
    n_prime = per_phase_size(n)
    private = L * math.sqrt(d * math.log(2.0 / budget.delta)) / (n_prime * budget.epsilon)
    return scale / B * (L / math.sqrt(n_prime) + private)


def noisy_sgda_alpha(n: int, d: int, L: float, budget: BudgetLike) -> float:
    """Relative accuracy scale ``L sqrt(d log(1/delta)) / (n' eps)`` of noisy SGDA on a phase."""
    budget = PrivacyBudget.coerce(budget).require_positive()
    return L * math.sqrt(d * math.log(1.0 / budget.delta)) / (per_phase_size(n) * budget.epsilon)


Subroutine = Callable[[np.ndarray, LossSpec, np.ndarray, PhaseContext, np.random.Generator], SubroutineResult]


def recursive_regularization(
    dataset,
    loss: LossSpec,
    subroutine: Subroutine,
    lam: float,
    domain: Domain,
    seed=None,
    lipschitz: Optional[float] = None,
    diameter: Optional[float] = None,
) -> RecursionResult:
    """Solve a sequence of increasingly regularized problems on disjoint data blocks.

    Phase ``t`` runs ``subroutine`` on block ``S_t`` with the loss
    ``f^(t)``: the base loss plus ``2 lam`` centered at the start point and
    ``2^(s+1) lam`` centered at each earlier phase output ``s``. The start
    point is the domain center; the output is the last phase's point.
    """
    X = _as_samples(dataset)
    n = X.shape[0]
    L = loss.lipschitz if lipschitz is None else lipschitz
    B = domain.diameter if diameter is None else diameter
    schedule = make_schedule(n, L, B, lam)
    rng = _rng(seed)

    z_prev = domain.center
    iterates = [z_prev]
    phase_loss = regularize(loss, 2.0 * lam, z_prev)
    phase_losses, phase_results = [], []
    evaluations = 0
    for t, (start, stop) in enumerate(schedule.blocks, start=1):
        context = PhaseContext(t, lam, schedule.n_prime, schedule.D_hats[t - 1], L, domain)
        result = subroutine(X[start:stop], phase_loss, z_prev, context, rng)
        phase_losses.append(phase_loss)
        phase_results.append(result)
        evaluations += result.gradient_evaluations
        z_prev = np.asarray(result.point, dtype=float)
        iterates.append(z_prev)
        phase_loss = regularize(phase_loss, 2.0 ** (t + 1) * lam, z_prev)
    return RecursionResult(
        point=z_prev,
        iterates=np.array(iterates),
        phase_losses=phase_losses,
        schedule=schedule,
        gradient_evaluations=evaluations,
        blocks=schedule.blocks,
        phase_results=phase_results,
    )


class ExactSubroutine:
    """Phase solver returning the regularized empirical saddle point (no noise)."""

    def __init__(self, distance_tolerance: float = 1e-10):
        self.distance_tolerance = distance_tolerance

    def __call__(self, block, loss, z0, context, rng):
        return solve_regularized_empirical(block, loss, context.domain, self.distance_tolerance, z0=z0)


class NoisySGDASubroutine:
    """Phase solver running accountant-calibrated noisy SGDA from the previous output.

    The plan uses the phase Lipschitz bound ``lipschitz_factor * L`` and the
    distance bound ``D_hat = B / 2^t``.
    """

    def __init__(self, budget: BudgetLike, lipschitz_factor: float = EFFECTIVE_LIPSCHITZ_FACTOR, batch_rule="accountant"):
        self.budget = PrivacyBudget.coerce(budget)
        self.lipschitz_factor = lipschitz_factor
        self.batch_rule = batch_rule

    def plan(self, n_block: int, d: int, context: PhaseContext) -> SgdaPrivacyPlan:
        return calibrate_noisy_sgda(
            n_block, d, self.budget, self.lipschitz_factor * context.lipschitz, context.D_hat,
            batch_rule=self.batch_rule,
        )

    def __call__(self, block, loss, z0, context, rng):
        plan = self.plan(block.shape[0], context.domain.dim, context)
        result = noisy_sgda(block, loss, plan, z0, context.domain, rng)
        result.details["plan"] = plan
        return result


class SmoothPhaseSubroutine:
    """Phase solver doing a high-accuracy solve followed by output perturbation."""

    def __init__(self, budget: BudgetLike):
        self.budget = PrivacyBudget.coerce(budget)

    def __call__(self, block, loss, z0, context, rng):
        return smooth_phase_subroutine(
            block, loss, context.t, context.lam, context.n_prime, self.budget, context.domain, rng, z0=z0
        )
