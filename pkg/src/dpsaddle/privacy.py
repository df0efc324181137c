"""Noise calibration and precondition checks for the private solvers.

Nothing here proves privacy. The functions evaluate the calibration
formulas and verify the inequalities the accountant needs, so that a run
which does not meet them can be refused.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np

__all__ = [
    "ACCOUNTANT_CONSTANT",
    "PrivacyBudget",
    "PrivacyPreconditionError",
    "SgdaPrivacyPlan",
    "calibrate_noisy_sgda",
    "compose_parallel",
    "gaussian_noise",
    "output_perturbation_sigma",
    "regularized_sensitivity",
]

# Universal constant of the moments accountant; the same value is used for the
# calibrated noise (c0) and for the precondition check (c).
ACCOUNTANT_CONSTANT = 2.0


class PrivacyPreconditionError(ValueError):
    """A privacy calibration precondition does not hold."""


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise PrivacyPreconditionError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not (0 <= self.delta <= 1):
            raise PrivacyPreconditionError(f"delta must lie in [0, 1], got {self.delta}")

    @classmethod
    def coerce(cls, budget: Union["PrivacyBudget", Tuple[float, float]]) -> "PrivacyBudget":
        if isinstance(budget, cls):
            return budget
        epsilon, delta = budget
        return cls(float(epsilon), float(delta))

    def require_positive(self) -> "PrivacyBudget":
        if self.epsilon <= 0 or self.delta <= 0:
            raise PrivacyPreconditionError(
                f"calibration needs epsilon > 0 and delta > 0, got {self}"
            )
        return self


BudgetLike = Union[PrivacyBudget, Tuple[float, float]]


@dataclass(frozen=True)
class SgdaPrivacyPlan:
    """Execution parameters of noisy SGDA for a dataset of size ``n``.

    The preconditions are recomputed from the stored fields on every access,
    so a plan edited after calibration (e.g. with ``dataclasses.replace``) is
    judged on its actual values.
    """

    T: int
    m: int
    eta: float
    sigma: float
    n: int
    d: int
    budget: PrivacyBudget
    lipschitz: float
    constant: float = ACCOUNTANT_CONSTANT
    notes: Tuple[str, ...] = field(default=())

    @property
    def sigma_floor(self) -> float:
        eps, delta = self.budget.epsilon, self.budget.delta
        return self.constant * self.lipschitz * math.sqrt(self.T * math.log(1.0 / delta)) / (self.n * eps)

    def check_preconditions(self) -> Tuple[bool, List[str]]:
        reasons = []
        if self.T < 1:
            reasons.append(f"T={self.T} < 1")
        if not 1 <= self.m <= self.n:
            reasons.append(f"batch size m={self.m} outside [1, n={self.n}]")
        if self.sigma < 0:
            reasons.append(f"sigma={self.sigma} < 0")
        if self.budget.epsilon <= 0 or not 0 < self.budget.delta < 1:
            reasons.append("accountant needs epsilon > 0 and 0 < delta < 1")
            return False, reasons
        if self.budget.epsilon > 1:
            reasons.append(f"accountant assumes epsilon <= 1, got {self.budget.epsilon}")
        if self.sigma < self.sigma_floor * (1 - 1e-12):
            reasons.append(f"sigma={self.sigma:.6g} below accountant floor {self.sigma_floor:.6g}")
        steps_needed = self.n**2 * self.budget.epsilon / self.m**2
        if self.T < steps_needed * (1 - 1e-12):
            reasons.append(f"T={self.T} < n^2 eps / m^2 = {steps_needed:.6g}")
        return not reasons, reasons

    @property
    def preconditions_ok(self) -> bool:
        return self.check_preconditions()[0]

    @property
    def gradient_evaluations(self) -> int:
        return self.T * self.m


def calibrate_noisy_sgda(
    n: int,
    d: int,
    budget: BudgetLike,
    L: float,
    D_hat: float,
    constant: float = ACCOUNTANT_CONSTANT,
    batch_rule: str = "accountant",
) -> SgdaPrivacyPlan:
    """Plan noisy SGDA for ``n`` samples in dimension ``d``.

    ``T = max(1, floor(min(n/8, n^2 eps^2 / (32 d log(1/delta)))))``,
    ``sigma = c L sqrt(T log(1/delta)) / (n eps)``, ``eta = D_hat / (L sqrt(T))``.

    The batch size follows ``batch_rule``:

    ``"accountant"`` (default)
        ``m = min(n, ceil(n sqrt(eps / T)))``, the smallest batch for which
        ``T >= n^2 eps / m^2`` holds.
    ``"quarter"``
        ``m = max(1, floor(n sqrt(eps / (4 T))))``. This batch always gives
        ``n^2 eps / m^2 >= 4 T``, so such plans are reported as failing.
    """
    budget = PrivacyBudget.coerce(budget).require_positive()
    if n < 8:
        raise PrivacyPreconditionError(f"noisy SGDA calibration needs n >= 8, got {n}")
    if D_hat <= 0 or L <= 0:
        raise PrivacyPreconditionError("D_hat and L must be positive")
    eps, delta = budget.epsilon, budget.delta
    log_term = math.log(1.0 / delta)
    if log_term > 0:
        T = max(1, math.floor(min(n / 8.0, n**2 * eps**2 / (32.0 * d * log_term))))
    else:
        T = max(1, math.floor(n / 8.0))
    if batch_rule == "accountant":
        m = min(n, math.ceil(n * math.sqrt(eps / T) - 1e-12))
    elif batch_rule == "quarter":
        m = max(1, math.floor(n * math.sqrt(eps / (4.0 * T))))
    else:
        raise ValueError(f"unknown batch_rule {batch_rule!r}")
    m = max(1, min(n, m))
    sigma = constant * L * math.sqrt(T * log_term) / (n * eps)
    eta = D_hat / (L * math.sqrt(T))
    return SgdaPrivacyPlan(T=T, m=m, eta=eta, sigma=sigma, n=n, d=d, budget=budget, lipschitz=L, constant=constant)


def output_perturbation_sigma(t: int, lam: float, n_prime: int, budget: BudgetLike, L: float) -> float:
    """Noise scale ``8 L sqrt(log(2/delta)) / (2^t lam n' eps)`` of phase ``t``."""
    if t < 1 or lam <= 0 or n_prime < 1:
        raise PrivacyPreconditionError("need t >= 1, lam > 0 and n_prime >= 1")
    eps, delta = _raw_budget(budget)
    if eps <= 0 or delta <= 0 or math.log(2.0 / delta) <= 0:
        raise PrivacyPreconditionError(f"log(2/delta) must be positive, got delta={delta}")
    return 8.0 * L * math.sqrt(math.log(2.0 / delta)) / (2.0**t * lam * n_prime * eps)


def _raw_budget(budget: BudgetLike) -> Tuple[float, float]:
    if isinstance(budget, PrivacyBudget):
        return budget.epsilon, budget.delta
    epsilon, delta = budget
    return float(epsilon), float(delta)


def compose_parallel(budgets: Iterable[BudgetLike], disjointness_attested: bool) -> PrivacyBudget:
    """Budget of mechanisms run on disjoint partitions: the componentwise max."""
    if not disjointness_attested:
        raise PrivacyPreconditionError(
            "parallel composition needs disjoint partitions; sequential composition is not supported"
        )
    budgets = [PrivacyBudget.coerce(b) for b in budgets]
    if not budgets:
        return PrivacyBudget(0.0, 0.0)
    return PrivacyBudget(max(b.epsilon for b in budgets), max(b.delta for b in budgets))


def regularized_sensitivity(L: float, lambda_total: float, n: int) -> float:
    """Argument stability ``2 L / (lambda n)`` of a ``lambda``-SC/SC regularized saddle."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if lambda_total <= 0:
        raise ValueError("lambda_total must be positive")
    if math.isinf(lambda_total):
        return 0.0
    return 2.0 * L / (lambda_total * n)


def gaussian_noise(rng: np.random.Generator, dim: int, sigma: float, size: Optional[int] = None) -> np.ndarray:
    """Isotropic Gaussian noise ``N(0, sigma^2 I)``."""
    shape = (dim,) if size is None else (size, dim)
    if sigma == 0:
        return np.zeros(shape)
    return sigma * rng.standard_normal(shape)
