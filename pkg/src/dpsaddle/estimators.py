"""Estimator wrappers with a ``fit`` / ``predict`` / ``score`` interface.

Each estimator is configured with a problem family (a kind name plus
parameters, or a ready :class:`~dpsaddle.problems.ProblemSpec`) and fitted
on a sample matrix with one row per data point. After fitting, ``point_``
holds the joint solution ``[w, theta]``.
"""
from __future__ import annotations

import numbers
from typing import Optional, Union

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .core import gap_value, regularize
from .privacy import PrivacyBudget
from .problems import ProblemSpec, make_problem
from .solvers import (
    ExactSubroutine,
    NoisySGDASubroutine,
    SmoothPhaseSubroutine,
    calibrate_noisy_sgda,
    local_dp_sgda,
    noisy_sgda,
    noisy_sgda_alpha,
    recursive_regularization,
    smooth_theory_lambda,
    solve_regularized_empirical,
    theory_lambda,
)

__all__ = [
    "LocalDPSGDASaddle",
    "NoisySGDASaddle",
    "RecursiveRegularizationSaddle",
    "RegularizedSaddle",
    "resolve_problem",
]

SUBROUTINES = ("exact", "noisy_sgda", "smooth")


def resolve_problem(problem: Union[str, ProblemSpec], problem_params: Optional[dict], n_features: int) -> ProblemSpec:
    """Turn a kind name into a problem whose data dimension matches ``n_features``."""
    if isinstance(problem, ProblemSpec):
        expected = problem.population_points.shape[1]
        if n_features != expected:
            raise ValueError(f"X has {n_features} features, problem {problem.name!r} expects {expected}")
        return problem
    params = dict(problem_params or {})
    if problem == "bilinear":
        d_w = d_theta = 1
    elif problem == "packing_erm":
        d_w, d_theta = n_features, 1
    else:
        d_w = d_theta = n_features
    return make_problem(problem, d_w, d_theta, params)


def _check_budget(epsilon, delta) -> PrivacyBudget:
    return PrivacyBudget(float(epsilon), float(delta)).require_positive()


def _seed(random_state) -> int:
    if isinstance(random_state, numbers.Integral):
        return int(random_state)
    return int(check_random_state(random_state).randint(0, 2**31 - 1))


class _SaddleEstimator(BaseEstimator):
    def _validate(self, X):
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        if hasattr(self, "n_features_in_") and X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, estimator was fitted with {self.n_features_in_}")
        return X

    def _setup(self, X):
        X = self._validate(X)
        self.n_features_in_ = X.shape[1]
        self.problem_ = resolve_problem(self.problem, self.problem_params, X.shape[1])
        return X

    def _store(self, point, evaluations, **details):
        self.point_ = np.asarray(point, dtype=float)
        self.w_, self.theta_ = self.problem_.domain.split(self.point_)
        self.gradient_evaluations_ = int(evaluations)
        self.details_ = details
        return self

    def predict(self, X):
        """Loss value ``f(w_, theta_; x)`` for every row ``x`` of ``X``."""
        check_is_fitted(self, "point_")
        X = self._validate(X)
        return self.problem_.loss.value(self.point_, X)

    def transform(self, X):
        """Per-row saddle operator ``[grad_w f, -grad_theta f]`` at the fitted point."""
        check_is_fitted(self, "point_")
        X = self._validate(X)
        return self.problem_.loss.saddle_op(self.point_, X)

    def empirical_gap(self, X) -> float:
        check_is_fitted(self, "point_")
        X = self._validate(X)
        return gap_value(self.problem_.loss, self.problem_.domain, self.point_, X)

    def population_gap(self) -> float:
        check_is_fitted(self, "point_")
        return self.problem_.gap(self.point_)

    def score(self, X, y=None) -> float:
        """Negative empirical gap on ``X`` (larger is better)."""
        return -self.empirical_gap(X)


class RegularizedSaddle(_SaddleEstimator):
    """Exact saddle of the empirical objective plus ``(lam/2)(||w - c_w||^2 - ||theta - c_theta||^2)``.

    ``c`` is the domain center. The output is ``2 L / (lam n)`` argument
    stable, which makes this the reference algorithm for stability probes.
    """

    def __init__(self, problem="linear_saddle", problem_params=None, lam=1.0, tol=1e-10):
        self.problem = problem
        self.problem_params = problem_params
        self.lam = lam
        self.tol = tol

    def fit(self, X, y=None):
        X = self._setup(X)
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        loss = regularize(self.problem_.loss, self.lam / 2.0, self.problem_.domain.center)
        result = solve_regularized_empirical(X, loss, self.problem_.domain, self.tol)
        return self._store(result.point, result.gradient_evaluations, **result.details)


class RecursiveRegularizationSaddle(_SaddleEstimator):
    """Recursive regularization with a choice of phase solver.

    Parameters
    ----------
    subroutine : {"exact", "noisy_sgda", "smooth"}
        ``"exact"`` solves every phase to high accuracy without noise,
        ``"noisy_sgda"`` runs accountant-calibrated noisy SGDA, ``"smooth"``
        solves exactly and perturbs the output.
    lam : float or "auto"
        Base regularization. ``"auto"`` applies the rate-optimal formula
        for the chosen subroutine with constant ``lambda_scale``.
    lambda_scale : float
        Leading constant of the ``"auto"`` formula (48 in the analysis).
    """

    def __init__(
        self,
        problem="quadratic_scsc",
        problem_params=None,
        subroutine="exact",
        lam="auto",
        lambda_scale=48.0,
        epsilon=1.0,
        delta=1e-5,
        random_state=None,
    ):
        self.problem = problem
        self.problem_params = problem_params
        self.subroutine = subroutine
        self.lam = lam
        self.lambda_scale = lambda_scale
        self.epsilon = epsilon
        self.delta = delta
        self.random_state = random_state

    def resolve_lambda(self, n: int) -> float:
        problem = self.problem_
        L, B, d = problem.lipschitz, problem.diameter, problem.dim
        if self.lam != "auto":
            if not (isinstance(self.lam, numbers.Real) and self.lam > 0):
                raise ValueError(f"lam must be positive or 'auto', got {self.lam!r}")
            return float(self.lam)
        if self.subroutine == "exact":
            return theory_lambda(n, L, B, scale=self.lambda_scale)
        budget = _check_budget(self.epsilon, self.delta)
        if self.subroutine == "noisy_sgda":
            alpha = noisy_sgda_alpha(n, d, L, budget)
            return theory_lambda(n, L, B, alpha_hat=alpha, scale=self.lambda_scale)
        return smooth_theory_lambda(n, d, L, B, budget, scale=self.lambda_scale)

    def fit(self, X, y=None):
        X = self._setup(X)
        if self.subroutine not in SUBROUTINES:
            raise ValueError(f"subroutine must be one of {SUBROUTINES}, got {self.subroutine!r}")
        if self.subroutine == "exact":
            sub = ExactSubroutine()
        elif self.subroutine == "noisy_sgda":
            sub = NoisySGDASubroutine(_check_budget(self.epsilon, self.delta))
        else:
            sub = SmoothPhaseSubroutine(_check_budget(self.epsilon, self.delta))
        lam = self.resolve_lambda(X.shape[0])
        result = recursive_regularization(
            X, self.problem_.loss, sub, lam, self.problem_.domain, seed=_seed(self.random_state)
        )
        self.lambda_ = lam
        self.schedule_ = result.schedule
        self.iterates_ = result.iterates
        return self._store(result.point, result.gradient_evaluations)


class NoisySGDASaddle(_SaddleEstimator):
    """Noisy minibatch SGDA on the whole dataset, started at the domain center."""

    def __init__(
        self, problem="linear_saddle", problem_params=None, epsilon=1.0, delta=1e-5, batch_rule="accountant",
        random_state=None,
    ):
        self.problem = problem
        self.problem_params = problem_params
        self.epsilon = epsilon
        self.delta = delta
        self.batch_rule = batch_rule
        self.random_state = random_state

    def fit(self, X, y=None):
        X = self._setup(X)
        problem = self.problem_
        plan = calibrate_noisy_sgda(
            X.shape[0], problem.dim, _check_budget(self.epsilon, self.delta), problem.lipschitz,
            problem.diameter, batch_rule=self.batch_rule,
        )
        result = noisy_sgda(X, problem.loss, plan, problem.domain.center, problem.domain, _seed(self.random_state))
        self.plan_ = plan
        return self._store(result.point, result.gradient_evaluations)


class LocalDPSGDASaddle(_SaddleEstimator):
    """One-pass SGDA with every sample's operator privatized locally."""

    def __init__(self, problem="linear_saddle", problem_params=None, epsilon=1.0, delta=1e-5, random_state=None):
        self.problem = problem
        self.problem_params = problem_params
        self.epsilon = epsilon
        self.delta = delta
        self.random_state = random_state

    def fit(self, X, y=None):
        X = self._setup(X)
        problem = self.problem_
        result = local_dp_sgda(
            X, problem.loss, _check_budget(self.epsilon, self.delta), problem.domain,
            seed=_seed(self.random_state),
        )
        return self._store(result.point, result.gradient_evaluations)
