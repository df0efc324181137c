"""Synthetic stochastic saddle-point problems with exact population oracles.

Every family's population objective is a finite weighted sum
``F_D(w, theta) = sum_j p_j f(w, theta; a_j)``. For losses that are affine in
the data (bilinear, linear, quadratic, packing) a single atom at the mean
suffices, because the data-quadratic terms cancel between the two blocks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from .core import Ball, Box, Domain, LossSpec, best_response, gap_value

__all__ = [
    "Dataset",
    "PROBLEM_KINDS",
    "PackingInstance",
    "ProblemSpec",
    "dataset_mean_algorithm",
    "make_packing_instance",
    "make_problem",
    "mode_algorithm",
    "population_best_response",
    "sample_dataset",
]

PROBLEM_KINDS = ("bilinear", "linear_saddle", "quadratic_scsc", "median_saddle", "packing_erm")


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ValueError("a dataset needs at least one sample, one per row")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    def __len__(self):
        return self.n

    def replace_entry(self, index: int, sample) -> "Dataset":
        """An adjacent dataset: this one with entry ``index`` swapped for ``sample``."""
        samples = self.samples.copy()
        samples[index] = sample
        return Dataset(samples)


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    loss: LossSpec
    domain: Domain
    sampler: Callable[[np.random.Generator, int], np.ndarray]
    population_points: np.ndarray
    population_weights: np.ndarray
    population_saddle: Optional[np.ndarray] = None
    params: dict = field(default_factory=dict)

    @property
    def lipschitz(self) -> float:
        return self.loss.lipschitz

    @property
    def diameter(self) -> float:
        return self.domain.diameter

    @property
    def dim(self) -> int:
        return self.domain.dim

    def population_value(self, w, theta) -> float:
        z = np.concatenate([np.atleast_1d(w), np.atleast_1d(theta)]).astype(float)
        return self.loss.mean_value(z, self.population_points, self.population_weights)

    def gap(self, z, loss: Optional[LossSpec] = None) -> float:
        """Population gap function of ``loss`` (default: the problem's loss) at ``z``."""
        loss = self.loss if loss is None else loss
        return gap_value(loss, self.domain, z, self.population_points, self.population_weights)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_dataset(problem: ProblemSpec, n: int, seed=None) -> Dataset:
    """``n`` i.i.d. draws from the problem's distribution."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return Dataset(np.asarray(problem.sampler(_rng(seed), n), dtype=float))


def population_best_response(problem: ProblemSpec, z, side: str, loss: Optional[LossSpec] = None, **kwargs):
    """Best response against ``F_D`` on ``side``; returns ``(point, value)``."""
    loss = problem.loss if loss is None else loss
    return best_response(
        loss, problem.domain, z, side, problem.population_points, problem.population_weights, **kwargs
    )


def _sphere(rng, size, dim):
    v = rng.standard_normal((size, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _set(kind: str, dim: int, radius: float):
    if kind == "ball":
        return Ball(np.zeros(dim), radius)
    if kind == "box":
        return Box(-radius * np.ones(dim), radius * np.ones(dim))
    raise ValueError(f"unknown set kind {kind!r}")


def _set_extent(cset) -> float:
    """Largest norm of a point of the set."""
    if isinstance(cset, Ball):
        return float(np.linalg.norm(cset.center) + cset.radius)
    return float(np.linalg.norm(np.maximum(np.abs(cset.lower), np.abs(cset.upper))))


def _mean_vector(params, dim, default_first):
    mean = params.get("mean")
    if mean is None:
        mean = np.zeros(dim)
        mean[0] = default_first
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (dim,):
        raise ValueError(f"mean must have dimension {dim}")
    return mean


# ---------------------------------------------------------------------------
# families


def _bilinear(d_w, d_theta, params):
    if d_w != 1 or d_theta != 1:
        raise ValueError("bilinear problem is one-dimensional in each block")

    def value(w, theta, X):
        return np.full(X.shape[0], float(w[0] * theta[0]))

    def operator(w, theta, X):
        return np.tile([theta[0], -w[0]], (X.shape[0], 1))

    def affine(X, weights):
        return np.array([[0.0, 1.0], [-1.0, 0.0]]), np.zeros(2)

    loss = LossSpec(
        value, operator, 1, 1, lipschitz=math.sqrt(2.0), smoothness=1.0, affine_fn=affine, name="bilinear"
    )
    domain = Domain(Box([-1.0], [1.0]), Box([-1.0], [1.0]))

    def sampler(rng, n):
        return rng.choice([-1.0, 1.0], size=(n, 1))

    return loss, domain, sampler, np.zeros((1, 1)), np.ones(1)


def _linear_saddle(d_w, d_theta, params):
    if d_w != d_theta:
        raise ValueError("linear_saddle needs d_w == d_theta")
    p = d_w
    radius = float(params.get("radius", 1.0))
    x_radius = float(params.get("x_radius", 1.0))
    mean = _mean_vector(params, p, 0.5 * x_radius)
    spread = x_radius - np.linalg.norm(mean)
    if spread < 0:
        raise ValueError("mean must lie inside the data ball")

    def value(w, theta, X):
        return X @ w - X @ theta

    def operator(w, theta, X):
        return np.hstack([X, X])

    def affine(X, weights):
        xbar = weights @ X
        return np.zeros((2 * p, 2 * p)), np.concatenate([xbar, xbar])

    loss = LossSpec(
        value, operator, p, p, lipschitz=math.sqrt(2.0) * x_radius, smoothness=0.0, affine_fn=affine,
        name="linear_saddle",
    )
    kind = params.get("set", "ball")
    domain = Domain(_set(kind, p, radius), _set(kind, p, radius))

    def sampler(rng, n):
        return mean + spread * _sphere(rng, n, p)

    return loss, domain, sampler, mean[None, :], np.ones(1)


def _quadratic_scsc(d_w, d_theta, params):
    if d_w != d_theta:
        raise ValueError("quadratic_scsc needs d_w == d_theta")
    p = d_w
    mu = float(params.get("mu", 1.0))
    if not mu > 0:
        raise ValueError(f"quadratic_scsc needs mu > 0, got {mu}")
    gamma = float(params.get("gamma", 0.0))
    if not 0 <= gamma < mu:
        raise ValueError("quadratic_scsc needs 0 <= gamma < mu")
    radius = float(params.get("radius", 1.0))
    x_radius = float(params.get("x_radius", 1.0))
    mean = _mean_vector(params, p, 0.5 * x_radius)
    spread = float(params.get("spread", x_radius - np.linalg.norm(mean)))
    if spread < 0 or np.linalg.norm(mean) + spread > x_radius * (1 + 1e-12):
        raise ValueError("data support must lie inside the ball of radius x_radius")

    def value(w, theta, X):
        return (
            0.5 * mu * np.sum((w - X) ** 2, axis=1)
            - 0.5 * mu * np.sum((theta - X) ** 2, axis=1)
            + gamma * float(w @ theta)
        )

    def operator(w, theta, X):
        return np.hstack([mu * (w - X) + gamma * theta, mu * (theta - X) - gamma * w])

    eye = np.eye(p)
    A = np.block([[mu * eye, gamma * eye], [-gamma * eye, mu * eye]])

    def affine(X, weights):
        xbar = weights @ X
        return A, np.concatenate([-mu * xbar, -mu * xbar])

    kind = params.get("set", "ball")
    domain = Domain(_set(kind, p, radius), _set(kind, p, radius))
    extent = _set_extent(domain.primal_set)
    block_bound = mu * (extent + x_radius) + gamma * extent
    loss = LossSpec(
        value, operator, p, p,
        lipschitz=math.sqrt(2.0) * block_bound,
        smoothness=math.hypot(mu, gamma),
        strong_convexity=mu,
        affine_fn=affine,
        name="quadratic_scsc",
    )

    def sampler(rng, n):
        if spread == 0:
            return np.tile(mean, (n, 1))
        return mean + spread * _sphere(rng, n, p)

    return loss, domain, sampler, mean[None, :], np.ones(1)


def _median_saddle(d_w, d_theta, params):
    if d_w != d_theta:
        raise ValueError("median_saddle needs d_w == d_theta")
    p = d_w
    radius = float(params.get("radius", 1.0))
    atoms = params.get("atoms")
    if atoms is None:
        atoms = np.zeros((3, p))
        atoms[0, 0], atoms[1, 0] = 0.6, -0.4
        if p > 1:
            atoms[2, 1] = 0.5
        else:
            atoms[2, 0] = 0.1
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    if atoms.shape[1] != p:
        raise ValueError(f"atoms must have {p} columns")
    probs = np.asarray(params.get("probs", np.full(atoms.shape[0], 1.0 / atoms.shape[0])), dtype=float)
    if probs.shape != (atoms.shape[0],) or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0):
        raise ValueError("probs must be a probability vector over the atoms")

    def value(w, theta, X):
        return np.linalg.norm(w - X, axis=1) - np.linalg.norm(theta - X, axis=1)

    def operator(w, theta, X):
        # the zero vector is the selected subgradient of ||u - x|| at u = x
        return np.hstack([_unit_rows(w - X), _unit_rows(theta - X)])

    loss = LossSpec(
        value, operator, p, p, lipschitz=math.sqrt(2.0), smoothness=None,
        block_solver=_median_block_solver, separable=True, name="median_saddle",
    )
    kind = params.get("set", "ball")
    domain = Domain(_set(kind, p, radius), _set(kind, p, radius))

    def sampler(rng, n):
        return atoms[rng.choice(atoms.shape[0], size=n, p=probs)]

    return loss, domain, sampler, atoms, probs


def _unit_rows(V):
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    out = np.zeros_like(V)
    np.divide(V, norms, out=out, where=norms > 0)
    return out


def _median_block_solver(side, fixed, X, weights, extra_a, extra_b, cset, max_iter=20_000):
    """Minimize ``sum_i p_i ||u - x_i|| + extra_a ||u||^2 + <extra_b, u>`` over ``cset``.

    Majorize-minimize (Weiszfeld) steps: each surrogate is an isotropic
    quadratic, minimized exactly by projecting its stationary point. The
    atoms lying in the set are also tried as candidates, since the
    iteration approaches an optimal atom only slowly.
    """

    def objective(u):
        return float(weights @ np.linalg.norm(X - u, axis=1) + extra_a * (u @ u) + extra_b @ u)

    u = cset.project(weights @ X)
    value = objective(u)
    for _ in range(max_iter):
        dist = np.maximum(np.linalg.norm(X - u, axis=1), 1e-15)
        coef = weights / dist
        u_next = cset.project((coef @ X - extra_b) / (coef.sum() + 2.0 * extra_a))
        value_next = objective(u_next)
        step = np.linalg.norm(u_next - u)
        u, value_prev, value = u_next, value, value_next
        if step <= 1e-14 or value_prev - value <= 1e-16:
            break
    for atom in X:
        candidate = cset.project(atom)
        if objective(candidate) < objective(u):
            u = candidate
    return u


def _packing_erm(d_w, d_theta, params):
    instance = params.get("instance")
    if instance is None:
        instance = make_packing_instance(
            n=int(params.get("n", d_w)),
            d=d_w,
            K=int(params.get("K", d_w)),
            L=float(params.get("L", 1.0)),
            B=float(params.get("B", 1.0)),
            sigma=params.get("sigma"),
        )
    d = instance.d
    if d_w != d:
        raise ValueError("d_w must equal the packing dimension")
    L, B = instance.L, instance.B

    def value(w, theta, X):
        return X @ w

    def operator(w, theta, X):
        return np.hstack([X, np.zeros((X.shape[0], 1))])

    def affine(X, weights):
        xbar = weights @ X
        return np.zeros((d + 1, d + 1)), np.concatenate([xbar, [0.0]])

    loss = LossSpec(value, operator, d, 1, lipschitz=L, smoothness=0.0, affine_fn=affine, name="packing_erm")
    domain = Domain(Ball(np.zeros(d), B), Ball(np.zeros(1), 0.0))
    data = instance.dataset

    def sampler(rng, n):
        return data[rng.integers(0, data.shape[0], size=n)]

    return loss, domain, sampler, data.mean(axis=0, keepdims=True), np.ones(1), instance


@dataclass(frozen=True)
class PackingInstance:
    """Dataset ``{L s_1 e_1, ..., L s_K e_K, 0, ..., 0}`` for a sign vector ``s``."""

    sigma: np.ndarray
    K: int
    n: int
    d: int
    L: float
    B: float

    @property
    def dataset(self) -> np.ndarray:
        data = np.zeros((self.n, self.d))
        data[np.arange(self.K), np.arange(self.K)] = self.L * self.sigma
        return data

    @property
    def minimizer(self) -> np.ndarray:
        w = np.zeros(self.d)
        w[: self.K] = -self.B / math.sqrt(self.K) * self.sigma
        return w

    @property
    def min_value(self) -> float:
        return -self.B * self.L * math.sqrt(self.K) / self.n

    def flip(self, j: int) -> "PackingInstance":
        sigma = self.sigma.copy()
        sigma[j] = -sigma[j]
        return PackingInstance(sigma, self.K, self.n, self.d, self.L, self.B)


def make_packing_instance(n: int, d: int, K: int, L: float = 1.0, B: float = 1.0, sigma=None) -> PackingInstance:
    if not 1 <= K <= min(n, d):
        raise ValueError(f"need 1 <= K <= min(n, d), got K={K}, n={n}, d={d}")
    sigma = np.ones(K) if sigma is None else np.asarray(sigma, dtype=float)
    if sigma.shape != (K,) or not np.all(np.abs(sigma) == 1):
        raise ValueError("sigma must be a vector of +-1 of length K")
    return PackingInstance(sigma, K, n, d, float(L), float(B))


_BUILDERS = {
    "bilinear": _bilinear,
    "linear_saddle": _linear_saddle,
    "quadratic_scsc": _quadratic_scsc,
    "median_saddle": _median_saddle,
    "packing_erm": _packing_erm,
}


def make_problem(kind: str, d_w: int = 1, d_theta: int = 1, params: Optional[dict] = None) -> ProblemSpec:
    """Build a synthetic problem of one of :data:`PROBLEM_KINDS`.

    Common params are ``radius`` (domain size), ``x_radius`` (data support
    radius), ``mean`` and ``set`` (``"ball"`` or ``"box"``). The quadratic
    family also takes ``mu``, ``gamma`` and ``spread``; the median family
    ``atoms`` and ``probs``; the packing family ``n``, ``K``, ``L``, ``B``,
    ``sigma`` or a ready ``instance``.
    """
    if kind not in _BUILDERS:
        raise ValueError(f"unknown problem kind {kind!r}; expected one of {PROBLEM_KINDS}")
    if d_w < 1 or d_theta < 1:
        raise ValueError("dimensions must be >= 1")
    params = dict(params or {})
    built = _BUILDERS[kind](d_w, d_theta, params)
    loss, domain, sampler, points, weights = built[:5]
    if len(built) > 5:
        params["instance"] = built[5]
    problem = ProblemSpec(kind, loss, domain, sampler, points, weights, None, params)
    saddle = _population_saddle(problem)
    return ProblemSpec(kind, loss, domain, sampler, points, weights, saddle, params)


def _population_saddle(problem: ProblemSpec) -> Optional[np.ndarray]:
    if problem.name == "bilinear":
        return np.zeros(2)
    if problem.name == "linear_saddle":
        mean = problem.population_points[0]
        # min_w <w, m> and max_theta -<theta, m> both minimize <., m>
        return np.concatenate(
            [problem.domain.primal_set.linear_minimizer(mean), problem.domain.dual_set.linear_minimizer(mean)]
        )
    if problem.name == "quadratic_scsc":
        from .solvers import find_saddle

        return find_saddle(
            problem.loss, problem.domain, problem.population_points, problem.population_weights, 1e-12
        ).point
    if problem.name == "packing_erm":
        mean = problem.population_points[0]
        return np.concatenate([problem.domain.primal_set.linear_minimizer(mean), [0.0]])
    if problem.name == "median_saddle":
        u, _ = population_best_response(problem, problem.domain.center, "primal")
        v, _ = population_best_response(problem, problem.domain.center, "dual")
        return np.concatenate([u, v])
    return None


# ---------------------------------------------------------------------------
# reference algorithms


def mode_algorithm(samples, rng=None) -> np.ndarray:
    """Mode of the first half of ``samples`` as ``w``, of the second half as ``theta``.

    Samples are +-1 scalars; ``n`` must be even and ties go to ``+1``.
    """
    x = np.asarray(getattr(samples, "samples", samples), dtype=float).ravel()
    n = x.shape[0]
    if n % 2:
        raise ValueError("the mode algorithm needs an even number of samples")
    half = n // 2
    w = 1.0 if x[:half].sum() >= 0 else -1.0
    theta = 1.0 if x[half:].sum() >= 0 else -1.0
    return np.array([w, theta])


def dataset_mean_algorithm(domain: Domain) -> Callable:
    """``A(S) = [P_W(mean S), P_Theta(mean S)]`` for problems with ``d_w == d_theta``."""

    def algorithm(samples, rng=None):
        X = np.asarray(getattr(samples, "samples", samples), dtype=float)
        xbar = X.mean(axis=0)
        return np.concatenate([domain.primal_set.project(xbar), domain.dual_set.project(xbar)])

    return algorithm
