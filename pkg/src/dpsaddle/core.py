"""Joint primal-dual geometry, convex-concave losses and regularizer stacks.

Points are handled as flat float64 vectors ``z = [w, theta]``; :class:`Domain`
knows how to split and join them. :class:`JointPoint` is a thin convenience
wrapper for callers that prefer named halves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple, Union

import numpy as np

__all__ = [
    "Ball",
    "BestResponseError",
    "Box",
    "Domain",
    "JointPoint",
    "LossSpec",
    "Regularizer",
    "best_response",
    "gap_value",
    "project",
    "regularize",
    "saddle_operator",
]


class Ball:
    """Euclidean ball ``{u : ||u - center|| <= radius}``."""

    def __init__(self, center, radius: float):
        self.center = np.atleast_1d(np.asarray(center, dtype=float)).copy()
        self.radius = float(radius)
        if self.radius < 0 or not math.isfinite(self.radius):
            raise ValueError(f"radius must be finite and >= 0, got {radius}")
        self.center.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    @property
    def chebyshev_center(self) -> np.ndarray:
        return self.center.copy()

    def project(self, u: np.ndarray) -> np.ndarray:
        u = _check_dim(u, self.dim)
        diff = u - self.center
        norm = np.linalg.norm(diff)
        if norm <= self.radius:
            return u.copy()
        if self.radius == 0.0:
            return self.center.copy()
        return self.center + diff * (self.radius / norm)

    def contains(self, u: np.ndarray, tol: float = 1e-12) -> bool:
        return bool(np.linalg.norm(u - self.center) <= self.radius + tol)

    def linear_minimizer(self, b: np.ndarray) -> np.ndarray:
        """Minimize ``<b, u>`` over the ball (the center when ``b == 0``)."""
        norm = np.linalg.norm(b)
        if norm == 0.0:
            return self.center.copy()
        return self.center - self.radius * b / norm

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        direction = rng.standard_normal((size, self.dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        scale = self.radius * rng.random(size) ** (1.0 / self.dim)
        return self.center + direction * scale[:, None]

    def __repr__(self):
        return f"Ball(center={self.center.tolist()}, radius={self.radius})"


class Box:
    """Axis-aligned box ``{u : lower <= u <= upper}``."""

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float)).copy()
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float)).copy()
        if self.lower.shape != self.upper.shape:
            raise ValueError("lower and upper must have the same shape")
        if np.any(self.lower > self.upper) or not np.all(np.isfinite(self.lower)) or not np.all(
            np.isfinite(self.upper)
        ):
            raise ValueError("box bounds must be finite with lower <= upper")
        self.lower.setflags(write=False)
        self.upper.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    @property
    def chebyshev_center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def project(self, u: np.ndarray) -> np.ndarray:
        u = _check_dim(u, self.dim)
        return np.clip(u, self.lower, self.upper)

    def contains(self, u: np.ndarray, tol: float = 1e-12) -> bool:
        return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))

    def linear_minimizer(self, b: np.ndarray) -> np.ndarray:
        out = self.chebyshev_center
        out = np.where(b > 0, self.lower, out)
        return np.where(b < 0, self.upper, out)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random((size, self.dim))

    def __repr__(self):
        return f"Box(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


ConstraintSet = Union[Ball, Box]


def _check_dim(u, dim: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim != 1 or u.shape[0] != dim:
        raise ValueError(f"expected a vector of dimension {dim}, got shape {u.shape}")
    return u


def project(domain_side: ConstraintSet, z_side) -> np.ndarray:
    """Euclidean projection of ``z_side`` onto a ball or a box."""
    if not isinstance(domain_side, (Ball, Box)):
        raise TypeError(f"unsupported constraint set {type(domain_side).__name__}")
    return domain_side.project(z_side)


@dataclass(frozen=True)
class Domain:
    """Product constraint set ``W x Theta``.

    ``diameter`` is the exact maximum pairwise distance in the product, which
    for balls and boxes is ``sqrt(diam(W)^2 + diam(Theta)^2)``.
    """

    primal_set: ConstraintSet
    dual_set: ConstraintSet

    @property
    def d_w(self) -> int:
        return self.primal_set.dim

    @property
    def d_theta(self) -> int:
        return self.dual_set.dim

    @property
    def dim(self) -> int:
        return self.d_w + self.d_theta

    @property
    def diameter(self) -> float:
        return math.hypot(self.primal_set.diameter, self.dual_set.diameter)

    @property
    def center(self) -> np.ndarray:
        return np.concatenate([self.primal_set.chebyshev_center, self.dual_set.chebyshev_center])

    def split(self, z) -> Tuple[np.ndarray, np.ndarray]:
        z = _check_dim(z, self.dim)
        return z[: self.d_w], z[self.d_w :]

    def join(self, w, theta) -> np.ndarray:
        return np.concatenate([_check_dim(w, self.d_w), _check_dim(theta, self.d_theta)])

    def project(self, z) -> np.ndarray:
        w, theta = self.split(z)
        return np.concatenate([self.primal_set.project(w), self.dual_set.project(theta)])

    def contains(self, z, tol: float = 1e-12) -> bool:
        w, theta = self.split(z)
        return self.primal_set.contains(w, tol) and self.dual_set.contains(theta, tol)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Points drawn from the product set (uniform on each factor)."""
        return np.hstack([self.primal_set.sample(rng, size), self.dual_set.sample(rng, size)])


@dataclass(frozen=True)
class JointPoint:
    w: np.ndarray
    theta: np.ndarray

    @classmethod
    def from_vector(cls, z, d_w: int) -> "JointPoint":
        z = np.asarray(z, dtype=float)
        return cls(z[:d_w].copy(), z[d_w:].copy())

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([np.atleast_1d(self.w), np.atleast_1d(self.theta)])

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


@dataclass(frozen=True)
class Regularizer:
    """The term ``coefficient * (||w - c_w||^2 - ||theta - c_theta||^2)``."""

    coefficient: float
    center: np.ndarray


# Vectorized oracle signatures: ``X`` has one sample per row.
ValueFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
OperatorFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
AffineFn = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class LossSpec:
    """A convex-concave per-sample loss with a stack of quadratic regularizers.

    ``value_fn(w, theta, X)`` returns one value per row of ``X`` and
    ``operator_fn(w, theta, X)`` returns the rows ``[grad_w f, -grad_theta f]``.
    Both describe the *base* loss; regularizers are applied on top by
    :meth:`value` and :meth:`saddle_op`.

    Optional structure hooks let the solvers and gap oracles use exact
    formulas:

    ``affine_fn(X, weights)``
        returns ``(A, b)`` such that ``sum_i weights_i g(z; x_i) = A z + b``.
    ``block_solver(side, fixed, X, weights, extra_a, extra_b, domain_side)``
        minimizes the block objective (the negated one on the dual side) plus
        ``extra_a ||u||^2 + <extra_b, u>`` over ``domain_side``.
    ``separable``
        ``True`` when ``f(w, theta; x) = a(w; x) + b(theta; x)``.
    """

    value_fn: ValueFn
    operator_fn: OperatorFn
    d_w: int
    d_theta: int
    lipschitz: float
    smoothness: Optional[float] = None
    strong_convexity: float = 0.0
    regularizers: Tuple[Regularizer, ...] = ()
    affine_fn: Optional[AffineFn] = None
    block_solver: Optional[Callable] = None
    separable: bool = False
    name: str = "loss"

    def __post_init__(self):
        if not self.lipschitz > 0:
            raise ValueError("lipschitz must be positive")

    @property
    def dim(self) -> int:
        return self.d_w + self.d_theta

    @property
    def base(self) -> "LossSpec":
        return replace(self, regularizers=())

    @property
    def regularization_modulus(self) -> float:
        """SC/SC modulus contributed by the regularizers, ``sum 2 c_i``."""
        return 2.0 * sum(r.coefficient for r in self.regularizers)

    @property
    def modulus(self) -> float:
        return self.strong_convexity + self.regularization_modulus

    @property
    def total_smoothness(self) -> Optional[float]:
        if self.smoothness is None:
            return None
        return self.smoothness + self.regularization_modulus

    def effective_lipschitz(self, diameter: float) -> float:
        """Bound on ``||g||`` over a domain of the given diameter.

        Each regularizer contributes ``2 c ||z - center|| <= 2 c diameter``
        since the centers lie in the domain.
        """
        return self.lipschitz + diameter * self.regularization_modulus

    def _split(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {z.shape}")
        return z[..., : self.d_w], z[..., self.d_w :]

    def value(self, z, X) -> np.ndarray:
        """Per-sample regularized values at the joint point ``z``."""
        w, theta = self._split(z)
        out = np.asarray(self.value_fn(w, theta, X), dtype=float)
        for reg in self.regularizers:
            cw, ct = reg.center[: self.d_w], reg.center[self.d_w :]
            out = out + reg.coefficient * (np.sum((w - cw) ** 2) - np.sum((theta - ct) ** 2))
        return out

    def saddle_op(self, z, X) -> np.ndarray:
        """Per-sample regularized saddle operator, shape ``(len(X), d)``."""
        z = np.asarray(z, dtype=float)
        w, theta = self._split(z)
        out = np.asarray(self.operator_fn(w, theta, X), dtype=float)
        if self.regularizers:
            out = out + self._regularizer_operator(z)
        return out

    def _regularizer_operator(self, z) -> np.ndarray:
        # [2c (w - c_w), -(-2c (theta - c_t))] stacks to 2c (z - center)
        total = np.zeros(self.dim)
        for reg in self.regularizers:
            total += 2.0 * reg.coefficient * (z - reg.center)
        return total

    def mean_value(self, z, X, weights=None) -> float:
        vals = self.value(z, X)
        if weights is None:
            return float(np.mean(vals))
        return float(np.dot(weights, vals))

    def mean_operator(self, z, X, weights=None) -> np.ndarray:
        ops = self.saddle_op(z, X)
        if weights is None:
            return ops.mean(axis=0)
        return weights @ ops

    def affine_operator(self, X, weights) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """``(A, b)`` of the weighted regularized operator, or ``None``."""
        if self.affine_fn is None:
            return None
        A, b = self.affine_fn(X, weights)
        A = np.array(A, dtype=float)
        b = np.array(b, dtype=float)
        for reg in self.regularizers:
            A += 2.0 * reg.coefficient * np.eye(self.dim)
            b -= 2.0 * reg.coefficient * reg.center
        return A, b


def saddle_operator(loss: LossSpec, z, x) -> np.ndarray:
    """Regularized saddle operator at ``z`` for a single data point ``x``."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape[0] != 1:
        X = X.reshape(1, -1)
    return loss.saddle_op(z, X)[0]


def regularize(loss: LossSpec, coefficient: float, center) -> LossSpec:
    """Return a new loss with ``coefficient (||w-c_w||^2 - ||theta-c_theta||^2)`` added."""
    if coefficient < 0 or not math.isfinite(coefficient):
        raise ValueError(f"regularization coefficient must be finite and >= 0, got {coefficient}")
    center = np.asarray(
        center.vector if isinstance(center, JointPoint) else center, dtype=float
    ).copy()
    if center.shape != (loss.dim,):
        raise ValueError(f"center must have dimension {loss.dim}")
    center.setflags(write=False)
    return replace(loss, regularizers=loss.regularizers + (Regularizer(float(coefficient), center),))


class BestResponseError(RuntimeError):
    """An iterative best-response loop ran out of budget."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


def _side_regularization(loss: LossSpec, side: str) -> Tuple[float, np.ndarray]:
    """``(a, b)`` with the side's regularizer part equal to ``a||u||^2 + <b, u>`` + const.

    On the dual side this is the part of ``-F`` so that both sides are
    minimizations.
    """
    lo, hi = (0, loss.d_w) if side == "primal" else (loss.d_w, loss.dim)
    a = 0.0
    b = np.zeros(hi - lo)
    for reg in loss.regularizers:
        a += reg.coefficient
        b -= 2.0 * reg.coefficient * reg.center[lo:hi]
    return a, b


def best_response(
    loss: LossSpec,
    domain: Domain,
    z,
    side: str,
    X,
    weights=None,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    method: str = "auto",
) -> Tuple[np.ndarray, float]:
    """Best response against the weighted objective ``F(w, theta) = sum_i p_i f(w, theta; x_i)``.

    ``side="dual"`` maximizes ``F(w, .)`` over Theta at the primal half of
    ``z``; ``side="primal"`` minimizes ``F(., theta)`` over W. Returns the
    maximizer/minimizer and the attained objective value.

    ``method`` is ``"auto"`` (closed form when the loss exposes one),
    ``"numeric"`` (projected-gradient loop, smooth losses only).
    """
    if side not in ("primal", "dual"):
        raise ValueError(f"side must be 'primal' or 'dual', got {side!r}")
    X = np.asarray(X, dtype=float)
    if weights is None:
        weights = np.full(X.shape[0], 1.0 / X.shape[0])
    weights = np.asarray(weights, dtype=float)
    z = np.asarray(z, dtype=float)
    w, theta = domain.split(z)
    cset = domain.primal_set if side == "primal" else domain.dual_set
    lo, hi = (0, loss.d_w) if side == "primal" else (loss.d_w, loss.dim)

    def joint(u):
        return np.concatenate([u, theta]) if side == "primal" else np.concatenate([w, u])

    u = None
    if method == "auto":
        affine = loss.affine_operator(X, weights)
        if affine is not None:
            u = _affine_best_response(affine, z, lo, hi, cset, tol)
        elif loss.block_solver is not None:
            a, b = _side_regularization(loss, side)
            fixed = theta if side == "primal" else w
            u = loss.block_solver(side, fixed, X, weights, a, b, cset)
    if u is None:
        u = _numeric_best_response(loss, domain, z, side, X, weights, cset, lo, hi, tol, max_iter)
    return u, loss.mean_value(joint(u), X, weights)


def _affine_best_response(affine, z, lo, hi, cset, tol):
    A, b = affine
    block = A[lo:hi, lo:hi]
    a2 = block[0, 0] if hi > lo else 0.0
    if not np.allclose(block, a2 * np.eye(hi - lo), atol=1e-12, rtol=0):
        return None
    # gradient of the side objective (F on the primal side, -F on the dual side)
    # at u is  a2 * u + c  where c collects the cross terms
    mask = np.zeros(A.shape[0], dtype=bool)
    mask[lo:hi] = True
    c = A[lo:hi][:, ~mask] @ z[~mask] + b[lo:hi]
    if a2 > 0:
        u = cset.project(-c / a2)
    else:
        u = cset.linear_minimizer(c)
    # optimality re-check: u is a fixed point of the projected-gradient map
    step = 1.0 / max(a2, 1.0)
    residual = np.linalg.norm(u - cset.project(u - step * (a2 * u + c)))
    if residual > max(tol, 1e-9) * max(1.0, np.linalg.norm(c)):
        raise BestResponseError("closed-form best response failed its optimality check", residual)
    return u


def _numeric_best_response(loss, domain, z, side, X, weights, cset, lo, hi, tol, max_iter):
    beta = loss.total_smoothness
    if beta is None:
        raise BestResponseError("numeric best response needs a smooth loss", float("inf"))
    step = 1.0 / max(beta, 1e-12)
    z = np.array(z, dtype=float)
    u = cset.chebyshev_center
    y, t_k = u.copy(), 1.0
    residual = float("inf")
    for _ in range(max_iter):
        z[lo:hi] = y
        grad = loss.mean_operator(z, X, weights)[lo:hi]
        u_next = cset.project(y - step * grad)
        z[lo:hi] = u_next
        g_next = loss.mean_operator(z, X, weights)[lo:hi]
        residual = float(np.linalg.norm(u_next - cset.project(u_next - step * g_next)))
        if residual <= tol:
            return u_next
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_k * t_k))
        # restart momentum when it points uphill
        if np.dot(y - u_next, u_next - u) > 0:
            t_next, y = 1.0, u_next.copy()
        else:
            y = u_next + ((t_k - 1.0) / t_next) * (u_next - u)
        u, t_k = u_next, t_next
    raise BestResponseError("projected-gradient best response did not converge", residual)


def gap_value(loss: LossSpec, domain: Domain, z, X, weights=None, **kwargs) -> float:
    """``max_theta F(w, theta) - min_w F(w, theta)`` at ``z`` for a weighted objective."""
    _, upper = best_response(loss, domain, z, "dual", X, weights, **kwargs)
    _, lower = best_response(loss, domain, z, "primal", X, weights, **kwargs)
    return upper - lower
