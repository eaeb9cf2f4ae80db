"""Problem statement objects: design space, designs, missingness, models.

The regression side supports two shapes of model:

* ``LinearBasis`` -- a fixed vector of basis functions z(x), so the N x p
  regressor matrix Z does not depend on parameters.
* ``NonlinearModel`` -- a response f(x; beta) with an analytic Jacobian
  df/dbeta; the criterion works with the Jacobian matrix Z(beta).  The model
  also carries the affine map from unit-cube variables t to beta and a prior
  per t-coordinate, which is how parameter uncertainty is averaged out.

Responses go missing completely at random with a logistic retention
probability exp(g0 + g'x) / (1 + exp(g0 + g'x)); the slope coefficients act
on the raw covariates and the intercept is explicit.

All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .numerics import Prior

__all__ = [
    "DesignSpace",
    "Design",
    "ExactDesign",
    "MissingnessModel",
    "MissingPattern",
    "RobustnessParams",
    "LinearBasis",
    "NonlinearModel",
    "retention_probability",
    "design_matrix",
    "jacobian_check",
    "polynomial_basis",
    "quadratic2_basis",
    "exponential_model",
    "grid_space",
]


def _frozen_array(obj, name: str, value: np.ndarray) -> None:
    value = np.array(value, dtype=float)
    value.setflags(write=False)
    object.__setattr__(obj, name, value)


@dataclass(frozen=True)
class DesignSpace:
    """Finite candidate set of covariate vectors, one row per point."""

    points: np.ndarray  # (N, q)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("design space needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("design space points must be finite")
        if len(np.unique(pts, axis=0)) != pts.shape[0]:
            raise ValueError("design space points must be pairwise distinct")
        _frozen_array(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def grid_space(ranges: Sequence[Sequence[float]], counts: Sequence[int]) -> DesignSpace:
    """Tensor grid of equally spaced points, one (lo, hi, count) per axis."""
    if len(ranges) != len(counts):
        raise ValueError("ranges and counts must have equal length")
    axes = []
    for (lo, hi), cnt in zip(ranges, counts):
        if cnt < 1 or hi < lo:
            raise ValueError("each axis needs count >= 1 and hi >= lo")
        axes.append(np.linspace(lo, hi, cnt))
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    return DesignSpace(points)


@dataclass(frozen=True)
class Design:
    """Probability weights over a design space plus the total sample size."""

    weights: np.ndarray  # (N,)
    n: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1:
            raise ValueError("weights must be a vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 (got {w.sum()!r})")
        if int(self.n) < 1 or int(self.n) != self.n:
            raise ValueError("n must be a positive integer")
        _frozen_array(self, "weights", w)
        object.__setattr__(self, "n", int(self.n))

    @classmethod
    def uniform(cls, n_points: int, n: int) -> "Design":
        return cls(np.full(n_points, 1.0 / n_points), n)

    def scaled_weights(self) -> np.ndarray:
        """Diagonal of D_xi, i.e. n * weights."""
        return self.n * self.weights


@dataclass(frozen=True)
class ExactDesign:
    """Integer replicate counts per design point."""

    counts: np.ndarray  # (N,) non-negative ints

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1 or np.any(c < 0) or not np.all(c == np.round(c)):
            raise ValueError("counts must be non-negative integers")
        c = c.astype(int)
        if c.sum() < 1:
            raise ValueError("exact design must place at least one run")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def to_design(self) -> Design:
        return Design(self.counts / self.n, self.n)


@dataclass(frozen=True)
class MissingPattern:
    """Realized number of non-missing responses per design point."""

    observed_counts: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.observed_counts)
        if k.ndim != 1 or np.any(k < 0) or not np.all(k == np.round(k)):
            raise ValueError("observed counts must be non-negative integers")
        k = k.astype(int)
        k.setflags(write=False)
        object.__setattr__(self, "observed_counts", k)

    def check_bounds(self, exact: ExactDesign) -> None:
        if self.observed_counts.shape != exact.counts.shape:
            raise ValueError("pattern length does not match design")
        if np.any(self.observed_counts > exact.counts):
            raise ValueError("observed counts exceed replicate counts")


@dataclass(frozen=True)
class RobustnessParams:
    """Neighborhood radius eta^2 and error variance sigma^2."""

    eta2: float
    sigma2: float

    def __post_init__(self):
        if not (np.isfinite(self.eta2) and self.eta2 >= 0):
            raise ValueError("eta2 must be finite and >= 0")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError("sigma2 must be finite and > 0")


@dataclass(frozen=True)
class MissingnessModel:
    """Logistic retention model: p(x) = expit(gamma0 + gamma_slopes . x)."""

    gamma: np.ndarray  # (q+1,), intercept first

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.ndim != 1 or g.size < 1 or not np.all(np.isfinite(g)):
            raise ValueError("gamma must be a finite vector (intercept first)")
        _frozen_array(self, "gamma", g)

    def retention(self, space: DesignSpace) -> np.ndarray:
        """Retention probability p(x_i, gamma) at every design point."""
        if space.dim != self.gamma.size - 1:
            raise ValueError(
                f"gamma has {self.gamma.size - 1} slopes but the space has {space.dim} covariates"
            )
        probs = expit(self.gamma[0] + space.points @ self.gamma[1:])
        if np.any(probs <= 0.0) or np.any(probs >= 1.0):
            raise ValueError("retention probabilities saturate at 0 or 1 for this gamma")
        return probs


def retention_probability(x, gamma) -> float:
    """Retention probability exp(g0 + g'x)/(1 + exp(g0 + g'x)) at one point.

    `x` may be a scalar (one covariate) or a vector; `gamma` holds the
    intercept followed by one slope per covariate.  The logistic is evaluated
    overflow-safe via expit.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    gamma = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(gamma)):
        raise ValueError("non-finite inputs")
    if gamma.size != x.size + 1:
        raise ValueError(f"gamma needs {x.size + 1} entries (intercept + slopes), got {gamma.size}")
    return float(expit(gamma[0] + gamma[1:] @ x))


@dataclass(frozen=True)
class LinearBasis:
    """Linear model through a fixed list of scalar basis functions."""

    functions: tuple
    names: tuple
    token: tuple = None  # stable cache key for builtin bases

    @property
    def n_params(self) -> int:
        return len(self.functions)

    def row(self, x: np.ndarray) -> np.ndarray:
        return np.array([f(x) for f in self.functions], dtype=float)


@dataclass(frozen=True)
class NonlinearModel:
    """Nonlinear response with analytic Jacobian and a prior on parameters.

    `transform` maps unit-cube variables t in [0,1]^p to the admissible
    parameter box; `priors` holds one density per t-coordinate.
    """

    response: Callable  # f(x, beta) -> float
    jacobian: Callable  # (x, beta) -> (p,) array of df/dbeta
    n_params: int
    transform: Callable  # t (p,) -> beta (p,)
    priors: tuple = ()
    beta_ref: np.ndarray | None = None  # nominal parameter for simulation defaults
    token: tuple = None

    def __post_init__(self):
        if not self.priors:
            object.__setattr__(self, "priors", tuple(Prior("uniform") for _ in range(self.n_params)))
        if len(self.priors) != self.n_params:
            raise ValueError("need one prior per parameter coordinate")

    def default_beta(self) -> np.ndarray:
        if self.beta_ref is not None:
            return np.asarray(self.beta_ref, dtype=float)
        return np.asarray(self.transform(np.full(self.n_params, 0.5)), dtype=float)


# ---------------------------------------------------------------------------
# Regressor-matrix construction (with a small cache keyed on builtin tokens)

_MATRIX_CACHE: dict = {}
_MATRIX_CACHE_MAX = 1024


def _space_key(space: DesignSpace) -> bytes:
    return space.points.tobytes()


def design_matrix(model, space: DesignSpace, beta=None) -> np.ndarray:
    """N x p regressor matrix: rows z(x_i) (linear) or df(x_i;beta)/dbeta.

    Rows with non-finite values raise a ValueError naming the offending
    point.  Results for builtin models are cached per (model, space, beta).
    """
    if isinstance(model, LinearBasis):
        key = None
        if model.token is not None:
            key = (model.token, _space_key(space), None)
            hit = _MATRIX_CACHE.get(key)
            if hit is not None:
                return hit
        rows = [_checked_row(model.row, x, i) for i, x in enumerate(space.points)]
    elif isinstance(model, NonlinearModel):
        if beta is None:
            raise ValueError("nonlinear model requires beta")
        beta = np.asarray(beta, dtype=float)
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite")
        key = None
        if model.token is not None:
            key = (model.token, _space_key(space), beta.tobytes())
            hit = _MATRIX_CACHE.get(key)
            if hit is not None:
                return hit
        rows = [_checked_row(lambda x: model.jacobian(x, beta), x, i) for i, x in enumerate(space.points)]
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    z = np.asarray(rows, dtype=float)
    z.setflags(write=False)
    if key is not None:
        if len(_MATRIX_CACHE) >= _MATRIX_CACHE_MAX:
            _MATRIX_CACHE.clear()
        _MATRIX_CACHE[key] = z
    return z


def _checked_row(fn, x: np.ndarray, index: int) -> np.ndarray:
    try:
        row = np.atleast_1d(np.asarray(fn(x), dtype=float))
    except Exception as exc:
        raise ValueError(f"basis/Jacobian evaluation failed at point {index} (x={x})") from exc
    if not np.all(np.isfinite(row)):
        raise ValueError(f"basis/Jacobian produced non-finite values at point {index} (x={x})")
    return row


def jacobian_check(model: NonlinearModel, beta, space: DesignSpace) -> float:
    """Max deviation of the analytic Jacobian from central finite differences.

    Deviations are measured relative to the largest analytic entry in the
    same row (floored at 1e-12), with step h_j = 1e-6 * (1 + |beta_j|).
    The caller decides what threshold to enforce.
    """
    beta = np.asarray(beta, dtype=float)
    analytic = design_matrix(model, space, beta)
    fd = np.zeros_like(analytic)
    for j in range(model.n_params):
        h = 1e-6 * (1.0 + abs(beta[j]))
        bp, bm = beta.copy(), beta.copy()
        bp[j] += h
        bm[j] -= h
        fp = np.array([model.response(x, bp) for x in space.points], dtype=float)
        fm = np.array([model.response(x, bm) for x in space.points], dtype=float)
        fd[:, j] = (fp - fm) / (2.0 * h)
    scale = np.maximum(np.abs(analytic).max(axis=1, keepdims=True), 1e-12)
    return float((np.abs(analytic - fd) / scale).max(initial=0.0))


# ---------------------------------------------------------------------------
# Builtin models

def polynomial_basis(degree: int) -> LinearBasis:
    """1, x, ..., x^degree in a single covariate."""
    if degree < 0:
        raise ValueError("degree must be >= 0")
    funcs = tuple((lambda x, d=d: float(x[0] ** d)) for d in range(degree + 1))
    names = tuple("1" if d == 0 else f"x^{d}" for d in range(degree + 1))
    return LinearBasis(functions=funcs, names=names, token=("polynomial", degree))


def quadratic2_basis() -> LinearBasis:
    """Full quadratic in two covariates: 1, x1, x2, x1*x2, x1^2, x2^2."""
    funcs = (
        lambda x: 1.0,
        lambda x: float(x[0]),
        lambda x: float(x[1]),
        lambda x: float(x[0] * x[1]),
        lambda x: float(x[0] ** 2),
        lambda x: float(x[1] ** 2),
    )
    names = ("1", "x1", "x2", "x1*x2", "x1^2", "x2^2")
    return LinearBasis(functions=funcs, names=names, token=("quadratic2",))


def exponential_model(
    beta0_offset: float = 28.5,
    beta0_scale: float = 57.0,
    beta1_offset: float = -0.02,
    beta1_scale: float = -0.04,
    priors: Sequence[Prior] = (),
    beta_ref: Sequence[float] = (56.7, -0.03797),
) -> NonlinearModel:
    """Two-parameter exponential response f(x; b) = b0 * exp(b1 * x).

    The unit-cube transform is affine per coordinate:
    b0 = beta0_offset + beta0_scale * t1, b1 = beta1_offset + beta1_scale * t2.
    The defaults put b0 in [28.5, 85.5] and b1 in [-0.06, -0.02].
    """

    def response(x, beta):
        return float(beta[0] * np.exp(beta[1] * x[0]))

    def jacobian(x, beta):
        e = np.exp(beta[1] * x[0])
        return np.array([e, beta[0] * x[0] * e], dtype=float)

    def transform(t):
        t = np.asarray(t, dtype=float)
        return np.array([beta0_offset + beta0_scale * t[0], beta1_offset + beta1_scale * t[1]])

    return NonlinearModel(
        response=response,
        jacobian=jacobian,
        n_params=2,
        transform=transform,
        priors=tuple(priors),
        beta_ref=np.asarray(beta_ref, dtype=float),
        token=("exponential", beta0_offset, beta0_scale, beta1_offset, beta1_scale),
    )
