"""Dense linear-algebra and quadrature kernels used by the design criteria.

Everything here is small (matrices of order N <= a few hundred, information
matrices of order p <= ~10) and favours robustness over raw speed: SPD solves
go through an explicit Cholesky with a pivot check, top eigenpairs come from
a full symmetric eigendecomposition, and quadrature rules are Gauss-Legendre
with the prior density folded into the weights.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import betaln

__all__ = [
    "SingularInformation",
    "SymTopEig",
    "QuadratureRule",
    "Prior",
    "cholesky_spd",
    "spd_solve",
    "sym_top_eig",
    "orthonormal_complement",
    "quadrature_rule",
]

# Relative pivot tolerance: a Cholesky pivot <= PIVOT_RTOL * trace(A)/p is
# treated as a singular (infeasible) information matrix.
PIVOT_RTOL = 1e-12

# Below this top-eigenvalue gap ratio the eigenvector is not well determined.
DEGENERATE_GAP = 1e-8


class SingularInformation(Exception):
    """Weighted information matrix is numerically singular.

    Carries the index of the offending Cholesky pivot so callers can report
    which direction of the parameter space is unsupported.
    """

    def __init__(self, message: str, pivot_index: int | None = None):
        super().__init__(message)
        self.pivot_index = pivot_index


@dataclass(frozen=True)
class SymTopEig:
    """Top eigenpair of a symmetric PSD matrix.

    lambda_max is the largest eigenvalue, v1 the corresponding unit
    eigenvector under the sign convention that its largest-magnitude
    component is non-negative, and gap_ratio = (l1 - l2)/max(l1, eps)
    flags near-degeneracy (0 means fully degenerate).
    """

    lambda_max: float
    v1: np.ndarray
    gap_ratio: float


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre nodes on (0,1) with prior-weighted weights."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def count(self) -> int:
        return self.nodes.size


@dataclass(frozen=True)
class Prior:
    """Prior density on [0,1]: uniform or Beta(a,b)."""

    kind: str  # "uniform" | "beta"
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "beta"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "beta" and (self.a <= 0 or self.b <= 0):
            raise ValueError("Beta prior requires a > 0 and b > 0")

    def density(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "uniform":
            return np.ones_like(t)
        log_norm = betaln(self.a, self.b)
        return np.exp((self.a - 1.0) * np.log(t) + (self.b - 1.0) * np.log1p(-t) - log_norm)


def cholesky_spd(a: np.ndarray, rtol: float = PIVOT_RTOL) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises SingularInformation (with the pivot index) when a pivot falls at
    or below rtol * trace(a)/p, instead of numpy's generic LinAlgError.
    """
    a = np.asarray(a, dtype=float)
    p = a.shape[0]
    if a.shape != (p, p):
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    floor = rtol * max(np.trace(a), 0.0) / max(p, 1)
    lower = np.zeros_like(a)
    for k in range(p):
        pivot = a[k, k] - lower[k, :k] @ lower[k, :k]
        if not np.isfinite(pivot) or pivot <= floor:
            raise SingularInformation(
                f"information matrix is singular at pivot {k} (pivot={pivot:.3e})",
                pivot_index=k,
            )
        lower[k, k] = np.sqrt(pivot)
        if k + 1 < p:
            lower[k + 1 :, k] = (a[k + 1 :, k] - lower[k + 1 :, :k] @ lower[k, :k]) / lower[k, k]
    return lower


def _check_symmetric(a: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    scale = np.abs(a).max() if a.size else 0.0
    if scale > 0 and np.abs(a - a.T).max() > rtol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return 0.5 * (a + a.T)


def spd_solve(a: np.ndarray, b: np.ndarray, rtol: float = PIVOT_RTOL) -> np.ndarray:
    """Solve A X = B for symmetric positive-definite A via Cholesky."""
    a = _check_symmetric(a)
    lower = cholesky_spd(a, rtol=rtol)
    y = solve_triangular(lower, b, lower=True)
    return solve_triangular(lower.T, y, lower=False)


def sym_top_eig(a: np.ndarray) -> SymTopEig:
    """Largest eigenvalue and unit eigenvector of a symmetric matrix.

    Uses a full symmetric eigendecomposition for order <= 512 (the sizes this
    package meets) and a shifted power iteration above that.  A degenerate top
    eigenvalue (gap ratio < 1e-8) triggers a warning; the deterministic
    eigenvector under the sign convention is still returned.
    """
    a = _check_symmetric(a)
    n = a.shape[0]
    if n <= 512:
        eigvals, eigvecs = np.linalg.eigh(a)
        lam1 = float(eigvals[-1])
        lam2 = float(eigvals[-2]) if n > 1 else 0.0
        v1 = eigvecs[:, -1]
    else:
        lam1, v1, lam2 = _power_top_eig(a)
    v1 = _fix_sign(v1)
    gap_ratio = (lam1 - lam2) / max(lam1, 1e-30)
    if gap_ratio < DEGENERATE_GAP:
        warnings.warn(
            "top eigenvalue is numerically degenerate; eigenvector is not unique",
            RuntimeWarning,
            stacklevel=2,
        )
    return SymTopEig(lambda_max=lam1, v1=v1, gap_ratio=gap_ratio)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    idx = int(np.argmax(np.abs(v)))
    return -v if v[idx] < 0 else v.copy()


def _power_top_eig(a: np.ndarray, iters: int = 5000, tol: float = 1e-12):
    # Shift by trace to make the dominant eigenvalue the largest in magnitude.
    n = a.shape[0]
    shift = np.abs(a).sum()
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = a @ v + shift * v
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        w /= nw
        lam_new = float(w @ a @ w)
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1.0):
            v = w
            lam = lam_new
            break
        v, lam = w, lam_new
    # Deflate once for the runner-up, for the gap ratio only.
    b = a - lam * np.outer(v, v)
    w = rng.standard_normal(n)
    w -= (w @ v) * v
    w /= np.linalg.norm(w)
    lam2 = lam
    for _ in range(iters):
        u = b @ w + shift * w
        u -= (u @ v) * v
        nu = np.linalg.norm(u)
        if nu == 0:
            break
        u /= nu
        lam2_new = float(u @ a @ u)
        if abs(lam2_new - lam2) <= tol * max(abs(lam2_new), 1.0):
            lam2 = lam2_new
            break
        w, lam2 = u, lam2_new
    return lam, v, lam2


def orthonormal_complement(z: np.ndarray, rank: int | None = None) -> np.ndarray:
    """Orthonormal basis K of the orthogonal complement of the column space.

    K is N x (N - r) with K'K = I and Z'K = 0, where r is the numerical rank
    of Z at tolerance 1e-10 * ||Z|| (or the supplied rank).  r = N yields an
    N x 0 matrix.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = z.shape[0]
    u, s, _ = np.linalg.svd(z, full_matrices=True)
    if rank is None:
        tol = 1e-10 * (s[0] if s.size else 0.0)
        rank = int(np.sum(s > tol))
    return u[:, rank:]


def quadrature_rule(prior: Prior | str, count: int = 16, a: float | None = None, b: float | None = None) -> QuadratureRule:
    """Prior-weighted Gauss-Legendre rule on (0,1).

    `prior` may be a Prior or one of the strings "uniform" / "beta" (with
    a, b supplied).  Weights are the Gauss-Legendre weights times the prior
    density at each node, so sum(weights) approximates the prior's total
    mass 1; for count >= 16 this must hold within 1e-8 or the rule is
    rejected.
    """
    if isinstance(prior, str):
        if prior == "beta":
            if a is None or b is None:
                raise ValueError("beta prior requires a and b")
            prior = Prior("beta", a=a, b=b)
        elif prior == "uniform":
            prior = Prior("uniform")
        else:
            raise ValueError(f"unknown prior kind {prior!r}")
    if count < 2:
        raise ValueError("quadrature rule needs at least 2 nodes")
    x, w = np.polynomial.legendre.leggauss(count)
    nodes = 0.5 * (x + 1.0)
    weights = 0.5 * w * prior.density(nodes)
    total = weights.sum()
    if count >= 16 and abs(total - 1.0) > 1e-8:
        raise ValueError(f"prior density does not integrate to 1 (got {total!r})")
    return QuadratureRule(nodes=nodes, weights=weights)
