"""Robust prediction-loss criteria for designs under MCAR missingness.

The exact worst-case criterion for a realized missingness pattern with
observed counts k is

    (eta^2/(N n)) * (Ch_max(D_k R(k)^2 D_k) + 1) + (sigma^2/N) * tr R(k),

with R(k) = Z (Z' D_k Z)^{-1} Z'.  Expectations over patterns are taken by
exact enumeration (product-binomial weights, conditioned on nonsingular
patterns) or Monte Carlo.  The Taylor-approximated criterion used for design
optimization replaces the expectation with the no-missingness value plus two
first-order corrections weighted by a diagonal matrix C:

    variant "derivation-consistent":  C = D_xi (I - P)   (vanishes when P = I)
    variant "paper-literal":          C = I - D_xi P

Both variants are exposed; the derivation-consistent form is the default and
the paper-literal form is kept for reproducing published figures.

Internally everything is computed through the rank-p reduction: the nonzero
eigenvalues of D R^2 D are those of L' (G^{-1} W G^{-1}) L where G = Z'DZ,
W = Z'Z and Z'D^2Z = LL'.  This makes a criterion evaluation O(N p^2 + p^3)
instead of O(N^3), which is what makes swarm optimization affordable.  The
reduction is property-tested against the dense kernels in `numerics`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import binom

from .model import Design, ExactDesign, MissingPattern
from .numerics import (
    PIVOT_RTOL,
    DEGENERATE_GAP,
    SingularInformation,
    cholesky_spd,
    orthonormal_complement,
    spd_solve,
    sym_top_eig,
)

__all__ = [
    "VARIANT_DERIVATION",
    "VARIANT_PAPER",
    "HatMatrices",
    "LossReport",
    "WorstCase",
    "ExpectedMmpe",
    "BayesNodes",
    "hat",
    "mmpe_max_given_pattern",
    "expected_mmpe_max",
    "taylor_loss",
    "nonlinear_taylor_loss",
    "prepare_bayes_nodes",
    "bayesian_loss",
    "bayesian_report",
    "worst_case_contamination",
]

VARIANT_DERIVATION = "derivation-consistent"
VARIANT_PAPER = "paper-literal"

_VARIANT_ALIASES = {
    "derivation": VARIANT_DERIVATION,
    "derivation-consistent": VARIANT_DERIVATION,
    "paper": VARIANT_PAPER,
    "paper-literal": VARIANT_PAPER,
}

_ENUMERATE_LIMIT = 1_000_000
_CHUNK = 65_536


def resolve_variant(variant: str) -> str:
    try:
        return _VARIANT_ALIASES[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}") from None


# ---------------------------------------------------------------------------
# Result types

@dataclass(frozen=True)
class HatMatrices:
    """Hat matrix R = Z (Z'DZ)^{-1} Z' with its diagonal weights and info."""

    R: np.ndarray      # (N, N)
    D: np.ndarray      # (N,) diagonal of the weighting
    info: np.ndarray   # (p, p) = Z'DZ


@dataclass(frozen=True)
class LossReport:
    """Value and term-by-term breakdown of the Taylor design criterion."""

    total: float
    bias_eig_term: float
    variance_term: float
    constant_term: float
    bias_correction: float
    variance_correction: float
    variant: str
    eig_gap_ratio: float

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "bias_eig_term": self.bias_eig_term,
            "variance_term": self.variance_term,
            "constant_term": self.constant_term,
            "bias_correction": self.bias_correction,
            "variance_correction": self.variance_correction,
            "variant": self.variant,
            "eig_gap_ratio": self.eig_gap_ratio,
        }


@dataclass(frozen=True)
class WorstCase:
    """Least-favorable contamination and the loss it attains."""

    psi: np.ndarray
    value: float
    lambda_max: float
    e_tr_r: float
    mode: str


@dataclass(frozen=True)
class ExpectedMmpe:
    """Expectation of the maximized per-pattern criterion over patterns."""

    value: float
    se: float
    e_chmax: float
    e_tr_r: float
    mode: str
    n_evaluated: int
    n_singular: int
    singular_mass: float


@dataclass(frozen=True)
class BayesNodes:
    """Precomputed quadrature nodes for Bayesian criterion averaging."""

    t_points: np.ndarray   # (B, m) unit-cube nodes
    weights: np.ndarray    # (B,)
    zs: np.ndarray         # (B, N, p) Jacobian matrices Z(beta(t))
    w: np.ndarray          # (B, p, p) = Z'Z per node


# ---------------------------------------------------------------------------
# Batched rank-p core

@dataclass
class _CoreStats:
    feasible: np.ndarray      # (B,) bool
    tr_r: np.ndarray          # (B,)
    ch_max: np.ndarray        # (B,)
    gap_ratio: np.ndarray     # (B,)
    v1: np.ndarray | None     # (B, N)
    diag_r2: np.ndarray | None
    diag_a: np.ndarray | None


def _core_stats(zs: np.ndarray, ds: np.ndarray, want_vectors: bool = False,
                w: np.ndarray | None = None) -> _CoreStats:
    """Evaluate tr R, Ch_max(D R^2 D) and friends for a batch of (Z, d) pairs.

    `zs` is (N, p) or (B, N, p); `ds` is (N,) or (B, N); singletons broadcast.
    Infeasible items (singular Z'DZ) are masked, not raised.  For p = 2 all
    factorizations use closed forms (no per-item LAPACK dispatch), which the
    nonlinear two-parameter models rely on for speed.
    """
    zs = np.asarray(zs, dtype=float)
    ds = np.asarray(ds, dtype=float)
    if zs.ndim == 2:
        zs = zs[None]
    if ds.ndim == 1:
        ds = ds[None]
    b = max(zs.shape[0], ds.shape[0])
    n, p = zs.shape[1], zs.shape[2]
    zs = np.broadcast_to(zs, (b, n, p))
    ds = np.broadcast_to(ds, (b, n))
    if w is None:
        w = np.matmul(np.swapaxes(zs, -1, -2), zs)
    elif w.ndim == 2:
        w = np.broadcast_to(w[None], (b, p, p))

    g = np.einsum("bnp,bn,bnq->bpq", zs, ds, zs)
    b2 = np.einsum("bnp,bn,bnq->bpq", zs, ds * ds, zs)
    if p == 2:
        return _finish_p2(zs, ds, g, b2, w, want_vectors)
    return _finish_lapack(zs, ds, g, b2, w, want_vectors)


def _finish_lapack(zs, ds, g, b2, w, want_vectors) -> _CoreStats:
    b, n, p = zs.shape
    eig_g = np.linalg.eigvalsh(g)
    eig_b2 = np.linalg.eigvalsh(b2)
    floor = PIVOT_RTOL * np.einsum("bii->b", g) / p
    feasible = (eig_g[:, 0] > floor) & (eig_b2[:, 0] > 0.0)

    tr_r = np.full(b, np.nan)
    ch = np.full(b, np.nan)
    gap = np.full(b, np.nan)
    v1 = diag_r2 = diag_a = None
    if want_vectors:
        v1 = np.full((b, n), np.nan)
        diag_r2 = np.full((b, n), np.nan)
        diag_a = np.full((b, n), np.nan)
    if not np.any(feasible):
        return _CoreStats(feasible, tr_r, ch, gap, v1, diag_r2, diag_a)

    idx = np.flatnonzero(feasible)
    gf = g[idx]
    wf = w[idx]
    ginv_w = np.linalg.solve(gf, wf)
    tr_r[idx] = np.einsum("bii->b", ginv_w)
    s = np.linalg.solve(gf, np.swapaxes(ginv_w, -1, -2))
    s = 0.5 * (s + np.swapaxes(s, -1, -2))
    lo = np.linalg.cholesky(b2[idx])
    m = np.swapaxes(lo, -1, -2) @ s @ lo
    m = 0.5 * (m + np.swapaxes(m, -1, -2))
    if want_vectors:
        mu, y = np.linalg.eigh(m)
    else:
        mu = np.linalg.eigvalsh(m)
        y = None
    ch[idx] = mu[:, -1]
    if p >= 2:
        lam2 = mu[:, -2]
    else:
        lam2 = np.zeros(len(idx))
    if n > p:
        # Full N x N spectrum is padded with zeros.
        lam2 = np.maximum(lam2, 0.0)
    gap[idx] = (mu[:, -1] - lam2) / np.maximum(mu[:, -1], 1e-30)

    if want_vectors:
        zf = zs[idx]
        df = ds[idx]
        w1 = np.linalg.solve(np.swapaxes(lo, -1, -2), y[:, :, -1][..., None])[..., 0]
        t = np.swapaxes(np.linalg.solve(gf, np.swapaxes(zf, -1, -2)), -1, -2)  # Z G^{-1}
        v1[idx], diag_r2[idx], diag_a[idx] = _vector_stats(zf, df, wf, t, w1)
    return _CoreStats(feasible, tr_r, ch, gap, v1, diag_r2, diag_a)


def _vector_stats(zf, df, wf, t, w1):
    """Top eigenvector of D R^2 D plus correction diagonals, given w1, T."""
    vecs = df * np.einsum("bnp,bp->bn", zf, w1)
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    flip = np.take_along_axis(
        vecs, np.argmax(np.abs(vecs), axis=1)[:, None], axis=1
    )[:, 0] < 0
    vecs[flip] *= -1.0
    diag_r2 = np.einsum("bnp,bnp->bn", t @ wf, t)
    r_v1 = np.einsum("bnp,bp->bn", t, np.einsum("bnp,bn->bp", zf, vecs))
    rd_v1 = np.einsum("bnp,bp->bn", t, np.einsum("bnp,bn->bp", zf, df * vecs))
    diag_a = (vecs - rd_v1) * r_v1
    return vecs, diag_r2, diag_a


def _eig2_range(m):
    """Eigenvalues (ascending) of stacked symmetric 2x2 matrices."""
    tr = m[:, 0, 0] + m[:, 1, 1]
    disc = np.sqrt(np.maximum((m[:, 0, 0] - m[:, 1, 1]) ** 2 + 4.0 * m[:, 0, 1] ** 2, 0.0))
    return 0.5 * (tr - disc), 0.5 * (tr + disc)


def _finish_p2(zs, ds, g, b2, w, want_vectors) -> _CoreStats:
    """Closed-form 2x2 specialization of `_finish_lapack` (same outputs)."""
    b, n, _ = zs.shape
    g_lo, _ = _eig2_range(g)
    b2_lo, _ = _eig2_range(b2)
    floor = PIVOT_RTOL * (g[:, 0, 0] + g[:, 1, 1]) / 2.0
    feasible = (g_lo > floor) & (b2_lo > 0.0)

    tr_r = np.full(b, np.nan)
    ch = np.full(b, np.nan)
    gap = np.full(b, np.nan)
    v1 = diag_r2 = diag_a = None
    if want_vectors:
        v1 = np.full((b, n), np.nan)
        diag_r2 = np.full((b, n), np.nan)
        diag_a = np.full((b, n), np.nan)
    if not np.any(feasible):
        return _CoreStats(feasible, tr_r, ch, gap, v1, diag_r2, diag_a)

    idx = np.flatnonzero(feasible)
    gf = g[idx]
    wf = w[idx]
    b2f = b2[idx]

    det_g = gf[:, 0, 0] * gf[:, 1, 1] - gf[:, 0, 1] * gf[:, 1, 0]
    ginv = np.empty_like(gf)
    ginv[:, 0, 0] = gf[:, 1, 1]
    ginv[:, 1, 1] = gf[:, 0, 0]
    ginv[:, 0, 1] = -gf[:, 0, 1]
    ginv[:, 1, 0] = -gf[:, 1, 0]
    ginv /= det_g[:, None, None]
    ginv_w = ginv @ wf
    tr_r[idx] = ginv_w[:, 0, 0] + ginv_w[:, 1, 1]
    s = ginv_w @ ginv
    s = 0.5 * (s + np.swapaxes(s, -1, -2))

    # Cholesky of B2 = [[a, c], [c, e]]: L = [[sa, 0], [c/sa, sqrt(e - c^2/a)]].
    sa = np.sqrt(b2f[:, 0, 0])
    l10 = b2f[:, 1, 0] / sa
    l11 = np.sqrt(np.maximum(b2f[:, 1, 1] - l10 * l10, 0.0))
    lo = np.zeros_like(b2f)
    lo[:, 0, 0] = sa
    lo[:, 1, 0] = l10
    lo[:, 1, 1] = l11
    m = np.swapaxes(lo, -1, -2) @ s @ lo
    m = 0.5 * (m + np.swapaxes(m, -1, -2))
    mu_lo, mu_hi = _eig2_range(m)
    ch[idx] = mu_hi
    lam2 = np.maximum(mu_lo, 0.0) if n > 2 else mu_lo
    gap[idx] = (mu_hi - lam2) / np.maximum(mu_hi, 1e-30)

    if want_vectors:
        # Eigenvector of m for the larger eigenvalue, stable branch choice.
        y = np.empty((len(idx), 2))
        a_, c_, e_ = m[:, 0, 0], m[:, 0, 1], m[:, 1, 1]
        use_first = np.abs(mu_hi - e_) >= np.abs(mu_hi - a_)
        y[:, 0] = np.where(use_first, mu_hi - e_, c_)
        y[:, 1] = np.where(use_first, c_, mu_hi - a_)
        degenerate = np.linalg.norm(y, axis=1) <= 0.0
        y[degenerate, 0] = 1.0
        y[degenerate, 1] = 0.0
        y /= np.linalg.norm(y, axis=1, keepdims=True)
        # Back-substitution for L' w1 = y.
        w1 = np.empty_like(y)
        w1[:, 1] = y[:, 1] / lo[:, 1, 1]
        w1[:, 0] = (y[:, 0] - lo[:, 1, 0] * w1[:, 1]) / lo[:, 0, 0]
        t = zs[idx] @ ginv
        v1[idx], diag_r2[idx], diag_a[idx] = _vector_stats(zs[idx], ds[idx], wf, t, w1)
    return _CoreStats(feasible, tr_r, ch, gap, v1, diag_r2, diag_a)


def _single_core(z: np.ndarray, d: np.ndarray, want_vectors: bool) -> _CoreStats:
    stats = _core_stats(z, d, want_vectors=want_vectors)
    if not stats.feasible[0]:
        # Recover the pivot index for the error message.
        g = (z * d[:, None]).T @ z
        try:
            cholesky_spd(g)
        except SingularInformation:
            raise
        raise SingularInformation("weighted information matrix is numerically singular")
    return stats


def _check_retention(retention, n: int) -> np.ndarray:
    r = np.asarray(retention, dtype=float)
    if r.shape != (n,):
        raise ValueError(f"retention must be a vector of length {n}")
    if np.any(r <= 0.0) or np.any(r > 1.0) or not np.all(np.isfinite(r)):
        raise ValueError("retention probabilities must lie in (0, 1]")
    return r


# ---------------------------------------------------------------------------
# Reference hat-matrix path

def hat(z: np.ndarray, d: np.ndarray) -> HatMatrices:
    """Hat matrices R = Z (Z'DZ)^{-1} Z' for diagonal weights d.

    Raises SingularInformation when the weighted support does not span the
    parameter space.  The returned matrices satisfy R = R', R D R = R and
    tr(D R) = p; gross violations raise.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    d = np.asarray(d, dtype=float)
    n, p = z.shape
    if d.shape != (n,) or np.any(d < 0):
        raise ValueError("d must be a non-negative vector matching Z's rows")
    info = (z * d[:, None]).T @ z
    r = z @ spd_solve(info, z.T)
    r = 0.5 * (r + r.T)
    scale = np.abs(r).max()
    if np.abs(r @ (d[:, None] * r) - r).max() > 1e-8 * scale:
        raise SingularInformation("hat matrix fails the projection identity R D R = R")
    if abs(float(np.sum(d * np.diag(r))) - p) > 1e-8 * max(1.0, p):
        raise SingularInformation("trace(D R) deviates from p")
    return HatMatrices(R=r, D=d, info=info)


# ---------------------------------------------------------------------------
# Exact per-pattern criterion and its expectation over patterns

def mmpe_max_given_pattern(z, pattern, eta2: float, sigma2: float, n: int) -> float:
    """Maximized criterion for a single realized missingness pattern.

    Value = (eta2/(N n)) * (Ch_max(D_k R^2 D_k) + 1) + (sigma2/N) * tr R(k),
    where k holds the observed counts.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if isinstance(pattern, MissingPattern):
        k = pattern.observed_counts
    else:
        k = np.asarray(pattern)
    k = k.astype(float)
    big_n = z.shape[0]
    stats = _single_core(z, k, want_vectors=False)
    return float(
        eta2 / (big_n * n) * (stats.ch_max[0] + 1.0) + sigma2 / big_n * stats.tr_r[0]
    )


def _counts_from(design, n_points: int) -> tuple[np.ndarray, int]:
    if isinstance(design, ExactDesign):
        return design.counts.copy(), design.n
    if isinstance(design, Design):
        counts = np.rint(design.n * design.weights).astype(int)
        return counts, design.n
    counts = np.asarray(design)
    if counts.shape != (n_points,) or np.any(counts < 0):
        raise ValueError("counts must be non-negative and match the space size")
    return counts.astype(int), int(counts.sum())


def _enumerate_patterns(counts: np.ndarray) -> np.ndarray:
    sizes = [int(c) + 1 for c in counts]
    total = int(np.prod(sizes))
    if total > _ENUMERATE_LIMIT:
        raise ValueError(
            f"enumeration over {total} patterns exceeds the {_ENUMERATE_LIMIT} limit; "
            "use monte_carlo mode"
        )
    grids = np.meshgrid(*[np.arange(s) for s in sizes], indexing="ij")
    return np.stack([grid.ravel() for grid in grids], axis=1)


def _pattern_weights(patterns: np.ndarray, counts: np.ndarray, retention: np.ndarray) -> np.ndarray:
    weights = np.ones(patterns.shape[0])
    for i, (ni, pi) in enumerate(zip(counts, retention)):
        pmf = binom.pmf(np.arange(int(ni) + 1), int(ni), pi)
        weights *= pmf[patterns[:, i]]
    return weights


def _batched_values(z, patterns, eta2, sigma2, n):
    """Per-pattern criterion values over a batch; returns masks and parts."""
    big_n = z.shape[0]
    b = patterns.shape[0]
    tr_all = np.full(b, np.nan)
    ch_all = np.full(b, np.nan)
    feas = np.zeros(b, dtype=bool)
    w = z.T @ z
    for lo in range(0, b, _CHUNK):
        hi = min(lo + _CHUNK, b)
        stats = _core_stats(z, patterns[lo:hi].astype(float), w=w)
        feas[lo:hi] = stats.feasible
        tr_all[lo:hi] = stats.tr_r
        ch_all[lo:hi] = stats.ch_max
    values = eta2 / (big_n * n) * (ch_all + 1.0) + sigma2 / big_n * tr_all
    return values, feas, tr_all, ch_all


def _pattern_matrix_expectation(z, patterns, weights) -> np.ndarray:
    """Weighted average of D_k R(k)^2 D_k over the given feasible patterns."""
    big_n = z.shape[0]
    w = z.T @ z
    out = np.zeros((big_n, big_n))
    for pat, wt in zip(patterns, weights):
        d = pat.astype(float)
        g = (z * d[:, None]).T @ z
        ginv_w = np.linalg.solve(g, w)
        s = np.linalg.solve(g, ginv_w.T)
        dz = d[:, None] * z
        out += wt * (dz @ s @ dz.T)
    return 0.5 * (out + out.T)


def _substream(seed, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), int(rep))))


def expected_mmpe_max(
    z,
    design,
    retention,
    eta2: float,
    sigma2: float,
    mode: str = "enumerate",
    reps: int = 20_000,
    seed: int = 0,
) -> ExpectedMmpe:
    """Expectation over missingness patterns of the maximized criterion.

    "enumerate" sums over all observed-count vectors with product-binomial
    weights, conditioning on nonsingular patterns and renormalizing;
    "monte_carlo" draws k_i ~ Binomial(n_i, p_i) with per-replicate seeded
    substreams, discarding (and counting) singular draws.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    big_n = z.shape[0]
    counts, n = _counts_from(design, big_n)
    retention = _check_retention(retention, big_n)

    if mode == "enumerate":
        patterns = _enumerate_patterns(counts)
        weights = _pattern_weights(patterns, counts, retention)
        values, feas, tr_all, ch_all = _batched_values(z, patterns, eta2, sigma2, n)
        mass = float(weights[feas].sum())
        if mass <= 0.0:
            raise SingularInformation("every missingness pattern is singular for this design")
        wn = weights[feas] / mass
        return ExpectedMmpe(
            value=float(wn @ values[feas]),
            se=0.0,
            e_chmax=float(wn @ ch_all[feas]),
            e_tr_r=float(wn @ tr_all[feas]),
            mode="enumerate",
            n_evaluated=int(patterns.shape[0]),
            n_singular=int(np.sum(~feas)),
            singular_mass=float(1.0 - mass),
        )

    if mode != "monte_carlo":
        raise ValueError(f"unknown mode {mode!r}")
    draws = np.empty((reps, big_n), dtype=int)
    for rep in range(reps):
        rng = _substream(seed, rep)
        draws[rep] = rng.binomial(counts, retention)
    unique, inverse = np.unique(draws, axis=0, return_inverse=True)
    uvalues, ufeas, utr, uch = _batched_values(z, unique, eta2, sigma2, n)
    accepted = ufeas[inverse]
    n_singular = int(np.sum(~accepted))
    if n_singular > reps // 2:
        raise SingularInformation(
            f"{n_singular}/{reps} Monte-Carlo patterns were singular; "
            "design is incompatible with the missingness model"
        )
    vals = uvalues[inverse][accepted]
    se = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else float("inf")
    return ExpectedMmpe(
        value=float(vals.mean()),
        se=se,
        e_chmax=float(uch[inverse][accepted].mean()),
        e_tr_r=float(utr[inverse][accepted].mean()),
        mode="monte_carlo",
        n_evaluated=int(reps),
        n_singular=n_singular,
        singular_mass=n_singular / reps,
    )


# ---------------------------------------------------------------------------
# Taylor-approximated design criteria

def _assemble_terms(stats: _CoreStats, ds, retention, eta2, sigma2, n, variant):
    """Five-term breakdown per batch item from core statistics."""
    ds = np.atleast_2d(ds)
    big_n = ds.shape[1]
    bias_eig = eta2 / (big_n * n) * stats.ch_max
    variance = sigma2 / big_n * stats.tr_r
    constant = np.full_like(bias_eig, eta2 / (big_n * n))
    if variant == VARIANT_DERIVATION:
        c = ds * (1.0 - retention)
    else:
        c = 1.0 - ds * retention
    var_corr = sigma2 / big_n * np.einsum("bn,bn->b", c, stats.diag_r2)
    if eta2 > 0.0:
        bias_corr = -2.0 * eta2 / (big_n * n) * np.einsum("bn,bn->b", c, stats.diag_a)
    else:
        bias_corr = np.zeros_like(bias_eig)
    return bias_eig, variance, constant, bias_corr, var_corr


def _warn_if_degenerate(gap_ratio: float) -> None:
    if gap_ratio < DEGENERATE_GAP:
        warnings.warn(
            "top eigenvalue of the bias term is numerically degenerate",
            RuntimeWarning,
            stacklevel=3,
        )


def taylor_loss(
    z,
    design: Design,
    retention,
    eta2: float,
    sigma2: float,
    variant: str = VARIANT_DERIVATION,
) -> LossReport:
    """Taylor-approximated robust loss of a (possibly fractional) design.

    The report carries the five addends; their sum is the total.  With no
    missingness (retention all 1) the derivation-consistent corrections are
    exactly zero.
    """
    variant = resolve_variant(variant)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    big_n = z.shape[0]
    retention = _check_retention(retention, big_n)
    d = design.scaled_weights()
    stats = _single_core(z, d, want_vectors=True)
    _warn_if_degenerate(float(stats.gap_ratio[0]))
    terms = _assemble_terms(stats, d[None], retention, eta2, sigma2, design.n, variant)
    bias_eig, variance, constant, bias_corr, var_corr = (float(t[0]) for t in terms)
    return LossReport(
        total=bias_eig + variance + constant + bias_corr + var_corr,
        bias_eig_term=bias_eig,
        variance_term=variance,
        constant_term=constant,
        bias_correction=bias_corr,
        variance_correction=var_corr,
        variant=variant,
        eig_gap_ratio=float(stats.gap_ratio[0]),
    )


def nonlinear_taylor_loss(
    model,
    space,
    beta,
    design: Design,
    retention,
    eta2: float,
    sigma2: float,
    variant: str = VARIANT_DERIVATION,
) -> LossReport:
    """Taylor loss for a nonlinear model at a fixed parameter value.

    Identical formula with Z replaced by the Jacobian matrix Z(beta); the
    zeroth-order variance term uses tr R(beta; xi).
    """
    from .model import design_matrix

    z = design_matrix(model, space, beta)
    return taylor_loss(z, design, retention, eta2, sigma2, variant=variant)


def prepare_bayes_nodes(model, space, count: int = 16, rules=None) -> BayesNodes:
    """Tensor-product quadrature nodes with Jacobians evaluated per node.

    Build once per (model, space, rule) and reuse across criterion calls; the
    node Jacobians do not depend on the design.
    """
    from .model import design_matrix
    from .numerics import quadrature_rule

    if rules is None:
        rules = tuple(quadrature_rule(prior, count) for prior in model.priors)
    if len(rules) != model.n_params:
        raise ValueError("need one quadrature rule per parameter coordinate")
    grids = np.meshgrid(*[r.nodes for r in rules], indexing="ij")
    t_points = np.stack([g.ravel() for g in grids], axis=1)
    wgrids = np.meshgrid(*[r.weights for r in rules], indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    zs = np.stack([design_matrix(model, space, model.transform(t)) for t in t_points])
    w = np.matmul(np.swapaxes(zs, -1, -2), zs)
    return BayesNodes(t_points=t_points, weights=weights, zs=zs, w=w)


def _bayes_terms(nodes: BayesNodes, design: Design, retention, eta2, sigma2, variant):
    d = design.scaled_weights()
    stats = _core_stats(nodes.zs, d, want_vectors=True, w=nodes.w)
    if not np.all(stats.feasible):
        bad = int(np.flatnonzero(~stats.feasible)[0])
        raise SingularInformation(
            f"singular information at quadrature node {bad} (t={nodes.t_points[bad]})"
        )
    terms = _assemble_terms(stats, d[None], retention, eta2, sigma2, design.n, variant)
    return terms, stats


def bayesian_loss(
    model,
    space,
    design: Design,
    retention,
    eta2: float,
    sigma2: float,
    count: int = 16,
    rules=None,
    nodes: BayesNodes | None = None,
    variant: str = VARIANT_DERIVATION,
) -> float:
    """Prior-averaged Taylor loss: tensor quadrature over beta(t1,...,tm)."""
    variant = resolve_variant(variant)
    if nodes is None:
        nodes = prepare_bayes_nodes(model, space, count=count, rules=rules)
    retention = _check_retention(retention, nodes.zs.shape[1])
    terms, _ = _bayes_terms(nodes, design, retention, eta2, sigma2, variant)
    totals = sum(terms)
    return float(nodes.weights @ totals)


def bayesian_report(
    model,
    space,
    design: Design,
    retention,
    eta2: float,
    sigma2: float,
    count: int = 16,
    rules=None,
    nodes: BayesNodes | None = None,
    variant: str = VARIANT_DERIVATION,
) -> LossReport:
    """Term-wise quadrature average of the nonlinear loss as a LossReport.

    eig_gap_ratio reports the smallest gap ratio across nodes (the most
    degenerate node encountered).
    """
    variant = resolve_variant(variant)
    if nodes is None:
        nodes = prepare_bayes_nodes(model, space, count=count, rules=rules)
    retention = _check_retention(retention, nodes.zs.shape[1])
    terms, stats = _bayes_terms(nodes, design, retention, eta2, sigma2, variant)
    avg = [float(nodes.weights @ t) for t in terms]
    return LossReport(
        total=sum(avg),
        bias_eig_term=avg[0],
        variance_term=avg[1],
        constant_term=avg[2],
        bias_correction=avg[3],
        variance_correction=avg[4],
        variant=variant,
        eig_gap_ratio=float(np.min(stats.gap_ratio)),
    )


# ---------------------------------------------------------------------------
# Objective wrappers for the swarm optimizer
#
# These expose the scalar Design -> float contract plus a vectorized `batch`
# path evaluating a whole swarm of weight vectors in stacked linear algebra.
# Both paths run the identical operations item-by-item, so they agree
# bitwise; infeasible designs score +inf.

def _totals_batch(stats: _CoreStats, ds, retention, eta2, sigma2, n, variant) -> np.ndarray:
    terms = _assemble_terms(stats, ds, retention, eta2, sigma2, n, variant)
    totals = terms[0] + terms[1] + terms[2] + terms[3] + terms[4]
    return np.where(stats.feasible, totals, np.inf)


class TaylorObjective:
    """Linear-model design criterion with a vectorized swarm path."""

    def __init__(self, z, retention, eta2: float, sigma2: float, n: int,
                 variant: str = VARIANT_DERIVATION):
        self.z = np.atleast_2d(np.asarray(z, dtype=float))
        self.retention = _check_retention(retention, self.z.shape[0])
        self.eta2 = float(eta2)
        self.sigma2 = float(sigma2)
        self.n = int(n)
        self.variant = resolve_variant(variant)

    def __call__(self, design: Design) -> float:
        return self.report(design).total

    def report(self, design: Design) -> LossReport:
        return taylor_loss(self.z, design, self.retention, self.eta2,
                           self.sigma2, variant=self.variant)

    def batch(self, weights: np.ndarray) -> np.ndarray:
        ds = self.n * np.atleast_2d(weights)
        stats = _core_stats(self.z, ds, want_vectors=True)
        return _totals_batch(stats, ds, self.retention, self.eta2,
                             self.sigma2, self.n, self.variant)


class BayesObjective:
    """Prior-averaged nonlinear design criterion with a swarm batch path.

    For two-parameter models the batch path runs entirely on closed-form 2x2
    algebra over per-point outer products (see `_bayes_batch_p2`); it agrees
    with the scalar quadrature path to rounding error.
    """

    def __init__(self, model, space, retention, eta2: float, sigma2: float,
                 n: int, variant: str = VARIANT_DERIVATION, count: int = 16,
                 nodes: BayesNodes | None = None):
        self.model = model
        self.space = space
        self.nodes = nodes if nodes is not None else prepare_bayes_nodes(model, space, count=count)
        self.retention = _check_retention(retention, self.nodes.zs.shape[1])
        self.eta2 = float(eta2)
        self.sigma2 = float(sigma2)
        self.n = int(n)
        self.variant = resolve_variant(variant)
        self._tiled: tuple | None = None  # (batch_size, zs_tiled, w_tiled)
        self._pack = _pack_nodes_p2(self.nodes) if self.nodes.zs.shape[2] == 2 else None

    def __call__(self, design: Design) -> float:
        return bayesian_loss(self.model, self.space, design, self.retention,
                             self.eta2, self.sigma2, nodes=self.nodes,
                             variant=self.variant)

    def report(self, design: Design) -> LossReport:
        return bayesian_report(self.model, self.space, design, self.retention,
                               self.eta2, self.sigma2, nodes=self.nodes,
                               variant=self.variant)

    def batch(self, weights: np.ndarray) -> np.ndarray:
        weights = np.atleast_2d(weights)
        ds = self.n * weights
        if self._pack is not None:
            return _bayes_batch_p2(self._pack, self.nodes.weights, ds,
                                   self.retention, self.eta2, self.sigma2,
                                   self.n, self.variant)
        b = weights.shape[0]
        k, big_n, p = self.nodes.zs.shape
        if self._tiled is None or self._tiled[0] != b:
            self._tiled = (
                b,
                np.tile(self.nodes.zs, (b, 1, 1)),
                np.tile(self.nodes.w, (b, 1, 1)),
            )
        _, zs_tiled, w_tiled = self._tiled
        ds_rep = np.repeat(ds, k, axis=0)
        stats = _core_stats(zs_tiled, ds_rep, want_vectors=True, w=w_tiled)
        totals = _totals_batch(stats, ds_rep, self.retention, self.eta2,
                               self.sigma2, self.n, self.variant).reshape(b, k)
        return totals @ self.nodes.weights


def _pack_nodes_p2(nodes: BayesNodes) -> dict:
    """Per-point outer products [z0^2, z0*z1, z1^2] flattened to (N, 3K)."""
    zs = nodes.zs  # (K, N, 2)
    k, n, _ = zs.shape
    outer = np.empty((k, n, 3))
    outer[:, :, 0] = zs[:, :, 0] ** 2
    outer[:, :, 1] = zs[:, :, 0] * zs[:, :, 1]
    outer[:, :, 2] = zs[:, :, 1] ** 2
    return {
        "flat": np.ascontiguousarray(outer.transpose(1, 0, 2).reshape(n, 3 * k)),
        "w00": nodes.w[:, 0, 0],
        "w01": nodes.w[:, 0, 1],
        "w11": nodes.w[:, 1, 1],
        "k": k,
        "n_points": n,
    }


def _bayes_batch_p2(pack, node_weights, ds, retention, eta2, sigma2, n, variant) -> np.ndarray:
    """Vectorized prior-averaged loss over a swarm, p = 2 closed forms.

    Relies on exact identities R v1 = Z w_hat and R D v1 = Z G^{-1} B2 w_hat
    (v1 = D Z w_hat), which turn every correction trace into a quadratic form
    in the per-point outer products: no (swarm x nodes x points) temporaries.
    """
    big_n = pack["n_points"]
    k = pack["k"]
    b = ds.shape[0]
    flat = pack["flat"]

    g = (ds @ flat).reshape(b, k, 3)
    b2 = ((ds * ds) @ flat).reshape(b, k, 3)
    g00, g01, g11 = g[..., 0], g[..., 1], g[..., 2]
    c00, c01, c11 = b2[..., 0], b2[..., 1], b2[..., 2]

    with np.errstate(divide="ignore", invalid="ignore"):
        tr_g = g00 + g11
        det_g = g00 * g11 - g01 * g01
        disc_g = np.sqrt(np.maximum(tr_g * tr_g - 4.0 * det_g, 0.0))
        eigmin_g = 0.5 * (tr_g - disc_g)
        det_b2 = c00 * c11 - c01 * c01
        tr_b2 = c00 + c11
        eigmin_b2 = 0.5 * (tr_b2 - np.sqrt(np.maximum(tr_b2 * tr_b2 - 4.0 * det_b2, 0.0)))
        feasible = (eigmin_g > PIVOT_RTOL * tr_g / 2.0) & (eigmin_b2 > 0.0)

        i00 = g11 / det_g
        i01 = -g01 / det_g
        i11 = g00 / det_g
        w00, w01, w11 = pack["w00"], pack["w01"], pack["w11"]
        tr_r = i00 * w00 + 2.0 * i01 * w01 + i11 * w11
        # A = G^{-1} W, S = A G^{-1} (symmetric).
        a00 = i00 * w00 + i01 * w01
        a01 = i00 * w01 + i01 * w11
        a10 = i01 * w00 + i11 * w01
        a11 = i01 * w01 + i11 * w11
        s00 = a00 * i00 + a01 * i01
        s01 = 0.5 * ((a00 * i01 + a01 * i11) + (a10 * i00 + a11 * i01))
        s11 = a10 * i01 + a11 * i11

        la = np.sqrt(c00)
        l10 = c01 / la
        l11 = np.sqrt(np.maximum(c11 - l10 * l10, 0.0))
        m00 = la * la * s00 + 2.0 * la * l10 * s01 + l10 * l10 * s11
        m01 = l11 * (la * s01 + l10 * s11)
        m11 = l11 * l11 * s11
        tr_m = m00 + m11
        disc_m = np.sqrt(np.maximum((m00 - m11) ** 2 + 4.0 * m01 * m01, 0.0))
        ch = 0.5 * (tr_m + disc_m)

        scale_eig = eta2 / (big_n * n)
        scale_var = sigma2 / big_n
        totals = scale_eig * (ch + 1.0) + scale_var * tr_r

        if variant == VARIANT_DERIVATION:
            cw = ds * (1.0 - retention)
        else:
            cw = 1.0 - ds * retention
        co = (cw @ flat).reshape(b, k, 3)
        totals += scale_var * (s00 * co[..., 0] + 2.0 * s01 * co[..., 1] + s11 * co[..., 2])

        if eta2 > 0.0:
            # Top eigenvector of M, stable branch, then w_hat = L^{-T} y
            # normalized so that ||D Z w_hat|| = 1 (w1' B2 w1 = 1).
            use_first = np.abs(ch - m11) >= np.abs(ch - m00)
            y0 = np.where(use_first, ch - m11, m01)
            y1 = np.where(use_first, m01, ch - m00)
            norm_y = np.sqrt(y0 * y0 + y1 * y1)
            zero = norm_y <= 0.0
            y0 = np.where(zero, 1.0, y0)
            y1 = np.where(zero, 0.0, y1)
            u1 = y1 / l11
            u0 = (y0 - l10 * u1) / la
            scale_v = np.sqrt(c00 * u0 * u0 + 2.0 * c01 * u0 * u1 + c11 * u1 * u1)
            u0 = u0 / scale_v
            u1 = u1 / scale_v
            # beta_t = G^{-1} B2 w_hat.
            t0 = c00 * u0 + c01 * u1
            t1 = c01 * u0 + c11 * u1
            bt0 = i00 * t0 + i01 * t1
            bt1 = i01 * t0 + i11 * t1
            cdo = ((cw * ds) @ flat).reshape(b, k, 3)
            quad_cd = cdo[..., 0] * u0 * u0 + 2.0 * cdo[..., 1] * u0 * u1 + cdo[..., 2] * u1 * u1
            bil_c = (co[..., 0] * u0 * bt0
                     + co[..., 1] * (u0 * bt1 + u1 * bt0)
                     + co[..., 2] * u1 * bt1)
            totals += -2.0 * scale_eig * (quad_cd - bil_c)

    totals = np.where(feasible, totals, np.inf)
    values = totals @ node_weights
    return np.where(np.isfinite(values), values, np.inf)


# ---------------------------------------------------------------------------
# Least-favorable contamination

def worst_case_contamination(
    z,
    design,
    retention,
    eta2: float,
    sigma2: float,
    mode: str = "plugin",
    reps: int = 20_000,
    seed: int = 0,
) -> WorstCase:
    """Contamination psi* in the neighborhood attaining the maximal loss.

    psi* = eta * K u1 where K spans the orthogonal complement of Z's column
    space and u1 is the top eigenvector of K'(E[D R^2 D] + I)K.  In "plugin"
    mode (the default, used inside optimization loops) the expectation is
    replaced by the no-missingness matrix D_xi R^2(xi) D_xi; "enumerate" and
    "monte_carlo" use the exact/conditional expectation machinery.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    big_n, p = z.shape
    if isinstance(design, ExactDesign):
        design = design.to_design()
    retention = _check_retention(retention, big_n)
    eta = float(np.sqrt(eta2))
    n = design.n

    if mode == "plugin":
        d = design.scaled_weights()
        stats = _single_core(z, d, want_vectors=False)
        e_tr = float(stats.tr_r[0])
        w = z.T @ z
        g = (z * d[:, None]).T @ z
        ginv_w = np.linalg.solve(g, w)
        s = np.linalg.solve(g, ginv_w.T)
        dz = d[:, None] * z
        e_matrix = dz @ s @ dz.T
    elif mode in ("enumerate", "monte_carlo"):
        counts, _ = _counts_from(design, big_n)
        if mode == "enumerate":
            patterns = _enumerate_patterns(counts)
            weights = _pattern_weights(patterns, counts, retention)
            values, feas, tr_all, _ = _batched_values(z, patterns, eta2, sigma2, n)
            mass = float(weights[feas].sum())
            if mass <= 0.0:
                raise SingularInformation("every missingness pattern is singular")
            wn = weights[feas] / mass
            e_tr = float(wn @ tr_all[feas])
            e_matrix = _pattern_matrix_expectation(z, patterns[feas], wn)
        else:
            draws = np.empty((reps, big_n), dtype=int)
            for rep in range(reps):
                rng = _substream(seed, rep)
                draws[rep] = rng.binomial(counts, retention)
            unique, counts_u = np.unique(draws, axis=0, return_counts=True)
            _, ufeas, utr, _ = _batched_values(z, unique, eta2, sigma2, n)
            kept = counts_u[ufeas].sum()
            if kept < reps // 2:
                raise SingularInformation("more than half of the Monte-Carlo patterns were singular")
            wn = counts_u[ufeas] / kept
            e_tr = float(wn @ utr[ufeas])
            e_matrix = _pattern_matrix_expectation(z, unique[ufeas], wn)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    variance_part = sigma2 / big_n * e_tr
    if big_n == p:
        warnings.warn(
            "design space is saturated (N = p): the feasible contamination set is {0}",
            RuntimeWarning,
            stacklevel=2,
        )
        return WorstCase(psi=np.zeros(big_n), value=variance_part, lambda_max=0.0,
                         e_tr_r=e_tr, mode=mode)

    k = orthonormal_complement(z)
    gc = k.T @ (e_matrix + np.eye(big_n)) @ k
    top = sym_top_eig(gc)
    psi = eta * (k @ top.v1)
    value = eta2 / (big_n * n) * top.lambda_max + variance_part
    return WorstCase(psi=psi, value=value, lambda_max=top.lambda_max,
                     e_tr_r=e_tr, mode=mode)
