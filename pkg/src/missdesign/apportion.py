"""Efficient rounding of continuous design weights to integer run counts.

Multiplier rounding with quotient adjustments: start from
n_i = ceil((n - l/2) * w_i) on the l support points, then repair the total by
incrementing the index minimizing n_i / w_i (too few runs) or decrementing
the index maximizing (n_i - 1) / w_i (too many), ties broken by smallest
index.  Every support point keeps at least one run whenever n >= l, and
rounding an already-integer design returns it unchanged.
"""

from __future__ import annotations

import numpy as np

from .model import Design, ExactDesign

__all__ = ["efficient_apportionment"]


def efficient_apportionment(design: Design | np.ndarray, n: int | None = None) -> ExactDesign:
    """Round a weight vector to integer counts summing to n.

    Accepts a Design (n taken from it unless overridden) or a bare weight
    vector with n supplied.  Raises when the support is larger than n.
    """
    if isinstance(design, Design):
        weights = design.weights
        if n is None:
            n = design.n
    else:
        weights = np.asarray(design, dtype=float)
        if n is None:
            raise ValueError("n is required when passing a bare weight vector")
    n = int(n)
    if n < 1:
        raise ValueError("n must be a positive integer")
    if weights.ndim != 1 or np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and non-negative")

    support = np.flatnonzero(weights > 0)
    l = support.size
    if l == 0:
        raise ValueError("design has empty support")
    if l > n:
        raise ValueError(f"support size {l} exceeds n={n}: cannot give each point one run")

    w = weights[support]
    counts_s = np.ceil((n - l / 2.0) * w).astype(int)
    counts_s = np.maximum(counts_s, 1)

    while counts_s.sum() < n:
        counts_s[np.argmin(counts_s / w)] += 1
    while counts_s.sum() > n:
        counts_s[np.argmax((counts_s - 1) / w)] -= 1

    counts = np.zeros(weights.size, dtype=int)
    counts[support] = counts_s
    return ExactDesign(counts)
