"""Particle-swarm minimization of a design criterion over the weight simplex.

Particles live in the box [0,1]^N and are mapped to the simplex by
normalization xi = u / sum(u); velocities are clamped to [-1, 1] and
positions reflected back into the box.  The uniform design and a handful of
small-support sentinel designs are injected into the initial swarm so the
optimizer never reports anything worse than those.  Criterion evaluations
that raise SingularInformation score +inf (soft rejection).

Runs are reproducible from the seed: every random draw happens on the main
thread in a fixed order, so results are bit-identical regardless of how many
worker threads evaluate the swarm.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import Design, DesignSpace
from .numerics import SingularInformation

__all__ = ["PsoConfig", "SolveResult", "minimize_over_simplex"]


@dataclass(frozen=True)
class PsoConfig:
    """Swarm hyperparameters (constriction-style defaults)."""

    swarm_size: int = 64
    iterations: int = 500
    inertia: float = 0.729
    cognitive: float = 1.49445
    social: float = 1.49445
    seed: int = 0
    restarts: int = 4
    stall_iterations: int = 50
    stall_tolerance: float = 1e-9

    def __post_init__(self):
        if min(self.swarm_size, self.iterations, self.restarts, self.stall_iterations) < 1:
            raise ValueError("swarm_size, iterations, restarts and stall window must be positive")
        if not 0.0 < self.inertia < 1.0:
            raise ValueError("inertia must lie in (0, 1)")


@dataclass(frozen=True)
class SolveResult:
    """Best design found, with per-iteration history of the winning restart."""

    best_design: Design
    best_value: float
    history: np.ndarray
    evaluations: int
    seed: int


WEIGHT_FLOOR = 1e-6  # reported weights below this are truncated to zero


def _to_simplex(u: np.ndarray) -> np.ndarray:
    total = u.sum()
    if total <= 0.0:
        return np.full(u.size, 1.0 / u.size)
    w = u / total
    # Guard against rounding pushing the sum off 1 by more than Design allows.
    return w / w.sum()


def _to_simplex_rows(positions: np.ndarray) -> np.ndarray:
    return np.array([_to_simplex(u) for u in positions])


def _sentinel_positions(n_points: int, supports) -> list[np.ndarray]:
    positions = []
    for m in supports:
        m = int(m)
        if m < 1 or m > n_points:
            continue
        idx = np.unique(np.round(np.linspace(0, n_points - 1, m)).astype(int))
        u = np.zeros(n_points)
        u[idx] = 1.0
        positions.append(u)
    return positions


def minimize_over_simplex(
    criterion,
    space: DesignSpace,
    n: int,
    config: PsoConfig = PsoConfig(),
    sentinels=(),
    threads: int = 1,
) -> SolveResult:
    """Minimize `criterion(Design) -> float` over simplex weights on `space`.

    `sentinels` is an optional collection of support sizes; for each size m an
    equally-weighted design on m evenly spaced grid indices is injected into
    the initial swarm alongside the uniform design.  The best design over all
    restarts is reported, with weights below 1e-6 truncated and the value
    re-evaluated on the reported design.
    """
    n_points = space.n_points
    evaluations = 0
    batch_fn = getattr(criterion, "batch", None)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 and batch_fn is None else None

    def evaluate_batch(positions: np.ndarray) -> np.ndarray:
        nonlocal evaluations
        weights = _to_simplex_rows(positions)
        evaluations += positions.shape[0]
        if batch_fn is not None:
            values = np.asarray(batch_fn(weights), dtype=float)
            return np.where(np.isfinite(values), values, np.inf)
        designs = [Design(w, n) for w in weights]
        if pool is not None:
            values = list(pool.map(_safe_eval, [criterion] * len(designs), designs))
        else:
            values = [_safe_eval(criterion, d) for d in designs]
        return np.asarray(values, dtype=float)

    uniform_u = np.full(n_points, 0.5)
    sentinel_us = _sentinel_positions(n_points, sentinels)

    best_u = None
    best_val = np.inf
    best_history = None
    for restart in range(config.restarts):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(config.seed), restart)))
        pos = rng.random((config.swarm_size, n_points))
        pos[0] = uniform_u
        for j, u in enumerate(sentinel_us, start=1):
            if j < config.swarm_size:
                pos[j] = u
        vel = rng.uniform(-0.5, 0.5, size=(config.swarm_size, n_points))

        values = evaluate_batch(pos)
        if not np.any(np.isfinite(values)):
            raise SingularInformation("every particle in the initial swarm is infeasible")
        pbest_pos = pos.copy()
        pbest_val = values.copy()
        g_idx = int(np.argmin(values))
        gbest_pos = pos[g_idx].copy()
        gbest_val = float(values[g_idx])
        history = [gbest_val]

        for it in range(config.iterations):
            r1 = rng.random((config.swarm_size, n_points))
            r2 = rng.random((config.swarm_size, n_points))
            vel = (
                config.inertia * vel
                + config.cognitive * r1 * (pbest_pos - pos)
                + config.social * r2 * (gbest_pos[None, :] - pos)
            )
            np.clip(vel, -1.0, 1.0, out=vel)
            pos = pos + vel
            # Reflect into [0, 1]; a single reflection suffices for |v| <= 1.
            pos = np.where(pos < 0.0, -pos, pos)
            pos = np.where(pos > 1.0, 2.0 - pos, pos)
            np.clip(pos, 0.0, 1.0, out=pos)

            values = evaluate_batch(pos)
            improved = values < pbest_val
            pbest_pos[improved] = pos[improved]
            pbest_val[improved] = values[improved]
            g_idx = int(np.argmin(pbest_val))
            if pbest_val[g_idx] < gbest_val:
                gbest_val = float(pbest_val[g_idx])
                gbest_pos = pbest_pos[g_idx].copy()
            history.append(gbest_val)

            window = config.stall_iterations
            if len(history) > window:
                past = history[-window - 1]
                if (past - gbest_val) < config.stall_tolerance * max(abs(past), 1e-30):
                    break

        if gbest_val < best_val:
            best_val = gbest_val
            best_u = gbest_pos
            best_history = np.asarray(history)

    if pool is not None:
        pool.shutdown(wait=True)

    raw_weights = _to_simplex(best_u)
    raw_design = Design(raw_weights, n)
    truncated = raw_weights.copy()
    truncated[truncated < WEIGHT_FLOOR] = 0.0
    truncated /= truncated.sum()
    trunc_design = Design(truncated, n)
    evaluations += 2
    raw_value = _safe_eval(criterion, raw_design)
    trunc_value = _safe_eval(criterion, trunc_design)
    if trunc_value <= raw_value:
        final_design, final_value = trunc_design, trunc_value
    else:
        final_design, final_value = raw_design, raw_value
    return SolveResult(
        best_design=final_design,
        best_value=float(final_value),
        history=best_history,
        evaluations=evaluations,
        seed=config.seed,
    )


def _safe_eval(criterion, design: Design) -> float:
    try:
        value = float(criterion(design))
    except SingularInformation:
        return np.inf
    return value if np.isfinite(value) else np.inf
