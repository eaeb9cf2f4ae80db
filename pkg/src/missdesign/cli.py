"""Command-line entry point: solve / eval / round / simulate / worstcase.

Exit codes: 0 success, 2 configuration or input-file error, 3 infeasible
problem.  All outputs are machine-readable (JSON/CSV, plus a static SVG
weight profile) and byte-for-byte reproducible given the config and seed,
except for timestamps in run_meta.json.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .apportion import efficient_apportionment
from .config import ConfigError, ProblemConfig, load_config
from .criterion import BayesObjective, TaylorObjective, worst_case_contamination
from .model import Design, ExactDesign, LinearBasis, design_matrix
from .numerics import SingularInformation
from .optimizer import minimize_over_simplex
from .simulate import simulate_mmpe

DESIGN_WEIGHT_EPS = 1e-12


# ---------------------------------------------------------------------------
# Objective assembly

def build_objective(config: ProblemConfig):
    """Criterion object (Design -> float, with .batch and .report paths)."""
    retention = config.retention
    if isinstance(config.model, LinearBasis):
        z = design_matrix(config.model, config.space)
        return TaylorObjective(z, retention, config.eta2, config.sigma2,
                               config.n, variant=config.variant)
    return BayesObjective(config.model, config.space, retention, config.eta2,
                          config.sigma2, config.n, variant=config.variant,
                          count=config.quadrature_nodes)


def _criterion_z(config: ProblemConfig) -> np.ndarray:
    """Regressor matrix used for contamination analysis (nominal beta)."""
    if isinstance(config.model, LinearBasis):
        return design_matrix(config.model, config.space)
    return design_matrix(config.model, config.space, config.model.default_beta())


# ---------------------------------------------------------------------------
# Design file IO

def read_design(path, space_size: int) -> Design | ExactDesign:
    """Read a design from JSON ({"weights": [...], "n": k} or {"counts": [...]})
    or CSV (column "xi", optional "n_i")."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            with open(path) as fh:
                data = json.load(fh)
            if not isinstance(data, dict):
                raise ValueError("design JSON must be an object")
            if "counts" in data:
                return ExactDesign(np.asarray(data["counts"]))
            weights = np.asarray(data["weights"], dtype=float)
            n = int(data["n"])
            return Design(weights, n)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or "xi" not in rows[0]:
            raise ValueError("design CSV needs an 'xi' column")
        weights = np.array([float(r["xi"]) for r in rows])
        n = int(rows[0].get("n", 0)) if rows[0].get("n") else None
        if n is None:
            raise ValueError("design CSV needs an 'n' column")
        return Design(weights / weights.sum(), n)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read design file {path}: {exc}") from exc


def _as_design(obj, n: int) -> Design:
    if isinstance(obj, ExactDesign):
        return obj.to_design()
    return obj


def _as_exact(obj, n: int) -> ExactDesign:
    if isinstance(obj, ExactDesign):
        return obj
    return efficient_apportionment(obj)


# ---------------------------------------------------------------------------
# Writers

def _dump_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_design_files(out: Path, config: ProblemConfig, design: Design,
                       loss_value: float) -> ExactDesign:
    weights = design.weights
    support = np.flatnonzero(weights > DESIGN_WEIGHT_EPS)
    if support.size > design.n:
        # An exact n-point design cannot use more than n support points:
        # round only the n heaviest and renormalize for the count column.
        keep = support[np.argsort(weights[support])[::-1][: design.n]]
        rounded_weights = np.zeros_like(weights)
        rounded_weights[keep] = weights[keep]
        rounded_weights /= rounded_weights.sum()
        exact = efficient_apportionment(rounded_weights, design.n)
    else:
        exact = efficient_apportionment(design)

    _dump_json(out / "design.json", {
        "weights": [float(w) for w in weights],
        "n": design.n,
        "loss": loss_value,
        "variant": config.variant,
    })
    with open(out / "design.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        coord_names = [f"x{j+1}" for j in range(config.space.dim)]
        writer.writerow(["index", *coord_names, "xi", "n", "n_i_rounded"])
        for i, (x, w, c) in enumerate(zip(config.space.points, weights, exact.counts)):
            writer.writerow([i, *[repr(float(v)) for v in x], repr(float(w)), design.n, int(c)])
    _write_weights_svg(out / "weights.svg", config, weights)
    return exact


def _write_weights_svg(path: Path, config: ProblemConfig, weights: np.ndarray) -> None:
    """Static bar profile of the design weights over the point index."""
    n = weights.size
    width, height, margin = 720, 300, 40
    wmax = max(float(weights.max()), 1e-12)
    bar_w = (width - 2 * margin) / n
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{margin}" y="{height - margin + 16}" font-size="11">point 0</text>',
        f'<text x="{width - margin - 60}" y="{height - margin + 16}" font-size="11">'
        f'point {n - 1}</text>',
        f'<text x="{margin}" y="{margin - 14}" font-size="11">'
        f'design weights (max {wmax:.4g})</text>',
    ]
    for i, w in enumerate(weights):
        h = (height - 2 * margin) * float(w) / wmax
        x = margin + i * bar_w
        y = height - margin - h
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{max(bar_w - 0.5, 0.5):.2f}" '
            f'height="{h:.2f}" fill="steelblue"/>'
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def write_loss_report(out: Path, report, objective_value: float, extra: dict | None = None) -> None:
    payload = report.as_dict()
    payload["objective"] = objective_value
    if extra:
        payload.update(extra)
    _dump_json(out / "loss_report.json", payload)


# ---------------------------------------------------------------------------
# Subcommands

def cmd_solve(args) -> int:
    config = _load(args)
    out = _outdir(args)
    started = time.time()
    objective = build_objective(config)
    p = config.model.n_params
    n_pts = config.space.n_points
    sentinels = sorted({p, p + 1, 2 * p, max(p, n_pts // max(p, 1))})
    result = minimize_over_simplex(
        objective, config.space, config.n, config.pso,
        sentinels=sentinels, threads=args.threads,
    )
    report = objective.report(result.best_design)
    exact = write_design_files(out, config, result.best_design, result.best_value)

    z = _criterion_z(config)
    extra = {}
    try:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("always")
            wc = worst_case_contamination(z, result.best_design, config.retention,
                                          config.eta2, config.sigma2, mode="plugin")
        extra["worst_case"] = {
            "value": wc.value,
            "lambda_max": wc.lambda_max,
            "psi_norm": float(np.linalg.norm(wc.psi)),
            "saturated": bool(config.space.n_points == p),
        }
        if config.space.n_points == p:
            print("warning: saturated design space (N = p); worst-case contamination is 0",
                  file=sys.stderr)
    except SingularInformation:
        extra["worst_case"] = None
    write_loss_report(out, report, result.best_value, extra)

    _dump_json(out / "run_meta.json", {
        "command": "solve",
        "package_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "seed": config.seed,
        "variant": config.variant,
        "threads": args.threads,
        "evaluations": result.evaluations,
        "best_value": result.best_value,
        "iterations_run": int(result.history.size - 1),
        "wall_time_s": time.time() - started,
        "rounded_counts_sum": int(exact.counts.sum()),
    })
    print(f"best loss {result.best_value:.6e} "
          f"({int(np.count_nonzero(result.best_design.weights))} support points)")
    return 0


def cmd_eval(args) -> int:
    config = _load(args)
    out = _outdir(args)
    design = _as_design(read_design(args.design, config.space.n_points), config.n)
    if design.weights.size != config.space.n_points:
        raise ConfigError("design length does not match the design space")
    objective = build_objective(config)
    value = objective(design)
    write_loss_report(out, objective.report(design), value)
    print(f"loss {value:.6e}")
    return 0


def cmd_round(args) -> int:
    config = _load(args)
    out = _outdir(args)
    design = read_design(args.design, config.space.n_points)
    n = args.n if args.n is not None else config.n
    if isinstance(design, ExactDesign):
        design = design.to_design()
    exact = efficient_apportionment(design.weights, n)
    _dump_json(out / "exact_design.json", {
        "counts": [int(c) for c in exact.counts],
        "n": int(exact.counts.sum()),
    })
    print(f"rounded to {int(exact.counts.sum())} runs on "
          f"{int(np.count_nonzero(exact.counts))} support points")
    return 0


def cmd_simulate(args) -> int:
    config = _load(args)
    out = _outdir(args)
    design = read_design(args.design, config.space.n_points)
    exact = _as_exact(design, config.n)
    retention = config.retention
    beta_true = config.default_beta_true()
    if args.psi == "worstcase":
        z = _criterion_z(config)
        wc = worst_case_contamination(z, exact.to_design(), retention,
                                      config.eta2, config.sigma2, mode="enumerate"
                                      if _enumerable(exact) else "plugin")
        psi = wc.psi
    else:
        psi = np.zeros(config.space.n_points)
    report = simulate_mmpe(
        config.model, config.space, exact, retention, psi, beta_true,
        config.sigma2, reps=args.reps, seed=args.seed if args.seed is not None else config.seed,
        threads=args.threads,
    )
    with open(out / "decomposition.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["term", "value", "standard_error"])
        for row in report.as_rows():
            writer.writerow([row[0], repr(row[1]), repr(row[2])])
        writer.writerow(["replicates", report.replicates, ""])
        writer.writerow(["discarded", report.discarded, ""])
    print(f"simulated mmpe {report.mmpe_hat:.6e} (se {report.se_mmpe:.2e}, "
          f"{report.replicates} replicates, {report.discarded} discarded)")
    return 0


def _enumerable(exact: ExactDesign) -> bool:
    sizes = exact.counts[exact.counts > 0] + 1
    return float(np.prod(sizes.astype(float))) <= 250_000


def cmd_worstcase(args) -> int:
    config = _load(args)
    out = _outdir(args)
    design = _as_design(read_design(args.design, config.space.n_points), config.n)
    z = _criterion_z(config)
    wc = worst_case_contamination(z, design, config.retention, config.eta2,
                                  config.sigma2, mode=args.mode)
    with open(out / "psi.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        coord_names = [f"x{j+1}" for j in range(config.space.dim)]
        writer.writerow(["index", *coord_names, "psi"])
        for i, (x, v) in enumerate(zip(config.space.points, wc.psi)):
            writer.writerow([i, *[repr(float(c)) for c in x], repr(float(v))])
    _dump_json(out / "worstcase.json", {
        "value": wc.value,
        "lambda_max": wc.lambda_max,
        "expected_trace": wc.e_tr_r,
        "psi_norm": float(np.linalg.norm(wc.psi)),
        "mode": wc.mode,
    })
    print(f"worst-case loss {wc.value:.6e} (|psi| = {np.linalg.norm(wc.psi):.6g})")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing

def _load(args) -> ProblemConfig:
    config = load_config(args.config)
    if args.seed is not None or args.variant is not None:
        from dataclasses import replace

        pso = replace(config.pso, seed=args.seed) if args.seed is not None else config.pso
        config = replace(
            config,
            seed=args.seed if args.seed is not None else config.seed,
            variant={"paper": "paper-literal", "derivation": "derivation-consistent"}[args.variant]
            if args.variant is not None else config.variant,
            pso=pso,
        )
    if getattr(args, "swarm", None) or getattr(args, "iters", None) or getattr(args, "restarts", None):
        from dataclasses import replace

        pso = replace(
            config.pso,
            swarm_size=args.swarm or config.pso.swarm_size,
            iterations=args.iters or config.pso.iterations,
            restarts=args.restarts or config.pso.restarts,
        )
        config = replace(config, pso=pso)
    return config


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="problem configuration JSON")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--variant", choices=["paper", "derivation"], default=None,
                        help="criterion correction variant")
    common.add_argument("--threads", type=int, default=1, help="worker threads")

    parser = argparse.ArgumentParser(prog="missdesign",
                                     description="Minimax robust designs under MCAR missingness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", parents=[common], help="optimize a design")
    p_solve.add_argument("--swarm", type=int, default=None)
    p_solve.add_argument("--iters", type=int, default=None)
    p_solve.add_argument("--restarts", type=int, default=None)
    p_solve.set_defaults(func=cmd_solve)

    p_eval = sub.add_parser("eval", parents=[common], help="evaluate a design")
    p_eval.add_argument("--design", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_round = sub.add_parser("round", parents=[common], help="apportion to integer counts")
    p_round.add_argument("--design", required=True)
    p_round.add_argument("--n", type=int, default=None)
    p_round.set_defaults(func=cmd_round)

    p_sim = sub.add_parser("simulate", parents=[common], help="simulation oracle")
    p_sim.add_argument("--design", required=True)
    p_sim.add_argument("--reps", type=int, default=20_000)
    p_sim.add_argument("--psi", choices=["zero", "worstcase"], default="zero")
    p_sim.set_defaults(func=cmd_simulate)

    p_wc = sub.add_parser("worstcase", parents=[common], help="least-favorable contamination")
    p_wc.add_argument("--design", required=True)
    p_wc.add_argument("--mode", choices=["plugin", "enumerate", "monte_carlo"], default="plugin")
    p_wc.set_defaults(func=cmd_worstcase)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SingularInformation as exc:
        print(f"infeasible problem: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
