"""Problem-configuration parsing and validation for the CLI.

Configs are JSON with a strict schema: unknown keys anywhere are rejected,
and every module precondition that can be checked up front (dimensions,
parameter ranges, retention probabilities) is checked before any computation
starts.  See the README for the full format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import (
    DesignSpace,
    LinearBasis,
    MissingnessModel,
    NonlinearModel,
    RobustnessParams,
    exponential_model,
    grid_space,
    polynomial_basis,
    quadratic2_basis,
)
from .criterion import resolve_variant
from .numerics import Prior
from .optimizer import PsoConfig

__all__ = ["ConfigError", "ProblemConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Invalid problem configuration."""


@dataclass(frozen=True)
class ProblemConfig:
    space: DesignSpace
    model: LinearBasis | NonlinearModel
    missing: MissingnessModel
    eta2: float
    sigma2: float
    n: int
    variant: str
    seed: int
    pso: PsoConfig
    quadrature_nodes: int
    beta_true: np.ndarray | None

    @property
    def retention(self) -> np.ndarray:
        return self.missing.retention(self.space)

    def default_beta_true(self) -> np.ndarray:
        if self.beta_true is not None:
            return self.beta_true
        if isinstance(self.model, NonlinearModel):
            return self.model.default_beta()
        return np.zeros(self.model.n_params)


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing key {key!r} in {where}")
    return section[key]


def _parse_space(section) -> DesignSpace:
    if not isinstance(section, dict):
        raise ConfigError("'space' must be an object")
    _reject_unknown(section, {"grid", "points"}, "'space'")
    if ("grid" in section) == ("points" in section):
        raise ConfigError("'space' needs exactly one of 'grid' or 'points'")
    try:
        if "grid" in section:
            grid = section["grid"]
            _reject_unknown(grid, {"ranges", "counts"}, "'space.grid'")
            return grid_space(_require(grid, "ranges", "'space.grid'"),
                              _require(grid, "counts", "'space.grid'"))
        return DesignSpace(np.asarray(section["points"], dtype=float))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid design space: {exc}") from exc


def _parse_prior(section) -> Prior:
    _reject_unknown(section, {"kind", "a", "b"}, "'prior'")
    kind = _require(section, "kind", "'prior'")
    try:
        if kind == "uniform":
            return Prior("uniform")
        if kind == "beta":
            return Prior("beta", a=float(_require(section, "a", "'prior'")),
                         b=float(_require(section, "b", "'prior'")))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid prior: {exc}") from exc
    raise ConfigError(f"unknown prior kind {kind!r}")


def _parse_model(section, prior_section, space: DesignSpace):
    if not isinstance(section, dict):
        raise ConfigError("'model' must be an object")
    mtype = _require(section, "type", "'model'")
    if mtype == "polynomial":
        _reject_unknown(section, {"type", "degree"}, "'model'")
        if space.dim != 1:
            raise ConfigError("polynomial model needs a one-dimensional design space")
        degree = int(_require(section, "degree", "'model'"))
        return polynomial_basis(degree)
    if mtype == "quadratic2":
        _reject_unknown(section, {"type"}, "'model'")
        if space.dim != 2:
            raise ConfigError("quadratic2 model needs a two-dimensional design space")
        return quadratic2_basis()
    if mtype == "exponential":
        _reject_unknown(section, {"type", "beta0", "beta1"}, "'model'")
        if space.dim != 1:
            raise ConfigError("exponential model needs a one-dimensional design space")
        kwargs = {}
        for name, (okey, skey) in (("beta0", ("beta0_offset", "beta0_scale")),
                                   ("beta1", ("beta1_offset", "beta1_scale"))):
            if name in section:
                sub = section[name]
                _reject_unknown(sub, {"offset", "scale"}, f"'model.{name}'")
                kwargs[okey] = float(_require(sub, "offset", f"'model.{name}'"))
                kwargs[skey] = float(_require(sub, "scale", f"'model.{name}'"))
        priors = _parse_priors(prior_section, 2)
        return exponential_model(priors=priors, **kwargs)
    raise ConfigError(f"unknown model type {mtype!r}")


def _parse_priors(prior_section, n_params: int) -> tuple:
    if prior_section is None:
        return tuple(Prior("uniform") for _ in range(n_params))
    if isinstance(prior_section, list):
        if len(prior_section) != n_params:
            raise ConfigError(f"'prior' list must have {n_params} entries")
        return tuple(_parse_prior(p) for p in prior_section)
    one = _parse_prior(prior_section)
    return tuple(one for _ in range(n_params))


_TOP_KEYS = {
    "space", "model", "gamma", "eta2", "sigma2", "n", "variant",
    "prior", "quadrature_nodes", "pso", "seed", "beta_true",
}
_PSO_KEYS = {"swarm", "iters", "inertia", "cognitive", "social", "restarts"}


def parse_config(raw: dict) -> ProblemConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config")

    space = _parse_space(_require(raw, "space", "config"))
    model = _parse_model(_require(raw, "model", "config"), raw.get("prior"), space)

    try:
        missing = MissingnessModel(np.asarray(_require(raw, "gamma", "config"), dtype=float))
        params = RobustnessParams(float(_require(raw, "eta2", "config")),
                                  float(_require(raw, "sigma2", "config")))
        retention = missing.retention(space)  # validates gamma/space consistency
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if np.any(retention <= 0.0) or np.any(retention >= 1.0):
        raise ConfigError("retention probabilities must lie strictly inside (0, 1)")

    n = _require(raw, "n", "config")
    if not isinstance(n, int) or n < 1:
        raise ConfigError("'n' must be a positive integer")
    if model.n_params > space.n_points:
        raise ConfigError(
            f"model has {model.n_params} parameters but the space only {space.n_points} points"
        )

    try:
        variant = resolve_variant(raw.get("variant", "derivation"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("'seed' must be an integer")

    pso_raw = raw.get("pso", {})
    if not isinstance(pso_raw, dict):
        raise ConfigError("'pso' must be an object")
    _reject_unknown(pso_raw, _PSO_KEYS, "'pso'")
    try:
        pso = PsoConfig(
            swarm_size=int(pso_raw.get("swarm", 64)),
            iterations=int(pso_raw.get("iters", 500)),
            inertia=float(pso_raw.get("inertia", 0.729)),
            cognitive=float(pso_raw.get("cognitive", 1.49445)),
            social=float(pso_raw.get("social", 1.49445)),
            restarts=int(pso_raw.get("restarts", 4)),
            seed=seed,
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid pso section: {exc}") from exc

    nodes = raw.get("quadrature_nodes", 16)
    if not isinstance(nodes, int) or nodes < 2:
        raise ConfigError("'quadrature_nodes' must be an integer >= 2")

    beta_true = None
    if "beta_true" in raw:
        beta_true = np.asarray(raw["beta_true"], dtype=float)
        if beta_true.shape != (model.n_params,):
            raise ConfigError(f"'beta_true' must have {model.n_params} entries")

    return ProblemConfig(
        space=space,
        model=model,
        missing=missing,
        eta2=params.eta2,
        sigma2=params.sigma2,
        n=n,
        variant=variant,
        seed=seed,
        pso=pso,
        quadrature_nodes=nodes,
        beta_true=beta_true,
    )


def load_config(path) -> ProblemConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw)
