"""Run-configuration documents: strict key-checked YAML mirroring the design types.

Unknown keys are hard errors so that a typo in a safety-critical constant
cannot silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass

import yaml

from .engine import TrialDesign
from .models import DesignConstants, UtilityTradeoff, standardize_grid
from .posterior import McmcConfig


class ConfigError(ValueError):
    pass


def _require_keys(mapping, allowed: set[str], required: set[str], context: str) -> None:
    if not isinstance(mapping, dict):
        raise ConfigError(f"{context} must be a mapping")
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")
    missing = required - set(mapping)
    if missing:
        raise ConfigError(f"missing keys in {context}: {sorted(missing)}")


DESIGN_KEYS = {"theta_T", "theta_E", "u0", "c1", "m1", "n2", "c2", "m2",
               "delta1", "delta2", "alpha_start", "alpha_stop", "alpha_step"}
TRADEOFF_KEYS = {"eta0", "eta1", "eta2", "eta3"}
MCMC_KEYS = {"n_burn", "n_keep", "thin", "n_chains", "target_accept"}


def design_from_dict(doc: dict) -> TrialDesign:
    """Build a validated TrialDesign from a plain config mapping."""
    _require_keys(doc, {"grid", "design", "tradeoff", "mcmc", "lattice_resolution"},
                  {"grid", "design", "tradeoff"}, "design config")
    grid_doc = doc["grid"]
    _require_keys(grid_doc, {"raw_x", "raw_y"}, {"raw_x", "raw_y"}, "grid")
    try:
        grid = standardize_grid(grid_doc["raw_x"], grid_doc["raw_y"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    d = doc["design"]
    _require_keys(d, DESIGN_KEYS, {"theta_T"}, "design")
    defaults = DesignConstants()
    constants = DesignConstants(**{**{k: getattr(defaults, k) for k in DESIGN_KEYS}, **d})

    t = doc["tradeoff"]
    _require_keys(t, TRADEOFF_KEYS, TRADEOFF_KEYS, "tradeoff")
    tradeoff = UtilityTradeoff(eta0=float(t["eta0"]), eta1=float(t["eta1"]),
                               eta2=float(t["eta2"]), eta3=float(t["eta3"]),
                               theta_T=float(d["theta_T"]))

    m = doc.get("mcmc", {})
    _require_keys(m, MCMC_KEYS, set(), "mcmc")
    mcmc_defaults = McmcConfig()
    mcmc = McmcConfig(**{**{k: getattr(mcmc_defaults, k) for k in MCMC_KEYS}, **m})

    try:
        return TrialDesign(grid=grid, constants=constants, tradeoff=tradeoff, mcmc=mcmc,
                           lattice_resolution=int(doc.get("lattice_resolution", 101)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def design_to_dict(design: TrialDesign) -> dict:
    c = design.constants
    t = design.tradeoff
    m = design.mcmc
    return {
        "grid": {"raw_x": list(design.grid.raw_x), "raw_y": list(design.grid.raw_y)},
        "design": {k: getattr(c, k) for k in
                   ("theta_T", "theta_E", "u0", "c1", "m1", "n2", "c2", "m2",
                    "delta1", "delta2", "alpha_start", "alpha_stop", "alpha_step")},
        "tradeoff": {k: getattr(t, k) for k in ("eta0", "eta1", "eta2", "eta3")},
        "mcmc": {k: getattr(m, k) for k in
                 ("n_burn", "n_keep", "thin", "n_chains", "target_accept")},
        "lattice_resolution": design.lattice_resolution,
    }


@dataclass
class RunConfig:
    design: TrialDesign
    scenario_path: str
    trials: int
    seed: int
    out_dir: str
    workers: int

    def to_dict(self) -> dict:
        doc = design_to_dict(self.design)
        doc["scenario"] = self.scenario_path
        doc["trials"] = self.trials
        doc["seed"] = self.seed
        doc["out"] = self.out_dir
        doc["workers"] = self.workers
        return doc


RUN_ONLY_KEYS = {"scenario", "trials", "seed", "out", "workers"}


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    unknown = set(doc) - RUN_ONLY_KEYS - {"grid", "design", "tradeoff", "mcmc",
                                          "lattice_resolution"}
    if unknown:
        raise ConfigError(f"unknown keys in config: {sorted(unknown)}")
    if "scenario" not in doc:
        raise ConfigError("missing keys in config: ['scenario']")
    design = design_from_dict({k: doc[k] for k in
                               ("grid", "design", "tradeoff", "mcmc", "lattice_resolution")
                               if k in doc})
    trials = int(doc.get("trials", 2000))
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    workers = int(doc.get("workers", 1))
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return RunConfig(
        design=design,
        scenario_path=str(doc["scenario"]),
        trials=trials,
        seed=int(doc.get("seed", 0)),
        out_dir=str(doc.get("out", "out")),
        workers=workers,
    )


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    return run_config_from_dict(doc)


def dump_run_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
