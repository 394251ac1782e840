"""Ground-truth scenarios for simulation: parametric surfaces or per-combo tables.

A parametric scenario reuses the working toxicity/efficacy models as the data
generating truth; a tabular scenario fixes per-combination probabilities
directly (the model-misspecification suite). Tabular truths are defined only
at grid combinations; continuous points are reachable solely through explicit
bilinear interpolation, which is how final continuous recommendations are
scored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import yaml

from .models import (
    EfficacyParams,
    StandardDoseGrid,
    ToxicityParams,
    UtilityTradeoff,
    efficacy_prob,
    standardize_grid,
    toxicity_prob,
    utility,
)

PARAMETRIC = "parametric"
TABULAR = "tabular"


class OffGridError(ValueError):
    """Tabular truth queried off the grid without the interpolation flag."""


class ScenarioFormatError(ValueError):
    """Scenario document malformed or carrying unknown keys."""


@dataclass(frozen=True)
class TargetInfo:
    """Brute-force-located maximizer of the true utility surface."""

    x: float
    y: float
    utility: float


@dataclass(frozen=True)
class Scenario:
    name: str
    kind: str
    tradeoff: UtilityTradeoff
    toxicity: ToxicityParams | None = None
    efficacy: EfficacyParams | None = None
    grid: StandardDoseGrid | None = None
    pi_t_table: np.ndarray | None = None
    pi_e_table: np.ndarray | None = None
    target: TargetInfo | None = None

    def validate(self) -> "Scenario":
        self.tradeoff.validate()
        if self.kind == PARAMETRIC:
            if self.toxicity is None or self.efficacy is None:
                raise ScenarioFormatError("parametric scenario needs toxicity and efficacy params")
            self.toxicity.validate()
            self.efficacy.validate()
        elif self.kind == TABULAR:
            if self.grid is None or self.pi_t_table is None or self.pi_e_table is None:
                raise ScenarioFormatError("tabular scenario needs a grid and both tables")
            shape = (self.grid.n_x, self.grid.n_y)
            for name, tab in (("pi_t", self.pi_t_table), ("pi_e", self.pi_e_table)):
                if tab.shape != shape:
                    raise ScenarioFormatError(
                        f"{name} table shape {tab.shape} does not match grid {shape}")
                if np.any((tab < 0) | (tab > 1)):
                    raise ScenarioFormatError(f"{name} entries must lie in [0, 1]")
        else:
            raise ScenarioFormatError(f"unknown scenario kind {self.kind!r}")
        return self



def _bilinear(levels_x, levels_y, table: np.ndarray, x: float, y: float) -> float:
    lx = np.asarray(levels_x)
    ly = np.asarray(levels_y)
    i = int(np.clip(np.searchsorted(lx, x) - 1, 0, len(lx) - 2))
    j = int(np.clip(np.searchsorted(ly, y) - 1, 0, len(ly) - 2))
    tx = (x - lx[i]) / (lx[i + 1] - lx[i])
    ty = (y - ly[j]) / (ly[j + 1] - ly[j])
    return float(
        table[i, j] * (1 - tx) * (1 - ty)
        + table[i + 1, j] * tx * (1 - ty)
        + table[i, j + 1] * (1 - tx) * ty
        + table[i + 1, j + 1] * tx * ty
    )


def true_surface(sc: Scenario, x: float, y: float,
                 interpolate: bool = False) -> tuple[float, float, float]:
    """True (pi_T, pi_E, U) at standardized (x, y).

    Tabular scenarios answer exactly at grid combinations; anywhere else they
    require interpolate=True and return bilinear interpolations of both
    probability tables, with the utility computed from the interpolated pair.
    """
    if sc.kind == PARAMETRIC:
        pt = toxicity_prob(sc.toxicity, x, y)
        pe = efficacy_prob(sc.efficacy, x, y)
        return pt, pe, utility(pt, pe, sc.tradeoff)

    gx, gy = sc.grid.x_levels, sc.grid.y_levels
    for i, lx in enumerate(gx):
        if lx == x:
            for j, ly in enumerate(gy):
                if ly == y:
                    pt, pe = float(sc.pi_t_table[i, j]), float(sc.pi_e_table[i, j])
                    return pt, pe, utility(pt, pe, sc.tradeoff)
            break
    if not interpolate:
        raise OffGridError(f"({x}, {y}) is not a grid combination of tabular "
                           f"scenario {sc.name!r}")
    pt = _bilinear(gx, gy, sc.pi_t_table, x, y)
    pe = _bilinear(gx, gy, sc.pi_e_table, x, y)
    return pt, pe, utility(pt, pe, sc.tradeoff)


def brute_force_target(sc: Scenario, resolution: int = 1001) -> TargetInfo:
    """Dense-grid maximizer of the true utility surface over [0,1]^2."""
    ax = np.linspace(0.0, 1.0, resolution)
    if sc.kind == PARAMETRIC:
        xx, yy = np.meshgrid(ax, ax, indexing="ij")
        pt = toxicity_prob(sc.toxicity, xx, yy)
        pe = efficacy_prob(sc.efficacy, xx, yy)
        u = utility(pt, pe, sc.tradeoff)
    else:
        u = np.empty((resolution, resolution))
        for i, x in enumerate(ax):
            for j, y in enumerate(ax):
                u[i, j] = true_surface(sc, float(x), float(y), interpolate=True)[2]
    flat = int(np.argmax(u))
    ix, iy = divmod(flat, resolution)
    return TargetInfo(x=float(ax[ix]), y=float(ax[iy]), utility=float(u[ix, iy]))


# ---------------------------------------------------------------------------
# Scenario documents
# ---------------------------------------------------------------------------

def _require_keys(mapping: dict, allowed: set[str], context: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ScenarioFormatError(f"unknown keys in {context}: {sorted(unknown)}")


def _tradeoff_from(doc: dict) -> UtilityTradeoff:
    _require_keys(doc, {"eta0", "eta1", "eta2", "eta3", "theta_T"}, "tradeoff")
    return UtilityTradeoff(
        eta0=float(doc["eta0"]), eta1=float(doc["eta1"]), eta2=float(doc["eta2"]),
        eta3=float(doc["eta3"]), theta_T=float(doc["theta_T"])).validate()


def scenario_from_dict(doc: dict) -> Scenario:
    _require_keys(doc, {"name", "kind", "tradeoff", "toxicity", "efficacy",
                        "grid", "pi_t", "pi_e", "target"}, "scenario")
    kind = doc.get("kind")
    tradeoff = _tradeoff_from(doc["tradeoff"])
    target = None
    if "target" in doc:
        tgt = doc["target"]
        _require_keys(tgt, {"x", "y", "utility"}, "target")
        target = TargetInfo(x=float(tgt["x"]), y=float(tgt["y"]), utility=float(tgt["utility"]))
    if kind == PARAMETRIC:
        tox_doc = doc["toxicity"]
        _require_keys(tox_doc, {"rho00", "rho01", "rho10", "eta"}, "toxicity")
        eff_doc = doc["efficacy"]
        _require_keys(eff_doc, {"beta", "kappa2", "kappa3", "kappa5", "kappa6"}, "efficacy")
        beta = [float(b) for b in eff_doc["beta"]]
        sc = Scenario(
            name=str(doc["name"]), kind=PARAMETRIC, tradeoff=tradeoff,
            toxicity=ToxicityParams(
                rho00=float(tox_doc["rho00"]), rho01=float(tox_doc["rho01"]),
                rho10=float(tox_doc["rho10"]), eta=float(tox_doc["eta"])),
            efficacy=EfficacyParams.from_named(
                beta, eff_doc["kappa2"], eff_doc["kappa3"],
                eff_doc["kappa5"], eff_doc["kappa6"]),
            target=target,
        )
    elif kind == TABULAR:
        grid_doc = doc["grid"]
        _require_keys(grid_doc, {"raw_x", "raw_y"}, "grid")
        grid = standardize_grid(grid_doc["raw_x"], grid_doc["raw_y"])
        sc = Scenario(
            name=str(doc["name"]), kind=TABULAR, tradeoff=tradeoff, grid=grid,
            pi_t_table=np.array(doc["pi_t"], dtype=float),
            pi_e_table=np.array(doc["pi_e"], dtype=float),
            target=target,
        )
    else:
        raise ScenarioFormatError(f"unknown scenario kind {kind!r}")
    return sc.validate()


def scenario_to_dict(sc: Scenario) -> dict:
    doc: dict = {"name": sc.name, "kind": sc.kind, "tradeoff": {
        "eta0": sc.tradeoff.eta0, "eta1": sc.tradeoff.eta1, "eta2": sc.tradeoff.eta2,
        "eta3": sc.tradeoff.eta3, "theta_T": sc.tradeoff.theta_T}}
    if sc.kind == PARAMETRIC:
        doc["toxicity"] = {"rho00": sc.toxicity.rho00, "rho01": sc.toxicity.rho01,
                           "rho10": sc.toxicity.rho10, "eta": sc.toxicity.eta}
        doc["efficacy"] = {"beta": list(sc.efficacy.beta),
                           "kappa2": sc.efficacy.knots[1], "kappa3": sc.efficacy.knots[2],
                           "kappa5": sc.efficacy.knots[4], "kappa6": sc.efficacy.knots[5]}
    else:
        doc["grid"] = {"raw_x": list(sc.grid.raw_x), "raw_y": list(sc.grid.raw_y)}
        doc["pi_t"] = [[float(v) for v in row] for row in sc.pi_t_table]
        doc["pi_e"] = [[float(v) for v in row] for row in sc.pi_e_table]
    if sc.target is not None:
        doc["target"] = {"x": sc.target.x, "y": sc.target.y, "utility": sc.target.utility}
    return doc


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ScenarioFormatError(f"scenario file {path} is not a mapping")
    return scenario_from_dict(doc)


def save_scenario(sc: Scenario, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scenario_to_dict(sc), fh, sort_keys=False)
