#!/usr/bin/env python3
"""Regenerate the shipped ground-truth scenarios under scenarios/.

Six parametric scenarios (three uni-modal, three bi-modal, spanning low to
high target utility, one stressing the stage-I path with a flat low-toxicity
surface and low efficacy along the escalation staircase) plus ten tabular
scenarios for the model-misspecification suite. Every file records the target
dose combination and target utility found by dense brute-force search, and a
summary of surface diagnostics is printed for review.

Deterministic: rerunning rewrites identical files.
"""

from __future__ import annotations

import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from dosecombo.models import (  # noqa: E402
    DEFAULT_TRADEOFF,
    EfficacyParams,
    ToxicityParams,
    standardize_grid,
    toxicity_prob,
    efficacy_prob,
    utility,
)
from dosecombo.scenarios import (  # noqa: E402
    PARAMETRIC,
    TABULAR,
    Scenario,
    TargetInfo,
    brute_force_target,
    save_scenario,
)

OUT_DIR = pathlib.Path(__file__).resolve().parents[1] / "scenarios"
GRID4 = standardize_grid([1, 2, 3, 4], [1, 2, 3, 4])


def fit_axis_spline(targets_x, targets_h, kappa_lo, kappa_hi):
    """Least-squares truncated-power coefficients reproducing a logit-scale curve.

    The curve is pinned to 0 at x=0 (the intercept lives in beta0), so the
    basis is [x, x^2, x^3, (x-kappa_lo)_+^3, (x-kappa_hi)_+^3].
    """
    x = np.asarray(targets_x, dtype=float)
    h = np.asarray(targets_h, dtype=float)
    basis = np.column_stack([
        x, x**2, x**3,
        np.maximum(x - kappa_lo, 0.0) ** 3,
        np.maximum(x - kappa_hi, 0.0) ** 3,
    ])
    coef, *_ = np.linalg.lstsq(basis, h, rcond=None)
    return [round(float(c), 4) for c in coef]


def two_bumps(x, m1, a1, m2, a2, width):
    """Logit-scale curve with maxima of heights a1, a2 near m1 and m2."""
    x = np.asarray(x, dtype=float)
    return a1 * np.exp(-((x - m1) / width) ** 2) + a2 * np.exp(-((x - m2) / width) ** 2)


def single_bump(x, m, width, depth, height):
    x = np.asarray(x, dtype=float)
    return depth + (height - depth) * np.exp(-((x - m) / width) ** 2)


def parametric(name, tox, beta, k2, k3, k5, k6):
    return Scenario(
        name=name, kind=PARAMETRIC, tradeoff=DEFAULT_TRADEOFF,
        toxicity=tox,
        efficacy=EfficacyParams.from_named(beta, k2, k3, k5, k6),
    ).validate()


def find_modes(sc: Scenario, resolution=81) -> list[tuple[float, float, float]]:
    """Major local maxima of the true utility surface (at least half the peak)."""
    ax = np.linspace(0, 1, resolution)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    pt = toxicity_prob(sc.toxicity, xx, yy)
    pe = efficacy_prob(sc.efficacy, xx, yy)
    u = utility(pt, pe, sc.tradeoff)
    padded = np.full((resolution + 2, resolution + 2), -1.0)
    padded[1:-1, 1:-1] = u
    floor = 0.50 * u.max()
    modes = []
    for i in range(resolution):
        for j in range(resolution):
            window = padded[i:i + 3, j:j + 3]
            if u[i, j] > floor and u[i, j] == window.max() and (window == u[i, j]).sum() == 1:
                modes.append((float(ax[i]), float(ax[j]), float(u[i, j])))
    return modes


def build_parametric() -> list[Scenario]:
    xs = np.linspace(0, 1, 41)
    scenarios = []

    # 1: uni-modal, medium target; toxicity stays below theta_T + 0.1 on the
    # whole square, so the escalation path can never breach the safety band.
    scenarios.append(parametric(
        "uni-mid", ToxicityParams(0.05, 0.15, 0.15, 0.0),
        [-1.2, 6, -6, 0, 0, 0, 6, -6, 0, 0, 0, 0.0], 0.33, 0.66, 0.33, 0.66))

    # 2: bi-modal, high target; two tall efficacy ridges along x with the
    # second amplitude chosen so both modes carry nearly equal utility.
    hx = two_bumps(xs, 0.30, 5.2, 0.95, 6.6, 0.22)
    bx = fit_axis_spline(xs, hx - hx[0], 0.5, 0.75)
    beta2 = [-1.8 + float(hx[0])] + bx + [1.6, -1.6, 0, 0, 0, 0.0]
    scenarios.append(parametric(
        "bi-high", ToxicityParams(0.02, 0.08, 0.08, 0.1),
        beta2, 0.5, 0.75, 0.33, 0.66))

    # 3: uni-modal, high target, the stage-I stress case: toxicity is far
    # below the bound everywhere so stage I races up the staircase toward the
    # top corner, while efficacy lives on a wide interior dome off that path
    # (about two expected responses over all thirty stage-I patients).
    hx3 = single_bump(xs, 0.40, 0.26, 0.0, 6.0)
    bx3 = fit_axis_spline(xs, hx3 - hx3[0], 0.45, 0.75)
    by3 = list(bx3)
    beta3 = [-8.2 + 2 * float(hx3[0])] + bx3 + by3 + [0.0]
    scenarios.append(parametric(
        "uni-stress", ToxicityParams(0.01, 0.05, 0.05, 0.1),
        beta3, 0.45, 0.75, 0.45, 0.75))

    # 4: bi-modal, low-moderate target; an efficacy ridge along x + y with a
    # synergistic toxicity bump that carves the ridge middle into two
    # symmetric, equal-utility lobes.
    scenarios.append(parametric(
        "bi-carved", ToxicityParams(0.05, 0.3, 0.3, 3.0),
        [-1.3, 8, -5, 0, 0, 0, 8, -5, 0, 0, 0, -10.0], 0.4, 0.7, 0.4, 0.7))

    # 5: uni-modal, low target; modest efficacy peak at (0.6, 0.4).
    hx5 = single_bump(xs, 0.6, 0.3, 0.0, 2.6)
    bx5 = fit_axis_spline(xs, hx5 - hx5[0], 0.4, 0.7)
    hy5 = single_bump(xs, 0.4, 0.3, 0.0, 2.2)
    by5 = fit_axis_spline(xs, hy5 - hy5[0], 0.35, 0.7)
    beta5 = [-3.2 + float(hx5[0]) + float(hy5[0])] + bx5 + by5 + [0.0]
    scenarios.append(parametric(
        "uni-low", ToxicityParams(0.05, 0.2, 0.2, 0.3),
        beta5, 0.4, 0.7, 0.35, 0.7))

    # 6: bi-modal, low target; a gentler carved ridge (high synergy, modest
    # efficacy) whose two lobes are equal by symmetry.
    scenarios.append(parametric(
        "bi-sparse", ToxicityParams(0.05, 0.3, 0.3, 3.0),
        [-1.0, 6, -3.75, 0, 0, 0, 6, -3.75, 0, 0, 0, -7.5], 0.4, 0.7, 0.4, 0.7))

    return scenarios


def logistic(v):
    return 1.0 / (1.0 + np.exp(-np.asarray(v, dtype=float)))


def build_tabular() -> list[Scenario]:
    """Ten 4x4 truth tables with interaction-free margins and varied optima."""
    idx = np.arange(4) / 3.0
    xx, yy = np.meshgrid(idx, idx, indexing="ij")
    tables = []

    def tox(a, bx, by):
        return logistic(a + bx * xx + by * yy)

    def bump(cx, cy, w, lo, hi):
        return lo + (hi - lo) * np.exp(-(((xx - cx) / w) ** 2 + ((yy - cy) / w) ** 2))

    specs = [
        ("tab-corner-high", tox(-3.2, 1.6, 1.6), bump(1.0, 1.0, 0.8, 0.05, 0.75)),
        ("tab-center-peak", tox(-3.0, 1.2, 1.2), bump(0.5, 0.5, 0.45, 0.05, 0.85)),
        ("tab-x-ridge", tox(-3.4, 2.2, 0.8), bump(0.65, 0.0, 0.55, 0.1, 0.8)),
        ("tab-y-ridge", tox(-3.4, 0.8, 2.2), bump(0.0, 0.65, 0.55, 0.1, 0.8)),
        ("tab-plateau", tox(-3.6, 1.4, 1.4), np.clip(0.15 + 0.8 * np.minimum(xx + yy, 1.0), 0, 0.8)),
        ("tab-low-eff", tox(-3.0, 1.0, 1.0), bump(0.6, 0.6, 0.5, 0.02, 0.4)),
        ("tab-steep-tox", tox(-3.2, 2.6, 2.6), bump(0.35, 0.35, 0.5, 0.1, 0.9)),
        ("tab-asym", tox(-3.8, 2.8, 0.9), bump(0.3, 0.85, 0.5, 0.05, 0.75)),
        ("tab-twin", tox(-3.4, 1.1, 1.1),
         np.maximum(bump(0.15, 0.8, 0.3, 0.05, 0.8), bump(0.8, 0.15, 0.3, 0.05, 0.8))),
        ("tab-flat-safe", tox(-4.6, 1.0, 1.0), bump(0.85, 0.5, 0.6, 0.1, 0.65)),
    ]
    for name, pt, pe in specs:
        tables.append(Scenario(
            name=name, kind=TABULAR, tradeoff=DEFAULT_TRADEOFF, grid=GRID4,
            pi_t_table=np.round(pt, 4), pi_e_table=np.round(pe, 4),
        ).validate())
    return tables


def main() -> int:
    OUT_DIR.mkdir(exist_ok=True)
    print(f"{'name':<16}{'kind':<12}{'modes':<7}{'max piT':<9}{'tgt x':<7}{'tgt y':<7}"
          f"{'piT@tgt':<9}{'target U':<9}")
    for sc in build_parametric() + build_tabular():
        target = brute_force_target(sc, resolution=1001 if sc.kind == PARAMETRIC else 301)
        final = Scenario(**{**sc.__dict__, "target": TargetInfo(
            x=target.x, y=target.y, utility=target.utility)})
        save_scenario(final, OUT_DIR / f"{sc.name}.yaml")
        if sc.kind == PARAMETRIC:
            ax = np.linspace(0, 1, 201)
            xg, yg = np.meshgrid(ax, ax, indexing="ij")
            max_pt = float(np.max(toxicity_prob(sc.toxicity, xg, yg)))
            pt_at = toxicity_prob(sc.toxicity, target.x, target.y)
            modes = find_modes(sc)
            mode_desc = " ".join(f"({mx:.2f},{my:.2f}:{mu:.2f})" for mx, my, mu in modes)
        else:
            max_pt = float(sc.pi_t_table.max())
            pt_at = ""
            mode_desc = ""
            modes = []
        print(f"{sc.name:<16}{sc.kind:<12}{len(modes):<7}{max_pt:<9.3f}{target.x:<7.3f}"
              f"{target.y:<7.3f}{str(pt_at)[:7]:<9}{target.utility:<9.4f}{mode_desc}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
