"""Dose-toxicity and dose-efficacy probability models plus the benefit-risk utility.

Everything in this module is pure and deterministic: standardized-dose grids,
the logistic toxicity surface in its clinician-facing parameterization, the
truncated-power cubic-spline efficacy surface, and the utility that trades
efficacy against toxicity. All evaluators accept scalars or numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

# Probabilities are clamped this far from {0, 1} before logit so that
# near-boundary MCMC proposals stay finite.
PROB_CLIP = 1e-12


class InvalidGridError(ValueError):
    """Raw dose lists are too short or not strictly increasing."""


class InvalidParamsError(ValueError):
    """Model parameters violate their support constraints."""


class DoseDomainError(ValueError):
    """A standardized dose or probability falls outside its domain."""


def _clip_prob(p):
    return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


def _check_unit(value, name: str) -> None:
    arr = np.asarray(value, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(~np.isfinite(arr)):
        raise DoseDomainError(f"{name} must lie in [0, 1], got {value!r}")


@dataclass(frozen=True)
class StandardDoseGrid:
    """Discrete dose combinations with each compound mapped affinely onto [0, 1]."""

    raw_x: tuple[float, ...]
    raw_y: tuple[float, ...]
    x_levels: tuple[float, ...]
    y_levels: tuple[float, ...]

    @property
    def n_x(self) -> int:
        return len(self.x_levels)

    @property
    def n_y(self) -> int:
        return len(self.y_levels)

    def combos(self) -> list[tuple[int, int]]:
        """All (x index, y index) pairs in lexicographic order."""
        return [(i, j) for i in range(self.n_x) for j in range(self.n_y)]


def standardize_grid(raw_x, raw_y) -> StandardDoseGrid:
    """Build a StandardDoseGrid from raw dose lists (strictly increasing, length >= 2)."""
    grids = []
    for name, raw in (("raw_x", raw_x), ("raw_y", raw_y)):
        levels = [float(v) for v in raw]
        if len(levels) < 2:
            raise InvalidGridError(f"{name} needs at least 2 dose levels, got {len(levels)}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise InvalidGridError(f"{name} must be strictly increasing: {levels}")
        span = levels[-1] - levels[0]
        grids.append(tuple((v - levels[0]) / span for v in levels))
    return StandardDoseGrid(
        raw_x=tuple(float(v) for v in raw_x),
        raw_y=tuple(float(v) for v in raw_y),
        x_levels=grids[0],
        y_levels=grids[1],
    )


@dataclass(frozen=True)
class ToxicityParams:
    """Logistic toxicity surface parameterized by corner DLT probabilities.

    rho00, rho10, rho01 are the DLT probabilities at the standardized
    combinations (0,0), (1,0) and (0,1); eta >= 0 captures synergy. The prior
    construction forces rho00 <= min(rho01, rho10), which makes the surface
    nondecreasing in both doses.
    """

    rho00: float
    rho01: float
    rho10: float
    eta: float

    def is_valid(self) -> bool:
        return (
            0.0 < self.rho00 < 1.0
            and 0.0 < self.rho01 < 1.0
            and 0.0 < self.rho10 < 1.0
            and self.rho00 <= min(self.rho01, self.rho10)
            and self.eta >= 0.0
        )

    def validate(self) -> "ToxicityParams":
        if not self.is_valid():
            raise InvalidParamsError(f"toxicity parameters out of support: {self}")
        return self

    def alphas(self) -> tuple[float, float, float]:
        """Intercept and slopes of the logistic surface (clamped logits)."""
        a0 = float(logit(_clip_prob(self.rho00)))
        a1 = float(logit(_clip_prob(self.rho10))) - a0
        a2 = float(logit(_clip_prob(self.rho01))) - a0
        return a0, a1, a2


@dataclass(frozen=True)
class EfficacyParams:
    """Cubic-spline efficacy surface on the logit scale.

    beta holds the 12 spline coefficients; knots holds the 6 breakpoints with
    knots[0] and knots[3] pinned at 0. The x-axis basis uses knots[0:3], the
    y-axis basis knots[3:6].
    """

    beta: tuple[float, ...]
    knots: tuple[float, ...]

    def __post_init__(self):
        if len(self.beta) != 12:
            raise InvalidParamsError(f"expected 12 beta coefficients, got {len(self.beta)}")
        if len(self.knots) != 6:
            raise InvalidParamsError(f"expected 6 knots, got {len(self.knots)}")

    def is_valid(self) -> bool:
        k1, k2, k3, k4, k5, k6 = self.knots
        return (
            k1 == 0.0
            and k4 == 0.0
            and 0.0 <= k2 < k3 <= 1.0
            and 0.0 <= k5 < k6 <= 1.0
            and all(math.isfinite(b) for b in self.beta)
        )

    def validate(self) -> "EfficacyParams":
        if not self.is_valid():
            raise InvalidParamsError(f"efficacy parameters out of support: {self}")
        return self

    @classmethod
    def from_named(cls, beta, kappa2, kappa3, kappa5, kappa6) -> "EfficacyParams":
        return cls(beta=tuple(float(b) for b in beta),
                   knots=(0.0, float(kappa2), float(kappa3), 0.0, float(kappa5), float(kappa6)))


@dataclass(frozen=True)
class UtilityTradeoff:
    """Physician-elicited constants of the benefit-risk utility.

    The utility is zero whenever toxicity exceeds theta_T, decreases linearly
    in toxicity below that bound and increases exponentially in efficacy.
    """

    eta0: float
    eta1: float
    eta2: float
    eta3: float
    theta_T: float

    def validate(self) -> "UtilityTradeoff":
        if not (0.0 < self.theta_T < 1.0):
            raise InvalidParamsError(f"theta_T must be in (0, 1), got {self.theta_T}")
        if not self.eta1 > 0.0:
            raise InvalidParamsError(f"eta1 must be positive, got {self.eta1}")
        return self


# Trade-off constants used throughout the simulation studies.
DEFAULT_TRADEOFF = UtilityTradeoff(eta0=0.368, eta1=0.385, eta2=1.28, eta3=-0.385, theta_T=0.3)


@dataclass(frozen=True)
class DesignConstants:
    """Sample-size decomposition, safety thresholds and the feasibility-bound schedule.

    theta_E and u0 are recorded for reporting only; no decision rule in the
    design reads them.
    """

    theta_T: float = 0.3
    theta_E: float = 0.2
    u0: float = 0.1
    c1: int = 15
    m1: int = 2
    n2: int = 12
    c2: int = 9
    m2: int = 6
    delta1: float = 0.5
    delta2: float = 0.7
    alpha_start: float = 0.25
    alpha_stop: float = 0.5
    alpha_step: float = 0.05

    @property
    def n1_total(self) -> int:
        return self.c1 * self.m1

    @property
    def n2_total(self) -> int:
        return self.n2 + self.c2 * self.m2

    @property
    def n_total(self) -> int:
        return self.n1_total + self.n2_total

    def validate(self) -> "DesignConstants":
        if not (0.0 < self.theta_T < 1.0):
            raise InvalidParamsError(f"theta_T must be in (0, 1), got {self.theta_T}")
        if not (0.0 <= self.theta_E <= 1.0):
            raise InvalidParamsError(f"theta_E must be in [0, 1], got {self.theta_E}")
        if min(self.c1, self.m1, self.n2, self.c2, self.m2) < 1:
            raise InvalidParamsError("cohort counts and sizes must be positive")
        for name, d in (("delta1", self.delta1), ("delta2", self.delta2)):
            if not (0.0 < d < 1.0):
                raise InvalidParamsError(f"{name} must be in (0, 1), got {d}")
        if self.alpha_step <= 0.0:
            raise InvalidParamsError("alpha_step must be positive")
        if not (self.alpha_start <= self.alpha_stop <= 0.5):
            raise InvalidParamsError("feasibility schedule must satisfy start <= stop <= 0.5")
        return self


def toxicity_prob(p: ToxicityParams, x, y):
    """DLT probability of the logistic surface at standardized doses (x, y).

    The parameterization pins the surface exactly at the corners:
    (0,0) -> rho00, (1,0) -> rho10, (0,1) -> rho01.
    """
    _check_unit(x, "x")
    _check_unit(y, "y")
    a0, a1, a2 = p.alphas()
    u = a0 + a1 * np.asarray(x, dtype=float) + a2 * np.asarray(y, dtype=float) \
        + p.eta * np.asarray(x, dtype=float) * np.asarray(y, dtype=float)
    out = expit(u)
    return float(out) if np.ndim(out) == 0 else out


def spline_logit(p: EfficacyParams, x, y):
    """Logit-scale value of the efficacy spline at standardized doses (x, y)."""
    b = p.beta
    k = p.knots
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    u = (
        b[0]
        + b[1] * x
        + b[2] * x**2
        + b[3] * np.maximum(x - k[0], 0.0) ** 3
        + b[4] * np.maximum(x - k[1], 0.0) ** 3
        + b[5] * np.maximum(x - k[2], 0.0) ** 3
        + b[6] * y
        + b[7] * y**2
        + b[8] * np.maximum(y - k[3], 0.0) ** 3
        + b[9] * np.maximum(y - k[4], 0.0) ** 3
        + b[10] * np.maximum(y - k[5], 0.0) ** 3
        + b[11] * x * y
    )
    return u


def efficacy_prob(p: EfficacyParams, x, y):
    """Response probability of the cubic-spline surface at standardized doses (x, y)."""
    _check_unit(x, "x")
    _check_unit(y, "y")
    if not p.is_valid():
        raise InvalidParamsError(f"efficacy parameters out of support: {p}")
    out = expit(spline_logit(p, x, y))
    return float(out) if np.ndim(out) == 0 else out


def utility(pi_t, pi_e, t: UtilityTradeoff):
    """Benefit-risk utility of a (toxicity, efficacy) probability pair.

    Zero whenever pi_t exceeds t.theta_T; otherwise the product of a linear
    toxicity penalty and an exponential efficacy gain. Nonnegative by
    construction with the default constants (eta1 + eta3 = 0).
    """
    _check_unit(pi_t, "pi_t")
    _check_unit(pi_e, "pi_e")
    pi_t = np.asarray(pi_t, dtype=float)
    pi_e = np.asarray(pi_e, dtype=float)
    linear = 1.0 - (1.0 - t.eta0) * pi_t / t.theta_T
    gain = t.eta1 * np.exp(t.eta2 * pi_e) + t.eta3
    out = np.where(pi_t <= t.theta_T, linear * gain, 0.0)
    return float(out) if np.ndim(out) == 0 else out
