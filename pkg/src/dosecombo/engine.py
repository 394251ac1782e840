"""Two-stage sequential trial engine.

Stage I escalates cohorts of two patients along alternating axes, assigning
each patient the grid level closest to the EWOC percentile of the conditional
maximum tolerated dose, without skipping untried levels. Stage II spreads an
initial cohort over the currently safe combinations and then adaptively
randomizes cohorts with probability proportional to posterior-mean utility.
Safety is monitored after every cohort; a completed trial ends with a
continuous dose-combination recommendation maximizing posterior-mean utility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import betainc

from .models import DesignConstants, StandardDoseGrid, UtilityTradeoff
from .posterior import (
    ChainSet,
    McmcConfig,
    PatientRecord,
    PosteriorSummary,
    TrialData,
    conditional_mtd_percentile,
    sample_chains,
    summarize_grid_only,
    surfaces_at_points,
    utility_on_lattice,
)

STATUS_ACTIVE = "active"
STATUS_STOPPED_STAGE1 = "stopped-safety-stage1"
STATUS_STOPPED_STAGE2 = "stopped-safety-stage2"
STATUS_COMPLETED = "completed"

REC_OK = "ok"
REC_NO_ADMISSIBLE = "no-admissible-dose"


class EngineStateError(RuntimeError):
    """Operation called in a trial state that does not allow it."""


@dataclass(frozen=True)
class PatientAssignment:
    patient: int
    x_index: int
    y_index: int


@dataclass(frozen=True)
class CohortAssignment:
    stage: int
    cohort: int
    alpha: float | None
    patients: tuple[PatientAssignment, ...]


@dataclass(frozen=True)
class StopCheck:
    rule: str
    value: float
    threshold: float
    stopped: bool


@dataclass
class Recommendation:
    status: str
    x_opt: float | None
    y_opt: float | None
    u_opt: float
    lattice_u_hat: np.ndarray | None
    lattice_resolution: int

    def without_lattice(self) -> "Recommendation":
        return replace(self, lattice_u_hat=None)


@dataclass
class TrialState:
    data: TrialData
    grid: StandardDoseGrid
    constants: DesignConstants
    tradeoff: UtilityTradeoff
    stage: int = 1
    c1: int = 1
    c2: int = 0
    cohort: int = 1
    tried_x: set[int] = field(default_factory=set)
    tried_y: set[int] = field(default_factory=set)
    status: str = STATUS_ACTIVE
    history: list[CohortAssignment] = field(default_factory=list)

    def patient_assignment(self, patient: int) -> PatientAssignment:
        for cohort in self.history:
            for pa in cohort.patients:
                if pa.patient == patient:
                    return pa
        raise KeyError(f"patient {patient} has no recorded assignment")


@dataclass(frozen=True)
class TrialDesign:
    grid: StandardDoseGrid
    constants: DesignConstants
    tradeoff: UtilityTradeoff
    mcmc: McmcConfig
    lattice_resolution: int = 101

    def __post_init__(self):
        self.validate()

    def validate(self) -> "TrialDesign":
        self.constants.validate()
        self.tradeoff.validate()
        self.mcmc.validate()
        if self.constants.m1 != 2:
            raise ValueError("stage-1 cohort size m1 must equal 2; the alternating-axis "
                             "escalation is defined for two patients per cohort")
        if self.constants.theta_T != self.tradeoff.theta_T:
            raise ValueError("design and trade-off toxicity bounds must agree")
        if self.lattice_resolution < 2:
            raise ValueError("lattice resolution must be at least 2")
        return self


@dataclass
class EngineStep:
    """Outcome of processing one cohort's outcomes."""

    kind: str  # assignment | stage-transition | stopped | completed
    status: str
    assignment: CohortAssignment | None = None
    stop_checks: tuple[StopCheck, ...] = ()
    recommendation: Recommendation | None = None
    ar_probs: np.ndarray | None = None
    events: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Decision rules
# ---------------------------------------------------------------------------

def feasibility_alpha(c1: int, start: float = 0.25, stop: float = 0.5,
                      step: float = 0.05) -> float:
    """Overdose-control bound for stage-1 cohort c1; widens per cohort, capped."""
    if c1 < 1:
        raise ValueError(f"cohort index must be >= 1, got {c1}")
    return min(start + step * (c1 - 1), stop)


def origin_toxicity_exceedance(chains: ChainSet, theta_T: float) -> float:
    """Posterior probability that toxicity at (0, 0) exceeds theta_T + 0.1.

    The surface equals rho00 exactly at the origin, so the draw column is used
    directly.
    """
    return float(np.mean(chains.tox_draws[:, 0] > theta_T + 0.1))


def stage1_safety_stop(chains: ChainSet, theta_T: float, delta1: float) -> bool:
    return origin_toxicity_exceedance(chains, theta_T) > delta1


def pooled_dlt_exceedance(n_dlt: int, n: int, theta_T: float) -> float:
    """P(pooled DLT rate > theta_T + 0.1) under a Jeffreys Beta(0.5, 0.5) prior."""
    if not (0 <= n_dlt <= n):
        raise ValueError(f"need 0 <= n_dlt <= n, got n_dlt={n_dlt}, n={n}")
    return float(1.0 - betainc(0.5 + n_dlt, 0.5 + n - n_dlt, theta_T + 0.1))


def stage2_safety_stop(n_dlt: int, n: int, theta_T: float, delta2: float) -> bool:
    return pooled_dlt_exceedance(n_dlt, n, theta_T) > delta2


def closest_level_index(levels, value: float) -> int:
    """Index of the level nearest to value; exact ties resolve to the lower level."""
    best = 0
    best_d = abs(levels[0] - value)
    for i in range(1, len(levels)):
        d = abs(levels[i] - value)
        if d < best_d:
            best, best_d = i, d
    return best


def _capped_level(levels, value: float, tried: set[int]) -> int:
    """Nearest level, then the no-skip cap: at most one step above the highest tried."""
    idx = closest_level_index(levels, value)
    if tried:
        idx = min(idx, max(tried) + 1)
    return idx


def first_cohort_assignment(state: TrialState) -> CohortAssignment:
    """Both stage-1 starters at the lowest combination."""
    alpha = feasibility_alpha(1, state.constants.alpha_start, state.constants.alpha_stop,
                              state.constants.alpha_step)
    return CohortAssignment(stage=1, cohort=1, alpha=alpha,
                            patients=(PatientAssignment(1, 0, 0), PatientAssignment(2, 0, 0)))


def stage1_assign(state: TrialState, chains: ChainSet) -> CohortAssignment:
    """Assignment for stage-1 cohort state.c1 (>= 2) from the current posterior.

    Even cohorts move the first patient along x (holding the y of patient
    2*c1-3) and the second along y (holding the x of patient 2*c1-2); odd
    cohorts swap the roles. Both EWOC percentiles come from the same fit.
    """
    if state.stage != 1 or state.status != STATUS_ACTIVE:
        raise EngineStateError(f"stage-1 assignment requested in stage={state.stage}, "
                               f"status={state.status}")
    c1 = state.c1
    if c1 < 2:
        raise EngineStateError("cohort 1 is fixed at the lowest combination")
    cons = state.constants
    alpha = feasibility_alpha(c1, cons.alpha_start, cons.alpha_stop, cons.alpha_step)
    theta = cons.theta_T
    gx, gy = state.grid.x_levels, state.grid.y_levels
    prev_first = state.patient_assignment(2 * c1 - 3)
    prev_second = state.patient_assignment(2 * c1 - 2)

    def new_x(held_y_index: int) -> int:
        pct = conditional_mtd_percentile(chains, "y", gy[held_y_index], alpha, theta)
        return _capped_level(gx, pct, state.tried_x)

    def new_y(held_x_index: int) -> int:
        pct = conditional_mtd_percentile(chains, "x", gx[held_x_index], alpha, theta)
        return _capped_level(gy, pct, state.tried_y)

    if c1 % 2 == 0:
        a = PatientAssignment(2 * c1 - 1, new_x(prev_first.y_index), prev_first.y_index)
        b = PatientAssignment(2 * c1, prev_second.x_index, new_y(prev_second.x_index))
    else:
        a = PatientAssignment(2 * c1 - 1, prev_first.x_index, new_y(prev_first.x_index))
        b = PatientAssignment(2 * c1, new_x(prev_second.y_index), prev_second.y_index)
    return CohortAssignment(stage=1, cohort=state.cohort, alpha=alpha, patients=(a, b))


def stage2_initial_allocation(summary: PosteriorSummary, n2: int,
                              rng: np.random.Generator, first_patient: int,
                              cohort: int) -> CohortAssignment:
    """Spread the first stage-2 cohort over as many safe combinations as possible."""
    safe = summary.safe_set
    if not safe:
        raise ValueError("no admissible dose combinations to allocate")
    k = len(safe)
    if k >= n2:
        idx = rng.choice(k, size=n2, replace=False)
    else:
        idx = np.concatenate([rng.permutation(k), rng.choice(k, size=n2 - k, replace=True)])
    patients = tuple(
        PatientAssignment(first_patient + i, safe[j][0], safe[j][1])
        for i, j in enumerate(idx)
    )
    return CohortAssignment(stage=2, cohort=cohort, alpha=None, patients=patients)


def ar_probabilities(summary: PosteriorSummary) -> np.ndarray:
    """Randomization probabilities over summary.safe_set; uniform if all utilities vanish."""
    safe = summary.safe_set
    if not safe:
        raise ValueError("no admissible dose combinations")
    u = np.array([summary.u_hat[i, j] for (i, j) in safe], dtype=float)
    total = u.sum()
    if total > 0.0:
        return u / total
    return np.full(len(safe), 1.0 / len(safe))


def stage2_ar_assign(summary: PosteriorSummary, m2: int, rng: np.random.Generator,
                     first_patient: int, cohort: int) -> CohortAssignment:
    """Independently randomize m2 patients proportionally to posterior-mean utility."""
    safe = summary.safe_set
    probs = ar_probabilities(summary)
    idx = rng.choice(len(safe), size=m2, p=probs)
    patients = tuple(
        PatientAssignment(first_patient + i, safe[j][0], safe[j][1])
        for i, j in enumerate(idx)
    )
    return CohortAssignment(stage=2, cohort=cohort, alpha=None, patients=patients)


def posterior_mean_utility_at(chains: ChainSet, x: float, y: float,
                              tradeoff: UtilityTradeoff) -> float:
    _, _, u = surfaces_at_points(chains, np.array([x]), np.array([y]), tradeoff)
    return float(u[0])


def recommend_optimal(chains: ChainSet, tradeoff: UtilityTradeoff,
                      resolution: int = 101) -> Recommendation:
    """Continuous argmax of posterior-mean utility over the standardized square.

    Lattice argmax (row-major, so ties resolve to the smallest x then smallest
    y) refined by a greedy coordinate search whose step starts at the lattice
    spacing and halves six times; the refinement never decreases the
    objective.
    """
    lat = utility_on_lattice(chains, resolution, tradeoff)
    if lat.max() <= 0.0:
        return Recommendation(status=REC_NO_ADMISSIBLE, x_opt=None, y_opt=None, u_opt=0.0,
                              lattice_u_hat=lat, lattice_resolution=resolution)
    flat = int(np.argmax(lat))
    ix, iy = divmod(flat, resolution)
    spacing = 1.0 / (resolution - 1)
    x, y = ix * spacing, iy * spacing
    best = float(lat[ix, iy])
    h = spacing
    for _ in range(6):
        improved = True
        guard = 0
        while improved and guard < 100:
            improved = False
            guard += 1
            for dx, dy in ((h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h)):
                cx = min(max(x + dx, 0.0), 1.0)
                cy = min(max(y + dy, 0.0), 1.0)
                if cx == x and cy == y:
                    continue
                val = posterior_mean_utility_at(chains, cx, cy, tradeoff)
                if val > best:
                    x, y, best = cx, cy, val
                    improved = True
        h *= 0.5
    return Recommendation(status=REC_OK, x_opt=x, y_opt=y, u_opt=best,
                          lattice_u_hat=lat, lattice_resolution=resolution)


# ---------------------------------------------------------------------------
# Sequential engine
# ---------------------------------------------------------------------------

class TrialEngine:
    """Owns a TrialState and advances it one cohort at a time.

    All randomness derives from the integer seed: adaptive-randomization draws
    from one stream, each posterior fit from a counter-indexed stream, so a
    replayed sequence of outcomes reproduces the identical trial.
    """

    def __init__(self, design: TrialDesign, seed: int, always_fit_both: bool = False):
        design.validate()
        self.design = design
        self.seed = int(seed)
        # stage-1 decisions only read the toxicity chain, so simulation skips
        # the efficacy fit there; interactive use wants both for heatmaps
        self.always_fit_both = always_fit_both
        self.state = TrialState(data=TrialData(), grid=design.grid,
                                constants=design.constants, tradeoff=design.tradeoff)
        self.ar_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(2,)))
        self.fit_counter = 0
        self.pending: CohortAssignment | None = first_cohort_assignment(self.state)
        self.state.history.append(self.pending)
        self.last_chains: ChainSet | None = None
        self.last_summary: PosteriorSummary | None = None
        self.recommendation: Recommendation | None = None

    # -- helpers ----------------------------------------------------------

    def _fit(self, models: str, doubled: bool = False) -> ChainSet:
        fit_seed = int(np.random.SeedSequence(
            entropy=self.seed, spawn_key=(1, self.fit_counter)).generate_state(1)[0])
        self.fit_counter += 1
        cfg = replace(self.design.mcmc, seed=fit_seed)
        if doubled:
            cfg = cfg.doubled()
        chains = sample_chains(self.state.data, cfg, models=models)
        self.last_chains = chains
        return chains

    def _append_records(self, outcomes: dict[int, tuple[int, int]]) -> None:
        st = self.state
        for pa in self.pending.patients:
            z_t, z_e = outcomes[pa.patient]
            st.data.append(PatientRecord(
                x=st.grid.x_levels[pa.x_index], y=st.grid.y_levels[pa.y_index],
                z_t=z_t, z_e=z_e, stage=self.pending.stage, cohort_index=self.pending.cohort))
            st.tried_x.add(pa.x_index)
            st.tried_y.add(pa.y_index)

    def _cohort_event(self, assignment: CohortAssignment, outcomes, stop_checks) -> dict:
        st = self.state
        return {
            "type": "cohort",
            "cohort": assignment.cohort,
            "stage": assignment.stage,
            "alpha": assignment.alpha,
            "patients": [
                {
                    "patient": pa.patient,
                    "x_index": pa.x_index,
                    "y_index": pa.y_index,
                    "x": st.grid.x_levels[pa.x_index],
                    "y": st.grid.y_levels[pa.y_index],
                    "z_t": outcomes[pa.patient][0],
                    "z_e": outcomes[pa.patient][1],
                }
                for pa in assignment.patients
            ],
            "stop_checks": [
                {"rule": c.rule, "value": c.value, "threshold": c.threshold, "stopped": c.stopped}
                for c in stop_checks
            ],
            "status_after": st.status,
        }

    # -- public API -------------------------------------------------------

    def record_outcomes(self, outcomes) -> EngineStep:
        """Process one cohort's outcomes: (patient, z_t, z_e) triples.

        The outcomes must cover exactly the pending assignment's patients.
        Returns the next action (assignment, stage transition, stop, or
        completion with the final recommendation).
        """
        if self.state.status != STATUS_ACTIVE or self.pending is None:
            raise EngineStateError(f"trial is not accepting outcomes (status={self.state.status})")
        expected = {pa.patient for pa in self.pending.patients}
        seen: dict[int, tuple[int, int]] = {}
        for patient, z_t, z_e in outcomes:
            if patient not in expected:
                raise ValueError(f"patient {patient} is not part of the pending cohort")
            if patient in seen:
                raise ValueError(f"duplicate outcome for patient {patient}")
            if z_t not in (0, 1) or z_e not in (0, 1):
                raise ValueError(f"outcomes must be binary, got ({z_t}, {z_e})")
            seen[patient] = (int(z_t), int(z_e))
        if set(seen) != expected:
            missing = sorted(expected - set(seen))
            raise ValueError(f"incomplete cohort: missing outcomes for patients {missing}")

        recorded = self.pending
        self._append_records(seen)
        self.pending = None
        if recorded.stage == 1:
            step = self._advance_stage1(seen, recorded)
        else:
            step = self._advance_stage2(seen, recorded)
        return step

    def _advance_stage1(self, outcomes, recorded: CohortAssignment) -> EngineStep:
        st = self.state
        cons = st.constants
        last_cohort = st.c1 == cons.c1
        chains = self._fit("both" if (last_cohort or self.always_fit_both) else "toxicity")
        frac = origin_toxicity_exceedance(chains, cons.theta_T)
        stopped = frac > cons.delta1
        checks = (StopCheck("stage1-origin-toxicity", frac, cons.delta1, stopped),)

        if stopped:
            st.status = STATUS_STOPPED_STAGE1
            event = self._cohort_event(recorded, outcomes, checks)
            return EngineStep(kind="stopped", status=st.status, stop_checks=checks,
                              events=[event])

        if not last_cohort:
            st.c1 += 1
            st.cohort += 1
            assignment = stage1_assign(st, chains)
            self.pending = assignment
            st.history.append(assignment)
            event = self._cohort_event(recorded, outcomes, checks)
            return EngineStep(kind="assignment", status=st.status, assignment=assignment,
                              stop_checks=checks, events=[event])

        # stage transition
        summary = summarize_grid_only(chains, st.grid, st.tradeoff)
        self.last_summary = summary
        if not summary.safe_set:
            st.status = STATUS_STOPPED_STAGE2
            checks = checks + (StopCheck("stage2-no-admissible-dose", 0.0, 0.0, True),)
            event = self._cohort_event(recorded, outcomes, checks)
            return EngineStep(kind="stopped", status=st.status, stop_checks=checks,
                              events=[event])
        st.stage = 2
        st.c2 = 1
        st.cohort += 1
        assignment = stage2_initial_allocation(
            summary, cons.n2, self.ar_rng, first_patient=len(st.data) + 1, cohort=st.cohort)
        self.pending = assignment
        st.history.append(assignment)
        event = self._cohort_event(recorded, outcomes, checks)
        return EngineStep(kind="stage-transition", status=st.status, assignment=assignment,
                          stop_checks=checks, events=[event])

    def _advance_stage2(self, outcomes, recorded: CohortAssignment) -> EngineStep:
        st = self.state
        cons = st.constants
        n = len(st.data)
        tail = pooled_dlt_exceedance(st.data.n_dlt, n, cons.theta_T)
        stopped = tail > cons.delta2
        checks = (StopCheck("stage2-pooled-dlt", tail, cons.delta2, stopped),)
        if stopped:
            st.status = STATUS_STOPPED_STAGE2
            event = self._cohort_event(recorded, outcomes, checks)
            return EngineStep(kind="stopped", status=st.status, stop_checks=checks,
                              events=[event])

        if st.c2 < 1 + cons.c2:
            chains = self._fit("both")
            summary = summarize_grid_only(chains, st.grid, st.tradeoff)
            self.last_summary = summary
            if not summary.safe_set:
                st.status = STATUS_STOPPED_STAGE2
                checks = checks + (StopCheck("stage2-no-admissible-dose", 0.0, 0.0, True),)
                event = self._cohort_event(recorded, outcomes, checks)
                return EngineStep(kind="stopped", status=st.status, stop_checks=checks,
                                  events=[event])
            st.c2 += 1
            st.cohort += 1
            probs = ar_probabilities(summary)
            assignment = stage2_ar_assign(summary, cons.m2, self.ar_rng,
                                          first_patient=n + 1, cohort=st.cohort)
            self.pending = assignment
            st.history.append(assignment)
            event = self._cohort_event(recorded, outcomes, checks)
            return EngineStep(kind="assignment", status=st.status, assignment=assignment,
                              stop_checks=checks, ar_probs=probs, events=[event])

        # all cohorts enrolled: final fit at doubled budget, then recommend
        chains = self._fit("both", doubled=True)
        self.last_summary = summarize_grid_only(chains, st.grid, st.tradeoff)
        rec = recommend_optimal(chains, st.tradeoff, self.design.lattice_resolution)
        self.recommendation = rec
        st.status = STATUS_COMPLETED
        cohort_event = self._cohort_event(recorded, outcomes, checks)
        rec_event = {
            "type": "recommendation",
            "rec_status": rec.status,
            "x_opt": rec.x_opt,
            "y_opt": rec.y_opt,
            "u_opt": rec.u_opt,
        }
        return EngineStep(kind="completed", status=st.status, recommendation=rec,
                          stop_checks=checks, events=[cohort_event, rec_event])
