"""Single-trial simulation, parallel replication and operating characteristics.

Each simulated trial derives all of its randomness from (master_seed, trial
index), so replication is reproducible and independent of worker count. True
utilities are always computed from the scenario, never from the posterior, and
the aggregate characteristics are recomputable from the per-cohort event
records alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from multiprocessing import get_context

import numpy as np

from .engine import (
    STATUS_COMPLETED,
    REC_OK,
    Recommendation,
    TrialDesign,
    TrialEngine,
)
from .scenarios import PARAMETRIC, Scenario, true_surface


@dataclass
class TrialResult:
    trial: int
    status: str
    n_enrolled: int
    n_dlt: int
    recommendation: Recommendation | None
    true_u_opt: float | None
    ar_true_utils: tuple[float, ...]
    events: list[dict]

    @property
    def stopped_early(self) -> bool:
        return self.status != STATUS_COMPLETED

    @property
    def dlt_rate(self) -> float:
        return self.n_dlt / self.n_enrolled if self.n_enrolled else 0.0


@dataclass(frozen=True)
class TrialRow:
    """Flat per-trial record: what the results table stores, one row per trial."""

    trial: int
    status: str
    n_enrolled: int
    n_dlt: int
    x_opt: float | None
    y_opt: float | None
    u_hat_opt: float | None
    true_u_opt: float | None
    ar_n: int
    ar_true_u_sum: float


@dataclass(frozen=True)
class OperatingCharacteristics:
    n_trials: int
    avg_dlt_rate: float
    pct_trials_dlt_above_theta_t: float
    pct_trials_dlt_above_theta_t_plus_10: float
    pct_early_stop: float
    n_recommended: int
    rec_true_utility_mean: float | None
    rec_true_utility_median: float | None
    rec_true_utility_p2_5: float | None
    rec_true_utility_p97_5: float | None
    avg_ar_true_utility: float | None


def derive_trial_seed(master_seed: int, trial_index: int) -> int:
    """Stable per-trial seed; identical under any execution order."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(trial_index,))
    return int(ss.generate_state(1)[0])


def _true_probs_at(scenario: Scenario, design: TrialDesign, pa) -> tuple[float, float]:
    if scenario.kind == PARAMETRIC:
        x = design.grid.x_levels[pa.x_index]
        y = design.grid.y_levels[pa.y_index]
        pt, pe, _ = true_surface(scenario, x, y)
        return pt, pe
    return (float(scenario.pi_t_table[pa.x_index, pa.y_index]),
            float(scenario.pi_e_table[pa.x_index, pa.y_index]))


def _true_utility_at(scenario: Scenario, x: float, y: float) -> float:
    return true_surface(scenario, x, y, interpolate=True)[2]


def simulate_trial(scenario: Scenario, design: TrialDesign, seed: int,
                   trial_index: int = 0) -> TrialResult:
    """Run one full trial against the scenario truth; deterministic given seed."""
    scenario.validate()
    if scenario.kind != PARAMETRIC:
        shape = (scenario.grid.n_x, scenario.grid.n_y)
        if shape != (design.grid.n_x, design.grid.n_y):
            raise ValueError(f"tabular scenario grid {shape} does not match design grid "
                             f"({design.grid.n_x}, {design.grid.n_y})")
    engine_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(0,)).generate_state(1)[0])
    outcome_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    engine = TrialEngine(design, seed=engine_seed)

    events: list[dict] = []
    ar_true: list[float] = []
    initial_stage2_cohort = design.constants.c1 + 1
    step = None
    while engine.state.status == "active":
        assignment = engine.pending
        outcomes = []
        for pa in assignment.patients:
            pt, pe = _true_probs_at(scenario, design, pa)
            z_t = int(outcome_rng.random() < pt)
            z_e = int(outcome_rng.random() < pe)
            outcomes.append((pa.patient, z_t, z_e))
            if assignment.stage == 2 and assignment.cohort > initial_stage2_cohort:
                x = design.grid.x_levels[pa.x_index]
                y = design.grid.y_levels[pa.y_index]
                ar_true.append(_true_utility_at(scenario, x, y))
        step = engine.record_outcomes(outcomes)
        events.extend(step.events)

    rec = None
    true_u_opt = None
    if engine.recommendation is not None:
        rec = engine.recommendation.without_lattice()
        if rec.status == REC_OK:
            true_u_opt = _true_utility_at(scenario, rec.x_opt, rec.y_opt)
    data = engine.state.data
    return TrialResult(
        trial=trial_index,
        status=engine.state.status,
        n_enrolled=len(data),
        n_dlt=data.n_dlt,
        recommendation=rec,
        true_u_opt=true_u_opt,
        ar_true_utils=tuple(ar_true),
        events=events,
    )


def _replicate_worker(args) -> TrialResult:
    scenario, design, master_seed, i = args
    return simulate_trial(scenario, design, derive_trial_seed(master_seed, i), trial_index=i)


def replicate(scenario: Scenario, design: TrialDesign, n_trials: int, master_seed: int,
              workers: int = 1) -> list[TrialResult]:
    """Simulate n_trials independent trials; output is identical for any worker count."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    jobs = [(scenario, design, master_seed, i) for i in range(n_trials)]
    if workers <= 1:
        return [_replicate_worker(job) for job in jobs]
    ctx = get_context("fork")
    with ctx.Pool(processes=workers) as pool:
        results = pool.map(_replicate_worker, jobs, chunksize=max(1, n_trials // (workers * 4)))
    return results


# ---------------------------------------------------------------------------
# Operating characteristics
# ---------------------------------------------------------------------------

def result_to_row(r: TrialResult) -> TrialRow:
    rec = r.recommendation
    has_point = rec is not None and rec.status == REC_OK
    return TrialRow(
        trial=r.trial,
        status=r.status,
        n_enrolled=r.n_enrolled,
        n_dlt=r.n_dlt,
        x_opt=rec.x_opt if has_point else None,
        y_opt=rec.y_opt if has_point else None,
        u_hat_opt=rec.u_opt if has_point else None,
        true_u_opt=r.true_u_opt if has_point else None,
        ar_n=len(r.ar_true_utils),
        ar_true_u_sum=float(sum(r.ar_true_utils)),
    )


def quantile(sorted_values: np.ndarray, q: float) -> float:
    return float(np.quantile(sorted_values, q))


def oc_from_rows(rows: list[TrialRow], theta_T: float) -> OperatingCharacteristics:
    if not rows:
        raise ValueError("no trials to summarize")
    n = len(rows)
    rates = np.array([r.n_dlt / r.n_enrolled if r.n_enrolled else 0.0 for r in rows])
    stopped = sum(1 for r in rows if r.status != STATUS_COMPLETED)
    rec_utils = np.array([r.true_u_opt for r in rows if r.true_u_opt is not None])
    ar_n = sum(r.ar_n for r in rows)
    ar_sum = sum(r.ar_true_u_sum for r in rows)
    have_recs = rec_utils.size > 0
    return OperatingCharacteristics(
        n_trials=n,
        avg_dlt_rate=float(rates.mean()),
        pct_trials_dlt_above_theta_t=100.0 * float(np.mean(rates > theta_T)),
        pct_trials_dlt_above_theta_t_plus_10=100.0 * float(np.mean(rates > theta_T + 0.1)),
        pct_early_stop=100.0 * stopped / n,
        n_recommended=int(rec_utils.size),
        rec_true_utility_mean=float(rec_utils.mean()) if have_recs else None,
        rec_true_utility_median=quantile(rec_utils, 0.5) if have_recs else None,
        rec_true_utility_p2_5=quantile(rec_utils, 0.025) if have_recs else None,
        rec_true_utility_p97_5=quantile(rec_utils, 0.975) if have_recs else None,
        avg_ar_true_utility=(ar_sum / ar_n) if ar_n else None,
    )


def operating_characteristics(results: list[TrialResult], scenario: Scenario,
                              theta_T: float) -> OperatingCharacteristics:
    """Aggregate performance over simulated trials, scored on the scenario truth."""
    return oc_from_rows([result_to_row(r) for r in results], theta_T)


def rows_from_events(events_by_trial: list[list[dict]],
                     scenario: Scenario) -> list[TrialRow]:
    """Reconstruct per-trial rows from event logs alone (scoring independence check)."""
    rows = []
    for trial_idx, events in enumerate(events_by_trial):
        n = 0
        n_dlt = 0
        status = "active"
        rec = None
        stage2_cohorts = sorted({e["cohort"] for e in events
                                 if e.get("type") == "cohort" and e["stage"] == 2})
        first_stage2 = stage2_cohorts[0] if stage2_cohorts else None
        ar_n = 0
        ar_sum = 0.0
        for e in events:
            if e.get("type") == "cohort":
                for pat in e["patients"]:
                    n += 1
                    n_dlt += pat["z_t"]
                    if e["stage"] == 2 and e["cohort"] != first_stage2:
                        ar_n += 1
                        ar_sum += _true_utility_at(scenario, pat["x"], pat["y"])
                status = e["status_after"]
            elif e.get("type") == "recommendation":
                status = STATUS_COMPLETED
                if e["rec_status"] == REC_OK:
                    rec = (e["x_opt"], e["y_opt"], e["u_opt"])
        true_u = _true_utility_at(scenario, rec[0], rec[1]) if rec else None
        rows.append(TrialRow(
            trial=trial_idx, status=status, n_enrolled=n, n_dlt=n_dlt,
            x_opt=rec[0] if rec else None, y_opt=rec[1] if rec else None,
            u_hat_opt=rec[2] if rec else None, true_u_opt=true_u,
            ar_n=ar_n, ar_true_u_sum=ar_sum,
        ))
    return rows


# ---------------------------------------------------------------------------
# Tables and summary documents
# ---------------------------------------------------------------------------

RESULTS_HEADER = ("trial,status,n_enrolled,n_dlt,x_opt,y_opt,u_hat_opt,true_u_opt,"
                  "ar_n,ar_true_u_sum")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def rows_to_csv(rows: list[TrialRow]) -> str:
    lines = [RESULTS_HEADER]
    for r in rows:
        lines.append(",".join([
            str(r.trial), r.status, str(r.n_enrolled), str(r.n_dlt),
            _fmt(r.x_opt), _fmt(r.y_opt), _fmt(r.u_hat_opt), _fmt(r.true_u_opt),
            str(r.ar_n), _fmt(r.ar_true_u_sum),
        ]))
    return "\n".join(lines) + "\n"


class ResultsParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def rows_from_csv(text: str) -> list[TrialRow]:
    lines = text.splitlines()
    if not lines or lines[0] != RESULTS_HEADER:
        raise ResultsParseError(1, "missing or unexpected results header")
    rows = []
    for idx, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 10:
            raise ResultsParseError(idx, f"expected 10 fields, found {len(parts)}")
        try:
            opt = [None if p == "" else float(p) for p in parts[4:8]]
            rows.append(TrialRow(
                trial=int(parts[0]), status=parts[1], n_enrolled=int(parts[2]),
                n_dlt=int(parts[3]), x_opt=opt[0], y_opt=opt[1], u_hat_opt=opt[2],
                true_u_opt=opt[3], ar_n=int(parts[8]), ar_true_u_sum=float(parts[9]),
            ))
        except ValueError as exc:
            raise ResultsParseError(idx, str(exc)) from None
    if not rows:
        raise ResultsParseError(len(lines) + 1, "no trials in results table")
    return rows


def render_oc_document(oc: OperatingCharacteristics, scenario: Scenario) -> str:
    """Deterministic key: value summary; floats at 17 significant digits.

    Derives entirely from the results rows and the scenario file, so the
    during-simulation document and a later recomputation are byte-identical.
    """
    lines = [
        f"scenario: {scenario.name}",
        f"theta_T: {_fmt(float(scenario.tradeoff.theta_T))}",
        f"n_trials: {oc.n_trials}",
        f"avg_dlt_rate: {_fmt(oc.avg_dlt_rate)}",
        f"pct_trials_dlt_above_theta_t: {_fmt(oc.pct_trials_dlt_above_theta_t)}",
        f"pct_trials_dlt_above_theta_t_plus_10: {_fmt(oc.pct_trials_dlt_above_theta_t_plus_10)}",
        f"pct_early_stop: {_fmt(oc.pct_early_stop)}",
        f"n_recommended: {oc.n_recommended}",
        f"rec_true_utility_mean: {_fmt(oc.rec_true_utility_mean)}",
        f"rec_true_utility_median: {_fmt(oc.rec_true_utility_median)}",
        f"rec_true_utility_p2_5: {_fmt(oc.rec_true_utility_p2_5)}",
        f"rec_true_utility_p97_5: {_fmt(oc.rec_true_utility_p97_5)}",
        f"avg_ar_true_utility: {_fmt(oc.avg_ar_true_utility)}",
    ]
    if scenario.target is not None:
        lines.insert(1, f"target_utility: {_fmt(scenario.target.utility)}")
        lines.insert(1, f"target_y: {_fmt(scenario.target.y)}")
        lines.insert(1, f"target_x: {_fmt(scenario.target.x)}")
    return "\n".join(lines) + "\n"


def true_surface_table(scenario: Scenario, resolution: int = 101) -> str:
    """Plot-ready true-surface lattice (x, y, pi_T, pi_E, utility per line)."""
    ax = np.linspace(0.0, 1.0, resolution)
    lines = ["x,y,pi_t,pi_e,utility"]
    for x in ax:
        for y in ax:
            pt, pe, u = true_surface(scenario, float(x), float(y), interpolate=True)
            lines.append(",".join(_fmt(float(v)) for v in (x, y, pt, pe, u)))
    return "\n".join(lines) + "\n"
