"""Session-oriented HTTP API for live trial conduct.

Each session owns one sequential trial engine. Cohort outcomes are recorded
through an idempotent endpoint (client-supplied operation token), every state
change is appended to a per-session JSONL event file, and a killed server
rebuilds identical sessions by replaying those files (all engine randomness
derives from the persisted seed).
"""

from __future__ import annotations

import json
import pathlib
import threading
import uuid
from datetime import datetime, timezone

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .config import ConfigError, design_from_dict, design_to_dict
from .engine import (
    STATUS_ACTIVE,
    CohortAssignment,
    TrialDesign,
    TrialEngine,
    ar_probabilities,
)
from .posterior import summarize_on_grid


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# Wire models
# ---------------------------------------------------------------------------

class GridSpec(BaseModel, extra="forbid"):
    raw_x: list[float] = Field(min_length=2)
    raw_y: list[float] = Field(min_length=2)


class DesignSpec(BaseModel, extra="forbid"):
    theta_T: float = Field(gt=0.0, lt=1.0)
    theta_E: float = Field(default=0.2, ge=0.0, le=1.0)
    u0: float = 0.1
    c1: int = Field(default=15, ge=1)
    m1: int = Field(default=2, ge=1)
    n2: int = Field(default=12, ge=1)
    c2: int = Field(default=9, ge=1)
    m2: int = Field(default=6, ge=1)
    delta1: float = Field(default=0.5, gt=0.0, lt=1.0)
    delta2: float = Field(default=0.7, gt=0.0, lt=1.0)
    alpha_start: float = Field(default=0.25, gt=0.0, le=0.5)
    alpha_stop: float = Field(default=0.5, gt=0.0, le=0.5)
    alpha_step: float = Field(default=0.05, gt=0.0)


class TradeoffSpec(BaseModel, extra="forbid"):
    eta0: float
    eta1: float = Field(gt=0.0)
    eta2: float
    eta3: float


class McmcSpec(BaseModel, extra="forbid"):
    n_burn: int = Field(default=2000, ge=1)
    n_keep: int = Field(default=2000, ge=1)
    thin: int = Field(default=2, ge=1)
    n_chains: int = Field(default=2, ge=1)
    target_accept: float = Field(default=0.35, ge=0.2, le=0.5)


class SessionCreateRequest(BaseModel, extra="forbid"):
    grid: GridSpec | None = None
    design: DesignSpec | None = None
    tradeoff: TradeoffSpec | None = None
    mcmc: McmcSpec | None = None
    lattice_resolution: int | None = Field(default=None, ge=2)
    seed: int | None = None


class PatientSlot(BaseModel):
    patient: int
    x_index: int
    y_index: int
    x: float
    y: float


class AssignmentView(BaseModel):
    stage: int
    cohort: int
    alpha: float | None
    patients: list[PatientSlot]


class StopCheckView(BaseModel):
    rule: str
    value: float
    threshold: float
    stopped: bool


class DiagnosticsView(BaseModel):
    max_split_rhat: float | None
    accept_tox: list[float]
    accept_eff: list[float]


class RecommendationView(BaseModel):
    status: str
    x_opt: float | None
    y_opt: float | None
    u_opt: float


class SessionCreated(BaseModel):
    session_id: str
    status: str
    stage: int
    assignment: AssignmentView
    created_at: str


class SessionView(BaseModel):
    session_id: str
    status: str
    stage: int
    cohorts_recorded: int
    n_enrolled: int
    n_dlt: int
    pending: AssignmentView | None
    has_recommendation: bool
    created_at: str
    updated_at: str


class OutcomeIn(BaseModel, extra="forbid"):
    patient: int
    z_t: int = Field(ge=0, le=1)
    z_e: int = Field(ge=0, le=1)


class CohortRequest(BaseModel, extra="forbid"):
    operation_token: str = Field(min_length=1)
    outcomes: list[OutcomeIn] = Field(min_length=1)


class CohortResponse(BaseModel):
    kind: str
    status: str
    assignment: AssignmentView | None
    stop_checks: list[StopCheckView]
    recommendation: RecommendationView | None
    diagnostics: DiagnosticsView | None


class PosteriorPayload(BaseModel):
    status: str
    stage: int
    pi_t_hat: list[list[float]]
    pi_e_hat: list[list[float]]
    u_hat: list[list[float]]
    safe_set: list[list[int]]
    lattice_u_hat: list[list[float]]
    lattice_resolution: int
    pi_ar: list[float] | None
    diagnostics: DiagnosticsView


class RecommendationPayload(BaseModel):
    status: str
    x_opt: float | None
    y_opt: float | None
    u_opt: float
    lattice_u_hat: list[list[float]]
    lattice_resolution: int


class Health(BaseModel):
    status: str


RESPONSE_MODELS = {
    "Health": Health,
    "SessionCreated": SessionCreated,
    "SessionView": SessionView,
    "CohortResponse": CohortResponse,
    "PosteriorPayload": PosteriorPayload,
    "RecommendationPayload": RecommendationPayload,
}


def _assignment_view(a: CohortAssignment, grid) -> AssignmentView:
    return AssignmentView(
        stage=a.stage, cohort=a.cohort, alpha=a.alpha,
        patients=[PatientSlot(patient=p.patient, x_index=p.x_index, y_index=p.y_index,
                              x=grid.x_levels[p.x_index], y=grid.y_levels[p.y_index])
                  for p in a.patients])


def _diagnostics_view(engine: TrialEngine) -> DiagnosticsView | None:
    chains = engine.last_chains
    if chains is None:
        return None
    rhat = chains.diagnostics.split_rhat
    return DiagnosticsView(
        max_split_rhat=max(rhat.values()) if rhat else None,
        accept_tox=list(chains.diagnostics.accept_tox),
        accept_eff=list(chains.diagnostics.accept_eff))


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------

class Session:
    def __init__(self, session_id: str, design: TrialDesign, seed: int,
                 log_path: pathlib.Path, created_at: str | None = None):
        self.id = session_id
        self.design = design
        self.seed = seed
        self.log_path = log_path
        self.engine = TrialEngine(design, seed=seed, always_fit_both=True)
        self.lock = threading.RLock()
        self.token_responses: dict[str, dict] = {}
        self.created_at = created_at or _now()
        self.updated_at = self.created_at
        self.cohorts_recorded = 0
        self._summary_cache: tuple[int, object] | None = None

    def append_event(self, event: dict) -> None:
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def write_header(self) -> None:
        self.append_event({
            "type": "created",
            "session_id": self.id,
            "seed": self.seed,
            "design": design_to_dict(self.design),
            "created_at": self.created_at,
        })

    def record(self, token: str, outcomes: list[OutcomeIn]) -> dict:
        """Apply one cohort of outcomes; idempotent per operation token."""
        if token in self.token_responses:
            return self.token_responses[token]
        if self.engine.state.status != STATUS_ACTIVE or self.engine.pending is None:
            raise HTTPException(status_code=409,
                                detail=f"session is {self.engine.state.status}")
        try:
            step = self.engine.record_outcomes(
                [(o.patient, o.z_t, o.z_e) for o in outcomes])
        except ValueError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from None
        response = CohortResponse(
            kind=step.kind,
            status=step.status,
            assignment=_assignment_view(step.assignment, self.design.grid)
            if step.assignment else None,
            stop_checks=[StopCheckView(rule=c.rule, value=c.value, threshold=c.threshold,
                                       stopped=c.stopped) for c in step.stop_checks],
            recommendation=RecommendationView(
                status=step.recommendation.status, x_opt=step.recommendation.x_opt,
                y_opt=step.recommendation.y_opt, u_opt=step.recommendation.u_opt)
            if step.recommendation else None,
            diagnostics=_diagnostics_view(self.engine),
        ).model_dump()
        self.cohorts_recorded += 1
        self.updated_at = _now()
        self.token_responses[token] = response
        self.append_event({
            "type": "cohort-recorded",
            "token": token,
            "outcomes": [[o.patient, o.z_t, o.z_e] for o in outcomes],
            "response": response,
            "recorded_at": self.updated_at,
        })
        return response

    def replay(self, events: list[dict]) -> None:
        """Rebuild engine state from persisted cohort events."""
        for event in events:
            if event.get("type") != "cohort-recorded":
                continue
            outcomes = [(int(p), int(zt), int(ze)) for p, zt, ze in event["outcomes"]]
            expected = {pa.patient for pa in self.engine.pending.patients}
            if {o[0] for o in outcomes} != expected:
                raise RuntimeError(f"event log out of sync with engine for session {self.id}")
            self.engine.record_outcomes(outcomes)
            self.token_responses[event["token"]] = event["response"]
            self.cohorts_recorded += 1
            self.updated_at = event.get("recorded_at", self.updated_at)

    def grid_summary(self):
        """Full posterior summary (with lattice) for the latest fit, cached."""
        chains = self.engine.last_chains
        if chains is None or chains.eff_draws is None:
            return None
        key = self.engine.fit_counter
        if self._summary_cache is not None and self._summary_cache[0] == key:
            return self._summary_cache[1]
        summary = summarize_on_grid(chains, self.design.grid, self.design.tradeoff,
                                    self.design.lattice_resolution)
        self._summary_cache = (key, summary)
        return summary


class SessionStore:
    def __init__(self, sessions_dir: pathlib.Path):
        self.dir = sessions_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, Session] = {}
        self.lock = threading.Lock()

    def create(self, design: TrialDesign, seed: int | None) -> Session:
        session_id = uuid.uuid4().hex[:12]
        if seed is None:
            seed = int(np.random.SeedSequence().generate_state(1)[0])
        session = Session(session_id, design, seed, self.dir / f"{session_id}.jsonl")
        session.write_header()
        with self.lock:
            self.sessions[session_id] = session
        return session

    def get(self, session_id: str) -> Session:
        with self.lock:
            if session_id in self.sessions:
                return self.sessions[session_id]
        session = self._load(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        with self.lock:
            return self.sessions.setdefault(session_id, session)

    def _load(self, session_id: str) -> Session | None:
        path = self.dir / f"{session_id}.jsonl"
        if not path.exists():
            return None
        events = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        if not events or events[0].get("type") != "created":
            return None
        header = events[0]
        design = design_from_dict(header["design"])
        session = Session(session_id, design, int(header["seed"]), path,
                          created_at=header.get("created_at"))
        session.replay(events[1:])
        return session


# ---------------------------------------------------------------------------
# Application
# ---------------------------------------------------------------------------

def create_app(sessions_dir="sessions", default_design: TrialDesign | None = None) -> FastAPI:
    app = FastAPI(title="dosecombo conduct service", version="0.1.0")
    store = SessionStore(pathlib.Path(sessions_dir))
    app.state.store = store

    def build_design(req: SessionCreateRequest) -> TrialDesign:
        if req.grid is None and default_design is not None:
            base = design_to_dict(default_design)
        elif req.grid is None:
            raise HTTPException(status_code=422,
                                detail="grid is required (no default design configured)")
        else:
            base = {}
        doc = dict(base)
        if req.grid is not None:
            doc["grid"] = req.grid.model_dump()
        if req.design is not None:
            doc["design"] = req.design.model_dump()
        elif "design" not in doc:
            raise HTTPException(status_code=422, detail="design constants are required")
        if req.tradeoff is not None:
            doc["tradeoff"] = {**req.tradeoff.model_dump()}
        elif "tradeoff" not in doc:
            raise HTTPException(status_code=422, detail="tradeoff constants are required")
        if req.mcmc is not None:
            doc["mcmc"] = req.mcmc.model_dump()
        if req.lattice_resolution is not None:
            doc["lattice_resolution"] = req.lattice_resolution
        try:
            return design_from_dict(doc)
        except ConfigError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None

    @app.get("/healthz", response_model=Health)
    def healthz():
        return Health(status="ok")

    @app.post("/sessions", response_model=SessionCreated, status_code=201)
    def create_session(req: SessionCreateRequest):
        design = build_design(req)
        session = store.create(design, req.seed)
        return SessionCreated(
            session_id=session.id,
            status=session.engine.state.status,
            stage=session.engine.state.stage,
            assignment=_assignment_view(session.engine.pending, design.grid),
            created_at=session.created_at,
        )

    @app.get("/sessions/{session_id}", response_model=SessionView)
    def get_session(session_id: str):
        s = store.get(session_id)
        with s.lock:
            eng = s.engine
            return SessionView(
                session_id=s.id,
                status=eng.state.status,
                stage=eng.state.stage,
                cohorts_recorded=s.cohorts_recorded,
                n_enrolled=len(eng.state.data),
                n_dlt=eng.state.data.n_dlt,
                pending=_assignment_view(eng.pending, s.design.grid) if eng.pending else None,
                has_recommendation=eng.recommendation is not None,
                created_at=s.created_at,
                updated_at=s.updated_at,
            )

    @app.post("/sessions/{session_id}/cohorts", response_model=CohortResponse)
    def record_cohort(session_id: str, req: CohortRequest):
        s = store.get(session_id)
        with s.lock:
            return s.record(req.operation_token, req.outcomes)

    @app.get("/sessions/{session_id}/posterior", response_model=PosteriorPayload)
    def get_posterior(session_id: str):
        s = store.get(session_id)
        with s.lock:
            summary = s.grid_summary()
            if summary is None:
                raise HTTPException(status_code=409,
                                    detail="no efficacy fit available yet; record a full "
                                           "stage-1 history first")
            eng = s.engine
            pi_ar = None
            if eng.state.stage == 2 and summary.safe_set:
                pi_ar = [float(v) for v in ar_probabilities(summary)]
            return PosteriorPayload(
                status=eng.state.status,
                stage=eng.state.stage,
                pi_t_hat=summary.pi_t_hat.tolist(),
                pi_e_hat=summary.pi_e_hat.tolist(),
                u_hat=summary.u_hat.tolist(),
                safe_set=[[i, j] for (i, j) in summary.safe_set],
                lattice_u_hat=summary.lattice_u_hat.tolist(),
                lattice_resolution=summary.lattice_resolution,
                pi_ar=pi_ar,
                diagnostics=_diagnostics_view(eng),
            )

    @app.get("/sessions/{session_id}/recommendation", response_model=RecommendationPayload)
    def get_recommendation(session_id: str):
        s = store.get(session_id)
        with s.lock:
            rec = s.engine.recommendation
            if rec is None:
                raise HTTPException(status_code=409, detail="trial is not completed")
            return RecommendationPayload(
                status=rec.status, x_opt=rec.x_opt, y_opt=rec.y_opt, u_opt=rec.u_opt,
                lattice_u_hat=rec.lattice_u_hat.tolist(),
                lattice_resolution=rec.lattice_resolution,
            )

    return app
