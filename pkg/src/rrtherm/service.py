"""HTTP facade over adaptive sessions for the live console.

Endpoints (JSON, snake_case, user-facing units uK and us):

    POST   /api/sessions                 create; body is the session config
    GET    /api/sessions/{id}            full state including the shot trace
    DELETE /api/sessions/{id}            free the session
    POST   /api/sessions/{id}/outcomes   submit one measured count
    POST   /api/sessions/{id}/undo       rewind the most recent shot
    GET    /api/sessions/{id}/infogain   expected-information curve only

Outcome posts are revision-guarded: the client echoes the revision it
last saw (body field or If-Match header) and a mismatch returns 409, so
two consoles can never interleave updates on one session.  The store is
in memory; ``create_app(persist_path=...)`` saves sessions to a JSON
file on shutdown and replays them on the next start.
"""

from __future__ import annotations

import json
import math
import threading
import uuid
from contextlib import asynccontextmanager
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Header, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field, model_validator

from .constants import DEFAULT_WAVELENGTH, K_B, MASS_K41
from .inference import PriorSpec, bayes_update, error_bar, info_gain_curve
from .ingest import record_from_payload, record_to_payload
from .physics import LikelihoodModel, TrapConfig
from .protocols import AdaptiveSession, adaptive_step, default_prior_bounds, undo_last_shot
from .simulate import fitting_model

# Transport resolution of the posterior curve.
MAX_POSTERIOR_POINTS = 256

# Times match when they differ by less than a picosecond; release times
# travel as microsecond floats, far coarser than this.
TIME_MATCH_TOLERANCE = 1e-12


class TimeGrid(BaseModel):
    min_us: float = Field(2.0, gt=0)
    max_us: float = Field(200.0, gt=0)
    step_us: float = Field(2.0, gt=0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.max_us < self.min_us:
            raise ValueError("max_us must not be below min_us")
        return self

    def times(self) -> np.ndarray:
        return np.arange(self.min_us, self.max_us + self.step_us / 2, self.step_us) * 1e-6


class SessionConfig(BaseModel):
    depth_uk: float = Field(gt=0, description="trap depth U0/kB in uK")
    waist_um: float = Field(gt=0, description="beam waist in um")
    mass_kg: float = Field(MASS_K41, gt=0)
    wavelength_nm: float = Field(DEFAULT_WAVELENGTH / 1e-9, gt=0)
    prior_min_uk: float | None = Field(None, gt=0)
    prior_max_uk: float | None = Field(None, gt=0)
    prior_points: int = Field(1001, ge=16, le=100_000)
    single_atom: bool = False
    mean_loading: float | None = Field(None, gt=0)
    atom_cap: int = Field(7, ge=1, le=64)
    time_grid: TimeGrid = Field(default_factory=TimeGrid)

    @model_validator(mode="after")
    def _consistent(self):
        if self.single_atom and self.mean_loading is not None:
            raise ValueError("single_atom and mean_loading are mutually exclusive")
        if not self.single_atom and self.mean_loading is None:
            raise ValueError("either single_atom or mean_loading is required")
        if (self.prior_min_uk is None) != (self.prior_max_uk is None):
            raise ValueError("prior_min_uk and prior_max_uk come together")
        if self.prior_min_uk is not None and self.prior_min_uk >= self.prior_max_uk:
            raise ValueError("prior_min_uk must be below prior_max_uk")
        return self

    def trap(self) -> TrapConfig:
        return TrapConfig(
            depth=self.depth_uk * 1e-6 * K_B,
            waist=self.waist_um * 1e-6,
            mass=self.mass_kg,
            wavelength=self.wavelength_nm * 1e-9,
        )

    def prior(self) -> PriorSpec:
        trap = self.trap()
        if self.prior_min_uk is None:
            lo, hi = default_prior_bounds(trap)
        else:
            lo, hi = self.prior_min_uk * 1e-6, self.prior_max_uk * 1e-6
        return PriorSpec(lo, hi, grid_points=self.prior_points)

    def model(self) -> LikelihoodModel:
        trap = self.trap()
        if self.single_atom:
            return LikelihoodModel(trap)
        return fitting_model(trap, self.mean_loading, self.atom_cap)


class OutcomePost(BaseModel):
    t_us: float = Field(ge=0)
    n: int = Field(ge=0)
    revision: int | None = Field(None, ge=0)
    override: bool = False


class StoredSession:
    """One live session: envelope bookkeeping around an AdaptiveSession."""

    def __init__(self, config: SessionConfig, session: AdaptiveSession, created: str | None = None):
        self.id = uuid.uuid4().hex
        self.created = created or datetime.now(timezone.utc).isoformat()
        self.config = config
        self.session = session
        self.lock = threading.Lock()

    @classmethod
    def start(cls, config: SessionConfig) -> "StoredSession":
        session = AdaptiveSession.start(
            config.prior(), config.model(), calibration=(),
            search_times=config.time_grid.times(),
        )
        return cls(config, session)

    @property
    def revision(self) -> int:
        return len(self.session.record.shots)


def _downsample(posterior) -> dict:
    thetas = posterior.thetas
    densities = posterior.densities
    if thetas.size > MAX_POSTERIOR_POINTS:
        # The grid is log-spaced, so index-even picks stay log-spaced.
        idx = np.unique(np.linspace(0, thetas.size - 1, MAX_POSTERIOR_POINTS).round().astype(int))
        thetas, densities = thetas[idx], densities[idx]
    return {
        "theta_uk": [t / 1e-6 for t in thetas],
        # Densities are per kelvin; scaled to per uK so the curve pairs
        # with the theta_uk axis.
        "density": [d * 1e-6 for d in densities],
    }


def _trace(session: AdaptiveSession) -> list[dict]:
    return [
        {
            "t_us": p.release_time / 1e-6,
            "n": p.outcome,
            "temperature_uk": p.estimate / 1e-6,
            "error_uk": p.error / 1e-6,
        }
        for p in session.trace
    ]


def _infogain_payload(stored: StoredSession) -> dict:
    curve = info_gain_curve(stored.session.posterior, stored.session.model, stored.session.search_times)
    return {
        "t_us": [t / 1e-6 for t in curve.times],
        "gain": [float(g) for g in curve.gains],
        "best_time_us": curve.best_time / 1e-6,
    }


def _state(stored: StoredSession) -> dict:
    session = stored.session
    est, err = error_bar(session.posterior)
    return {
        "id": stored.id,
        "created": stored.created,
        "revision": stored.revision,
        "config": stored.config.model_dump(),
        "temperature_uk": est / 1e-6,
        "error_uk": err / 1e-6,
        "next_time_us": session.next_time / 1e-6,
        "shots": len(session.record.shots),
        "trace": _trace(session),
        "posterior": _downsample(session.posterior),
        "info_gain": _infogain_payload(stored),
    }


def create_app(persist_path: str | None = None) -> FastAPI:
    sessions: dict[str, StoredSession] = {}
    store_lock = threading.Lock()

    def restore() -> None:
        if not persist_path or not Path(persist_path).exists():
            return
        saved = json.loads(Path(persist_path).read_text())
        for entry in saved.get("sessions", []):
            config = SessionConfig.model_validate(entry["config"])
            record = record_from_payload(entry["record"])
            session = AdaptiveSession.start(
                config.prior(), config.model(), calibration=record.calibration,
                search_times=config.time_grid.times(),
            )
            for t, n in record.shots:
                session = adaptive_step(replace(session, next_time=t), n)
            stored = StoredSession(config, session, created=entry["created"])
            stored.id = entry["id"]
            sessions[stored.id] = stored

    def persist() -> None:
        if not persist_path:
            return
        payload = {
            "sessions": [
                {
                    "id": s.id,
                    "created": s.created,
                    "config": s.config.model_dump(),
                    "record": record_to_payload(s.session.record),
                }
                for s in sessions.values()
            ]
        }
        Path(persist_path).write_text(json.dumps(payload, indent=2))

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        restore()
        yield
        persist()

    app = FastAPI(title="release-recapture session service", lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def lookup(session_id: str) -> StoredSession:
        stored = sessions.get(session_id)
        if stored is None:
            raise HTTPException(status_code=404, detail="unknown session id")
        return stored

    @app.post("/api/sessions", status_code=201)
    def create_session(config: SessionConfig) -> dict:
        stored = StoredSession.start(config)
        with store_lock:
            sessions[stored.id] = stored
        return _state(stored)

    @app.get("/api/sessions/{session_id}")
    def get_session(session_id: str) -> dict:
        return _state(lookup(session_id))

    @app.delete("/api/sessions/{session_id}", status_code=204)
    def delete_session(session_id: str) -> Response:
        lookup(session_id)
        with store_lock:
            del sessions[session_id]
        return Response(status_code=204)

    @app.post("/api/sessions/{session_id}/outcomes")
    def post_outcome(
        session_id: str,
        outcome: OutcomePost,
        if_match: str | None = Header(None),
    ) -> dict:
        stored = lookup(session_id)
        revision = outcome.revision
        if revision is None and if_match is not None:
            try:
                revision = int(if_match.strip('"'))
            except ValueError:
                raise HTTPException(status_code=422, detail="If-Match must be a revision number")
        if revision is None:
            raise HTTPException(
                status_code=422,
                detail="a revision is required, in the body or an If-Match header",
            )
        with stored.lock:
            if revision != stored.revision:
                raise HTTPException(
                    status_code=409,
                    detail=f"stale revision {revision}; server is at {stored.revision}",
                )
            t = outcome.t_us * 1e-6
            recommended = stored.session.next_time
            matches = math.isclose(t, recommended, rel_tol=0.0, abs_tol=TIME_MATCH_TOLERANCE)
            if not matches and not outcome.override:
                raise HTTPException(
                    status_code=409,
                    detail=(
                        f"t_us {outcome.t_us:g} is not the recommended "
                        f"{recommended / 1e-6:g}; pass override=true to record it anyway"
                    ),
                )
            # A matching post uses the grid time itself, so a transport
            # round trip can never smear the stored record by an ulp.
            step_from = stored.session if matches else replace(stored.session, next_time=t)
            try:
                stored.session = adaptive_step(step_from, outcome.n)
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc))
        return _state(stored)

    @app.post("/api/sessions/{session_id}/undo")
    def undo(session_id: str) -> dict:
        stored = lookup(session_id)
        with stored.lock:
            try:
                stored.session = undo_last_shot(stored.session)
            except ValueError as exc:
                raise HTTPException(status_code=409, detail=str(exc))
        return _state(stored)

    @app.get("/api/sessions/{session_id}/infogain")
    def infogain(session_id: str) -> dict:
        return _infogain_payload(lookup(session_id))

    return app
