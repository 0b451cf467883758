"""HTTP/JSON service exposing amortized inference and what-if simulation.

Stateless except for an in-memory TTL cache of posterior samples keyed by
`posterior_id`; the loaded model is immutable and shared read-only across
requests. Payloads are JSON with numbers at full double precision.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .datagen import OBS_LEN
from .errors import ValidationError
from .evaluation import replay
from .npe import PosteriorModel, PosteriorSamples, infer
from .physiology import PopulationConstants, SensorModel
from .scenario import Scenario

CGM_INPUT_RANGE = (20.0, 500.0)


@dataclass
class _Entry:
    samples: np.ndarray
    expires_at: float


class SessionStore:
    """Thread-safe posterior cache with per-entry TTL."""

    def __init__(self, ttl_s: float):
        self.ttl_s = ttl_s
        self._store: dict[str, _Entry] = {}
        self._lock = threading.Lock()

    def put(self, samples: np.ndarray) -> str:
        pid = uuid.uuid4().hex
        with self._lock:
            self._store[pid] = _Entry(samples, time.monotonic() + self.ttl_s)
        return pid

    def get(self, pid: str) -> np.ndarray | None:
        now = time.monotonic()
        with self._lock:
            entry = self._store.get(pid)
            if entry is None:
                return None
            if entry.expires_at < now:
                del self._store[pid]
                return None
            return entry.samples

    def purge(self) -> None:
        now = time.monotonic()
        with self._lock:
            for pid in [k for k, e in self._store.items() if e.expires_at < now]:
                del self._store[pid]


class InferRequest(BaseModel):
    cgm: list[float]
    samples: int = Field(default=1000, ge=1, le=100_000)
    seed: int = 0


class SimulateRequest(BaseModel):
    posterior_id: str | None = None
    params: list[float] | None = None
    scenario: dict
    setting: str = "in_sample"


def build_app(model: PosteriorModel, ttl_min: float = 30.0,
              constants: PopulationConstants | None = None,
              sensor: SensorModel | None = None) -> FastAPI:
    consts = constants or PopulationConstants()
    sens = (sensor or SensorModel()).noiseless()
    store = SessionStore(ttl_s=ttl_min * 60.0)
    model_id = model.model_id()
    app = FastAPI(title="t1dtwin", version="0.1.0")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(RequestValidationError)
    def malformed_body(_, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc.errors())})

    @app.get("/health")
    def health():
        return {"status": "ok", "model_id": model_id}

    @app.post("/infer")
    def handle_infer(req: InferRequest):
        if len(req.cgm) != OBS_LEN:
            raise HTTPException(
                status_code=400,
                detail=f"cgm must contain exactly {OBS_LEN} values, got {len(req.cgm)}")
        y = np.asarray(req.cgm, dtype=float)
        lo, hi = CGM_INPUT_RANGE
        if not np.isfinite(y).all() or y.min() < lo or y.max() > hi:
            raise HTTPException(
                status_code=400,
                detail=f"cgm values must be finite and within [{lo}, {hi}] mg/dL")
        try:
            ps: PosteriorSamples = infer(model, y, n=req.samples, seed=req.seed)
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        pid = store.put(ps.samples)
        store.purge()
        return {"posterior_id": pid, "model_id": model_id,
                "n_samples": int(ps.samples.shape[0]),
                "leakage_rate": ps.leakage_rate,
                "summary": ps.summary()}

    @app.post("/simulate")
    def handle_simulate(req: SimulateRequest):
        if (req.posterior_id is None) == (req.params is None):
            raise HTTPException(
                status_code=400,
                detail="provide exactly one of posterior_id or params")
        if req.params is not None:
            rows = np.asarray(req.params, dtype=float)
            if rows.size not in (8, 17):
                raise HTTPException(status_code=400,
                                    detail="params must have 8 or 17 values")
        else:
            rows = store.get(req.posterior_id)
            if rows is None:
                raise HTTPException(status_code=404,
                                    detail="unknown or expired posterior_id")
        try:
            scenario = Scenario.from_dict(req.scenario)
            band = replay(rows, scenario, req.setting, consts, sens)
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return {"t": band.t_min.tolist(),
                "median": band.median.tolist(),
                "q05": band.q05.tolist(),
                "q95": band.q95.tolist(),
                "n_dropped": band.n_dropped}

    return app


def build_unready_app() -> FastAPI:
    """App without a loaded model: health reports 503, nothing else works."""
    app = FastAPI(title="t1dtwin", version="0.1.0")

    @app.get("/health")
    def health():
        raise HTTPException(status_code=503, detail="model not loaded")

    return app
