"""JSON-over-HTTP facade for the clinician console.

Read endpoints serve an immutable per-patient analysis snapshot; the only
mutating endpoint is /observe, which serializes writers, appends to the
observation log, and atomically swaps in a recomputed snapshot. What-if
queries are pure functions of cached gradients and never touch state.
"""

from __future__ import annotations

import json
import os
import threading
import time

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .bundle import ModelBundle
from .cohort import PatientRecord, load_cohort, load_schema
from .sensing import EpisodeRunner, SensingPolicy, reveal, select_variables
from .uncertainty import delta_scores

TIER_YELLOW = 0.33
TIER_RED = 0.66
SERVICE_SEED = 20240


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


class WhatIfBody(BaseModel):
    hour: int
    variables: list[str]


class ObserveBody(BaseModel):
    hour: int
    variable: str
    value: float


def risk_tier(risk: float) -> str:
    if risk < TIER_YELLOW:
        return "green"
    if risk < TIER_RED:
        return "yellow"
    return "red"


def _band(risk: float, total_u: float) -> tuple[float, float]:
    half = 2.0 * float(np.sqrt(max(total_u, 0.0)))
    return (max(risk - half, 0.0), min(risk + half, 1.0))


class ConsoleState:
    """Loaded bundle + cohort + derived per-patient analyses."""

    def __init__(self, bundle: ModelBundle, records: list[PatientRecord],
                 observation_log: str | None = None,
                 score_masks: int = 5, uw_samples: int = 20):
        self.bundle = bundle
        self.schema = bundle.schema
        self.records = {r.id: r.copy() for r in records}
        self.observation_log = observation_log
        self.score_masks = score_masks
        self.uw_samples = uw_samples
        self.write_lock = threading.Lock()
        self._replay_log()
        self.analyses: dict[str, list[dict]] = {}
        for pid in self.records:
            self.analyses[pid] = self._analyze(pid)

    # -- analysis ---------------------------------------------------------

    def _runner(self) -> EpisodeRunner:
        policy = SensingPolicy(kind="random", budget=0.0, seed=SERVICE_SEED,
                               score_masks=self.score_masks,
                               uw_samples=self.uw_samples)
        return EpisodeRunner(self.bundle.imputer, self.bundle.default_predictor,
                             self.bundle.rho.rho, self.schema, policy,
                             collect_details=True)

    def _analyze(self, pid: str) -> list[dict]:
        runner = self._runner()
        runner.run([self.records[pid]])
        return runner.details[pid]

    def _replay_log(self) -> None:
        if not self.observation_log or not os.path.exists(self.observation_log):
            return
        with open(self.observation_log, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                rec = self.records[entry["patient"]]
                j = self.schema.index(entry["variable"])
                reveal(rec, entry["hour"], j, entry["value"])

    # -- read views ----------------------------------------------------------

    def patient_list(self) -> list[dict]:
        out = []
        for pid in sorted(self.records):
            last = self.analyses[pid][-1]
            total = last["ux"] + last["uw"]
            out.append({
                "id": pid,
                "latest_risk": last["risk"],
                "latest_U": total,
                "risk_tier": risk_tier(last["risk"]),
            })
        return out

    def trajectory(self, pid: str) -> dict:
        rec = self.records[pid]
        hours = []
        for h, det in enumerate(self.analyses[pid]):
            total = det["ux"] + det["uw"]
            lo, hi = _band(det["risk"], total)
            hours.append({
                "hour": h,
                "risk": det["risk"],
                "U_x": det["ux"],
                "U_w": det["uw"],
                "band_low": lo,
                "band_high": hi,
                "observed": [self.schema.names[j]
                             for j in np.flatnonzero(rec.M_obs[h])],
            })
        return {"patient_id": pid, "hours": hours}

    def _scores_at(self, pid: str, hour: int, sigma: np.ndarray):
        """Per-variable reduction scores under a (possibly modified) sigma."""
        det = self.analyses[pid][hour]
        rho = self.bundle.rho.rho
        totals, per_var = 0.0, np.zeros(self.schema.k)
        for g in det["grads"]:
            ux, pv = delta_scores(g, sigma, rho)
            totals += ux
            per_var += pv
        n = len(det["grads"])
        return totals / n, per_var / n

    def recommendations(self, pid: str, hour: int, top: int) -> dict:
        rec = self.records[pid]
        det = self.analyses[pid][hour]
        _, per_var = self._scores_at(pid, hour, det["sigma_std"])
        unobserved = [int(j) for j in np.flatnonzero(~rec.M_obs[hour])
                      if not self.schema.vital_flags[j]]
        m = min(top, len(unobserved))
        chosen = select_variables(per_var, unobserved, m)
        items = [{
            "variable": self.schema.names[j],
            "expected_reduction": float(per_var[j]),
            "mu": float(det["mu"][j]),
            "sigma": float(det["sigma"][j]),
        } for j in chosen]
        return {"patient_id": pid, "hour": hour, "items": items}

    def whatif(self, pid: str, hour: int, variables: list[str]) -> dict:
        rec = self.records[pid]
        det = self.analyses[pid][hour]
        idx = []
        for name in variables:
            if name not in self.schema.names:
                raise ApiError(422, "invalid", f"unknown variable {name}")
            j = self.schema.index(name)
            if rec.M_obs[hour, j]:
                raise ApiError(409, "conflict",
                               f"variable {name} is already observed at hour {hour}")
            idx.append(j)
        ux_before, _ = self._scores_at(pid, hour, det["sigma_std"])
        sigma_after = det["sigma_std"].copy()
        sigma_after[idx] = 0.0
        ux_after, _ = self._scores_at(pid, hour, sigma_after)
        risk = det["risk"]
        uw = det["uw"]
        lo_b, hi_b = _band(risk, ux_before + uw)
        lo_a, hi_a = _band(risk, ux_after + uw)
        return {
            "patient_id": pid,
            "hour": hour,
            "before": {"risk": risk, "U_x": ux_before, "U_w": uw,
                       "band_low": lo_b, "band_high": hi_b},
            "after": {"risk": risk, "U_x": ux_after, "U_w": uw,
                      "band_low": lo_a, "band_high": hi_a},
        }

    # -- mutation ---------------------------------------------------------------

    def observe(self, pid: str, hour: int, variable: str, value: float) -> dict:
        if variable not in self.schema.names:
            raise ApiError(422, "invalid", f"unknown variable {variable}")
        if not np.isfinite(value):
            raise ApiError(422, "invalid", "value must be finite")
        j = self.schema.index(variable)
        with self.write_lock:
            rec = self.records[pid]
            if not 0 <= hour < rec.n:
                raise ApiError(422, "invalid",
                               f"hour {hour} outside record of length {rec.n}")
            if rec.M_obs[hour, j]:
                raise ApiError(409, "conflict",
                               f"variable {variable} is already observed at hour {hour}")
            reveal(rec, hour, j, value)
            if self.observation_log:
                with open(self.observation_log, "a", encoding="utf-8") as f:
                    f.write(json.dumps({
                        "ts": time.time(), "patient": pid, "hour": hour,
                        "variable": variable, "value": value,
                    }) + "\n")
            self.analyses = {**self.analyses, pid: self._analyze(pid)}
        return self.trajectory(pid)


def create_app(bundle_dir=None, cohort_path=None, observation_log=None,
               state: ConsoleState | None = None,
               console_origin: str = "*") -> FastAPI:
    app = FastAPI(title="sepsense console API")
    app.add_middleware(
        CORSMiddleware, allow_origins=[console_origin],
        allow_methods=["*"], allow_headers=["*"],
    )
    if state is None and bundle_dir is not None:
        bundle = ModelBundle.load(bundle_dir)
        schema = load_schema(cohort_path)
        if schema.hash() != bundle.schema.hash():
            raise ValueError("cohort schema does not match bundle schema")
        records = load_cohort(cohort_path, schema)
        state = ConsoleState(bundle, records, observation_log=observation_log)
    app.state.console = state

    def console() -> ConsoleState:
        if app.state.console is None:
            raise ApiError(503, "no_cohort", "no cohort and models are loaded")
        return app.state.console

    @app.exception_handler(ApiError)
    async def api_error_handler(_req: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": exc.message})

    @app.exception_handler(RequestValidationError)
    async def validation_handler(_req: Request, exc: RequestValidationError):
        return JSONResponse(status_code=422,
                            content={"code": "invalid", "message": str(exc.errors())})

    def get_record(st: ConsoleState, pid: str) -> PatientRecord:
        if pid not in st.records:
            raise ApiError(404, "not_found", f"unknown patient {pid}")
        return st.records[pid]

    @app.get("/patients")
    def patients():
        return console().patient_list()

    @app.get("/patients/{pid}/trajectory")
    def trajectory(pid: str):
        st = console()
        get_record(st, pid)
        return st.trajectory(pid)

    @app.get("/patients/{pid}/recommendations")
    def recommendations(pid: str, hour: int, top: int = 5):
        st = console()
        rec = get_record(st, pid)
        if not 0 <= hour < rec.n:
            raise ApiError(422, "invalid",
                           f"hour {hour} outside record of length {rec.n}")
        return st.recommendations(pid, hour, top)

    @app.post("/patients/{pid}/whatif")
    def whatif(pid: str, body: WhatIfBody):
        st = console()
        rec = get_record(st, pid)
        if not 0 <= body.hour < rec.n:
            raise ApiError(422, "invalid",
                           f"hour {body.hour} outside record of length {rec.n}")
        return st.whatif(pid, body.hour, body.variables)

    @app.post("/patients/{pid}/observe")
    def observe(pid: str, body: ObserveBody):
        st = console()
        get_record(st, pid)
        return st.observe(pid, body.hour, body.variable, body.value)

    return app
