"""Session HTTP API for the what-if console.

A session wraps one simulated day: the client requests the policy's
recommendation for the coming hour, accepts it or overrides it with an
explicit action, and receives the forecast, reward breakdown, and running
time-in-range after every decision.  Sessions are isolated, serialized per
session, and journaled to disk so an interrupted console can resume.

The JSON payload schemas are versioned via ``SCHEMA_VERSION``; every
response carries the field.
"""
from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from .agents.policies import HeuristicPolicy, NetworkPolicy, RandomPolicy
from .core import (
    ActionType,
    BehavioralAction,
    CARB_MAX_G,
    CARB_MIN_G,
    INSULIN_MAX_U,
    INSULIN_MIN_U,
    N_SLOTS,
    decode_action,
    encode_action,
)
from .data import InitialState
from .env import EpisodeState, GlucoseEnv, StepResult, step_result_to_dict
from .metrics import (
    BehavioralProfile,
    GlycemicSummary,
    ProfileEvent,
    behavioral_profile,
    glycemic_summary,
)

SCHEMA_VERSION = 1
DEFAULT_IDLE_TIMEOUT = 3600.0


class ServiceError(Exception):
    """API-level failure carrying an HTTP status and machine-readable code."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _unknown(kind: str, name: str) -> ServiceError:
    return ServiceError(404, f"unknown_{kind}", f"no {kind} named {name!r}")


@dataclass
class SubjectAssets:
    """Everything one subject needs to host sessions: a configured
    environment, the pool of evaluation start windows, and optionally the
    subject's logged behavioral profile (the day-summary radar compares
    the session's behavior against it)."""

    subject_id: str
    env: GlucoseEnv
    initial_states: list[InitialState]
    reference_profile: BehavioralProfile | None = None


class PolicyCatalog:
    """Named policies the console can drive.

    Baselines are constructed per session so each session owns its random
    stream; trained policies are stateless networks shared read-only.
    """

    BASELINES = ("random", "heuristic")

    def __init__(self, trained: dict[str, NetworkPolicy] | None = None,
                 baselines: tuple[str, ...] = BASELINES):
        self._trained = dict(trained or {})
        unknown = set(baselines) - set(self.BASELINES)
        if unknown:
            raise ServiceError(500, "no_policies",
                               f"unknown baselines {sorted(unknown)}")
        self._baselines = tuple(baselines)
        if not self._trained and not self._baselines:
            raise ServiceError(500, "no_policies",
                               "the catalog has no policies to serve")

    def names(self) -> list[str]:
        return sorted((*self._baselines, *self._trained))

    def make(self, name: str, seed: int):
        if name in self._baselines:
            return RandomPolicy(seed) if name == "random" \
                else HeuristicPolicy(seed)
        if name in self._trained:
            return self._trained[name]
        raise _unknown("policy", name)


@dataclass
class Session:
    session_id: str
    subject_id: str
    policy_name: str
    seed: int
    initial_state_index: int
    episode: EpisodeState
    policy: object
    created_at: str
    history: list[StepResult] = field(default_factory=list)
    raw_actions: list[np.ndarray] = field(default_factory=list)
    pending_raw: np.ndarray | None = None
    last_access: float = 0.0
    lock: threading.Lock = field(default_factory=threading.Lock)
    # Window as it stood at creation.  The episode's window slides forward
    # with every step, so without this snapshot a client could not rebuild
    # the chart's historical prefix from the API alone.
    initial_window: object | None = None

    def running_summary(self) -> GlycemicSummary | None:
        if not self.history:
            return None
        glucose = np.concatenate([r.forecast.values for r in self.history])
        return glycemic_summary(glucose)

    def running_tir(self) -> float | None:
        summary = self.running_summary()
        return None if summary is None else summary.tir_pct


def _action_to_dict(action: BehavioralAction) -> dict:
    return {
        "type": action.action_type.name,
        "carbs": action.carb_amount,
        "insulin": action.insulin_amount,
        "slot": action.slot,
    }


def override_to_action(override: dict) -> BehavioralAction:
    """Validate a user override into a behavioral action.

    Overrides are rejected when out of range, never clamped, so the console
    has to surface the legal ranges to the user.
    """
    try:
        action_type = ActionType[str(override.get("type", "")).upper()]
    except KeyError:
        raise ServiceError(
            422, "override_type",
            f"override type {override.get('type')!r} is not one of "
            f"NOTHING, EAT, INJECT") from None
    magnitude = override.get("magnitude")
    slot = override.get("slot", 0)
    if not isinstance(slot, int) or not (0 <= slot < N_SLOTS):
        raise ServiceError(422, "override_slot",
                           f"slot {slot!r} outside 0..{N_SLOTS - 1}")
    carbs, insulin = 20.0, 5.0  # fillers for the channels the type ignores
    if action_type == ActionType.EAT:
        if magnitude is None:
            raise ServiceError(422, "override_magnitude",
                               "EAT override needs a carbohydrate amount")
        if not (CARB_MIN_G <= magnitude <= CARB_MAX_G):
            raise ServiceError(
                422, "override_range",
                f"carbs {magnitude} g outside [{CARB_MIN_G:g}, {CARB_MAX_G:g}]")
        carbs = float(magnitude)
    elif action_type == ActionType.INJECT:
        if magnitude is None:
            raise ServiceError(422, "override_magnitude",
                               "INJECT override needs an insulin dose")
        if not (INSULIN_MIN_U <= magnitude <= INSULIN_MAX_U):
            raise ServiceError(
                422, "override_range",
                f"insulin {magnitude} U outside "
                f"[{INSULIN_MIN_U:g}, {INSULIN_MAX_U:g}]")
        insulin = float(magnitude)
    return BehavioralAction(action_type, carbs, insulin, slot)


class SessionStore:
    """Owns all live sessions and the per-session journals."""

    def __init__(self, subjects: dict[str, SubjectAssets],
                 catalog: PolicyCatalog, session_dir=None,
                 idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
                 time_fn=time.monotonic):
        if not subjects:
            raise ServiceError(500, "no_subjects", "no subjects configured")
        self.subjects = subjects
        self.catalog = catalog
        self.session_dir = Path(session_dir) if session_dir else None
        self.idle_timeout = idle_timeout
        self.time_fn = time_fn
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()
        if self.session_dir is not None:
            self.session_dir.mkdir(parents=True, exist_ok=True)
            self._resume_from_disk()

    # -- lifecycle -------------------------------------------------------------

    def create(self, subject: str, seed: int, policy: str,
               initial_state_index: int = 0) -> Session:
        assets = self.subjects.get(subject)
        if assets is None:
            raise _unknown("subject", subject)
        policy_obj = self.catalog.make(policy, seed)
        if not (0 <= initial_state_index < len(assets.initial_states)):
            raise ServiceError(
                422, "bad_index",
                f"initial_state_index {initial_state_index} outside "
                f"0..{len(assets.initial_states) - 1}")
        initial = assets.initial_states[initial_state_index]
        episode = assets.env.reset(initial, seed)
        session = Session(
            session_id=uuid.uuid4().hex,
            subject_id=subject,
            policy_name=policy,
            seed=seed,
            initial_state_index=initial_state_index,
            episode=episode,
            policy=policy_obj,
            created_at=datetime.now(timezone.utc).isoformat(),
            last_access=self.time_fn(),
            initial_window=episode.window,
        )
        with self._lock:
            self._sessions[session.session_id] = session
        self._journal(session, {
            "kind": "meta",
            "schema_version": SCHEMA_VERSION,
            "session_id": session.session_id,
            "subject": subject,
            "seed": seed,
            "policy": policy,
            "initial_state_index": initial_state_index,
            "created_at": session.created_at,
        })
        return session

    def get(self, session_id: str) -> Session:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise _unknown("session", session_id)
        now = self.time_fn()
        if now - session.last_access > self.idle_timeout:
            with self._lock:
                self._sessions.pop(session_id, None)
            raise ServiceError(410, "session_expired",
                               f"session {session_id} expired after "
                               f"{self.idle_timeout:g}s idle")
        session.last_access = now
        return session

    # -- the decision loop -------------------------------------------------------

    def _pending_raw(self, session: Session) -> np.ndarray:
        """The policy's raw action for the current decision.

        Computed at most once per decision step and memoized, so repeated
        reads are idempotent even for stochastic policies, and an accept
        consumes exactly the action that was shown.  Each fresh draw is
        journaled so a resumed session replays the policy's random stream
        in the same order.
        """
        if session.pending_raw is None:
            raw = np.asarray(session.policy.act(session.episode.window),
                             dtype=np.float64)
            session.pending_raw = raw
            self._journal(session, {"kind": "draw",
                                    "raw": [float(v) for v in raw]})
        return session.pending_raw

    def recommendation(self, session: Session) -> dict:
        with session.lock:
            if session.episode.done:
                raise ServiceError(410, "session_done",
                                   "the simulated day is complete")
            raw = self._pending_raw(session)
            action = decode_action(raw)
            preview = self._simulate(session, raw)
        return {
            "schema_version": SCHEMA_VERSION,
            "action": _action_to_dict(action),
            "raw": [float(v) for v in raw],
            "rationale": {
                "reward_scaled": preview.reward_scaled,
                "reward_breakdown": dict(preview.reward_breakdown),
            },
        }

    def _simulate(self, session: Session, raw: np.ndarray) -> StepResult:
        """Dry-run one step; the episode state is immutable so the result
        can simply be discarded."""
        return self.subjects[session.subject_id].env.step(session.episode, raw)

    def step(self, session: Session, payload: dict) -> dict:
        with session.lock:
            if session.episode.done:
                raise ServiceError(410, "session_done",
                                   "the simulated day is complete")
            if payload.get("override") is not None:
                action = override_to_action(payload["override"])
                raw = encode_action(action)
            elif payload.get("accept"):
                raw = self._pending_raw(session)
            else:
                raise ServiceError(422, "bad_step",
                                   "step body must accept the recommendation "
                                   "or carry an override")
            env = self.subjects[session.subject_id].env
            result = env.step(session.episode, raw)
            session.episode = result.next_state
            session.history.append(result)
            session.raw_actions.append(np.asarray(raw, dtype=np.float64))
            session.pending_raw = None
            self._journal(session, {
                "kind": "step",
                "raw_action": [float(v) for v in raw],
            })
            return self._step_payload(session, result, raw)

    def _step_payload(self, session: Session, result: StepResult,
                      raw) -> dict:
        running = session.running_summary()
        payload = {
            "schema_version": SCHEMA_VERSION,
            "decision_step": result.next_state.decision_step,
            "clock_hour": result.next_state.clock_hour,
            "done": bool(result.done),
            "action": _action_to_dict(decode_action(raw)),
            "forecast": result.forecast.values.tolist(),
            "reward_scaled": result.reward_scaled,
            "reward_breakdown": dict(result.reward_breakdown),
            "applied_events": [[e.slot, e.kind, e.magnitude]
                               for e in result.applied_events],
            "running_tir": running.tir_pct if running else None,
            "running_tbr": running.tbr_pct if running else None,
            "running_tar": running.tar_pct if running else None,
            "running_cv": running.cv_pct if running else None,
        }
        if result.done:
            payload["day_summary"] = self._day_summary(session)
        return payload

    def _day_summary(self, session: Session) -> dict:
        """Closing view of the finished day: glycemic statistics over every
        forecast sample plus the session's behavioral profile next to the
        subject's logged one (when the host provided it)."""
        summary = session.running_summary()
        events = []
        for hour, raw in enumerate(session.raw_actions):
            action = decode_action(raw)
            when = hour + action.slot / 12.0
            if action.action_type == ActionType.EAT:
                events.append(ProfileEvent("carb", when, action.carb_amount))
            elif action.action_type == ActionType.INJECT:
                events.append(ProfileEvent("bolus", when,
                                           action.insulin_amount))
        profile = behavioral_profile(events, days=1.0)
        reference = self.subjects[session.subject_id].reference_profile
        return {
            "glycemic": {
                "tir_pct": summary.tir_pct,
                "tar_pct": summary.tar_pct,
                "tbr_pct": summary.tbr_pct,
                "cv_pct": summary.cv_pct,
            },
            "profile": profile.as_dict(),
            "reference_profile":
                reference.as_dict() if reference is not None else None,
        }

    # -- read views ----------------------------------------------------------

    def summary(self, session: Session) -> dict:
        window = session.episode.window
        running = session.running_summary()
        payload = {
            "schema_version": SCHEMA_VERSION,
            "session_id": session.session_id,
            "subject": session.subject_id,
            "policy": session.policy_name,
            "seed": session.seed,
            "decision_step": session.episode.decision_step,
            "clock_hour": session.episode.clock_hour,
            "done": session.episode.done,
            "glucose_history": window.glucose.tolist(),
            "carbs_history": window.carbs.tolist(),
            "bolus_history": window.bolus.tolist(),
            "hour_history": window.hour_of_day.tolist(),
            "running_tir": running.tir_pct if running else None,
            "running_tbr": running.tbr_pct if running else None,
            "running_tar": running.tar_pct if running else None,
            "running_cv": running.cv_pct if running else None,
            "created_at": session.created_at,
        }
        if session.episode.done:
            payload["day_summary"] = self._day_summary(session)
        return payload

    def trajectory(self, session: Session) -> dict:
        steps = []
        for raw, result in zip(session.raw_actions, session.history):
            entry = step_result_to_dict(result)
            entry["raw_action"] = [float(v) for v in raw]
            entry["action"] = _action_to_dict(decode_action(raw))
            entry["running_tir"] = None
            steps.append(entry)
        if steps:
            glucose: list[float] = []
            for k, result in enumerate(session.history):
                glucose.extend(result.forecast.values.tolist())
                steps[k]["running_tir"] = glycemic_summary(glucose).tir_pct
        window = session.initial_window or session.episode.window
        return {
            "schema_version": SCHEMA_VERSION,
            "session_id": session.session_id,
            "initial": {
                "glucose_history": window.glucose.tolist(),
                "carbs_history": window.carbs.tolist(),
                "bolus_history": window.bolus.tolist(),
                "hour_history": window.hour_of_day.tolist(),
            },
            "steps": steps,
        }

    def state_fingerprint(self, session: Session) -> str:
        """Digest of everything a read endpoint must not change."""
        blob = json.dumps({
            "episode": session.episode.to_dict(),
            "n_steps": len(session.history),
        }, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- persistence ------------------------------------------------------------

    def _journal_path(self, session_id: str) -> Path | None:
        if self.session_dir is None:
            return None
        return self.session_dir / f"{session_id}.jsonl"

    def _journal(self, session: Session, entry: dict) -> None:
        path = self._journal_path(session.session_id)
        if path is None:
            return
        with open(path, "a") as fh:
            fh.write(json.dumps(entry) + "\n")

    def flush(self) -> None:
        """Journals are write-through; nothing buffered.  Kept as the
        explicit shutdown hook so callers have one place to extend."""

    def _resume_from_disk(self) -> None:
        for path in sorted(self.session_dir.glob("*.jsonl")):
            try:
                self._resume_one(path)
            except (ServiceError, ValueError, KeyError) as exc:
                # A stale journal for a subject/policy this process does not
                # host is skipped, not fatal.
                logging.getLogger(__name__).warning(
                    "skipping session journal %s: %s", path.name, exc)

    def _resume_one(self, path: Path) -> None:
        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or lines[0].get("kind") != "meta":
            raise ValueError("journal has no meta line")
        meta = lines[0]
        assets = self.subjects.get(meta["subject"])
        if assets is None:
            raise _unknown("subject", meta["subject"])
        policy_obj = self.catalog.make(meta["policy"], meta["seed"])
        episode = assets.env.reset(
            assets.initial_states[meta["initial_state_index"]], meta["seed"])
        session = Session(
            session_id=meta["session_id"],
            subject_id=meta["subject"],
            policy_name=meta["policy"],
            seed=meta["seed"],
            initial_state_index=meta["initial_state_index"],
            episode=episode,
            policy=policy_obj,
            created_at=meta["created_at"],
            last_access=self.time_fn(),
            initial_window=episode.window,
        )
        # Replaying the journal reproduces the episode exactly.  Draw
        # entries re-consume the policy's random stream in the original
        # order, so recommendations after the resume line up with what an
        # uninterrupted session would have produced.
        for entry in lines[1:]:
            if entry.get("kind") == "draw":
                session.policy.act(session.episode.window)
                session.pending_raw = np.asarray(entry["raw"],
                                                 dtype=np.float64)
            elif entry.get("kind") == "step":
                raw = np.asarray(entry["raw_action"], dtype=np.float64)
                result = assets.env.step(session.episode, raw)
                session.episode = result.next_state
                session.history.append(result)
                session.raw_actions.append(raw)
                session.pending_raw = None
        with self._lock:
            self._sessions[session.session_id] = session

    @property
    def session_count(self) -> int:
        with self._lock:
            return len(self._sessions)


# -- HTTP layer -----------------------------------------------------------------

class CreateSessionBody(BaseModel):
    subject: str
    seed: int
    policy: str
    initial_state_index: int = 0


class OverrideBody(BaseModel):
    type: str
    magnitude: float | None = None
    slot: int = 0


class StepBody(BaseModel):
    accept: bool = False
    override: OverrideBody | None = None


def create_app(store: SessionStore):
    """Wrap a session store in the JSON API the console consumes."""
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse

    app = FastAPI(title="glucose what-if console API",
                  version=str(SCHEMA_VERSION))
    app.state.store = store

    @app.exception_handler(ServiceError)
    async def service_error_handler(request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status,
            content={"error": {"code": exc.code, "message": exc.message}})

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "schema_version": SCHEMA_VERSION,
            "subjects": sorted(store.subjects),
            "policies": store.catalog.names(),
            "sessions": store.session_count,
        }

    @app.get("/policies")
    def policies():
        return {"schema_version": SCHEMA_VERSION,
                "policies": store.catalog.names()}

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        session = store.create(body.subject, body.seed, body.policy,
                               body.initial_state_index)
        return store.summary(session)

    @app.get("/sessions/{session_id}")
    def session_summary(session_id: str):
        return store.summary(store.get(session_id))

    @app.get("/sessions/{session_id}/recommendation")
    def recommendation(session_id: str):
        return store.recommendation(store.get(session_id))

    @app.post("/sessions/{session_id}/step")
    def step(session_id: str, body: StepBody):
        session = store.get(session_id)
        payload = {"accept": body.accept,
                   "override": body.override.model_dump()
                   if body.override else None}
        return store.step(session, payload)

    @app.get("/sessions/{session_id}/trajectory")
    def trajectory(session_id: str):
        return store.trajectory(store.get(session_id))

    return app


def run_server(store: SessionStore, host: str = "127.0.0.1",
               port: int = 8080) -> None:
    """Serve until interrupted; sessions flush on shutdown."""
    import uvicorn

    app = create_app(store)
    try:
        uvicorn.run(app, host=host, port=port, log_level="info")
    finally:
        store.flush()
