"""Recording daemon: JSON control API, live capture, coordination.

All state mutations funnel through the single session controller; API
handlers and the coordination endpoint only ever call into it. The API
never exposes media bytes or key material: there is no route that can
return either, which the test suite asserts against the route table.
"""

from __future__ import annotations

import shutil
import signal
import threading
import time
import uuid
from pathlib import Path

import uvicorn
from fastapi import Depends, FastAPI, Header, HTTPException, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from cusco.clock import SystemClock
from cusco.config import DaemonConfig, parse_address
from cusco.coord import FollowerEndpoint, LeaderEndpoint
from cusco.errors import (
    ConfigError,
    ConsentError,
    CuscoError,
    TransitionError,
)
from cusco.keys import load_key_file
from cusco.session import (
    Action,
    Actor,
    Session,
    SessionConfig,
    SessionState,
)
from cusco.streams import StreamQueue, make_source, probe_sources, run_source

API_PREFIX = "/v1"
DRAIN_INTERVAL_S = 0.02


class LiveCapture:
    """Source threads feeding bounded queues; one drain thread serializes
    everything into the session controller."""

    def __init__(self, session: Session):
        self.session = session
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._queues: list[StreamQueue] = []

    def start(self) -> None:
        clock = self.session.clock
        statuses = {s.stream_id: s for s in probe_sources(self.session.config.streams)}
        for desc in self.session.config.streams:
            if statuses[desc.stream_id].state != "present":
                continue
            queue = StreamQueue(
                desc,
                on_gap=lambda sid, seq: self.session.log_system_event(
                    Action.STREAM_GAP, {"stream_id": sid, "dropped_seq": seq}
                ),
            )
            self._queues.append(queue)
            source = make_source(desc, start_ns=clock.now_ns())
            thread = threading.Thread(
                target=run_source,
                args=(source, queue.push, clock, self._stop),
                name=f"source-{desc.stream_id}",
                daemon=True,
            )
            thread.start()
            self._threads.append(thread)
        drain = threading.Thread(target=self._drain_loop, name="drain", daemon=True)
        drain.start()
        self._threads.append(drain)

    def _drain_loop(self) -> None:
        while not self._stop.is_set():
            for queue in self._queues:
                for frame in queue.drain():
                    self.session.ingest(frame)
            time.sleep(DRAIN_INTERVAL_S)

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=5)
        for queue in self._queues:
            for frame in queue.drain():
                self.session.ingest(frame)


class Daemon:
    """Owns the session lifecycle, capture, and coordination endpoints."""

    def __init__(self, config: DaemonConfig):
        self.config = config
        self.clock = SystemClock()
        self.started_at = time.monotonic()
        _, self.public_wrap_key = load_key_file(
            config.project_public_key_path, "public"
        )
        self.config.output_dir.mkdir(parents=True, exist_ok=True)
        self.session: Session | None = None
        self.capture: LiveCapture | None = None
        self._lock = threading.RLock()
        self.leader: LeaderEndpoint | None = None
        self.follower: FollowerEndpoint | None = None

    # --- coordination ----------------------------------------------------------

    def start_coord(self) -> None:
        if self.config.role == "leader":
            addr = parse_address(
                self.config.listen_address or "0.0.0.0:7301", "listen_address"
            )
            self.leader = LeaderEndpoint(
                addr,
                self.config.device_id,
                clock=self.clock,
                on_event=self._on_peer_event,
                heartbeat_interval_ms=self.config.heartbeat_interval_ms,
                loss_threshold=self.config.heartbeat_loss_threshold,
            )
        else:
            addr = parse_address(self.config.leader_address, "leader_address")
            self.follower = FollowerEndpoint(
                addr,
                self.config.device_id,
                execute=self._execute_scheduled,
                state_fn=lambda: self.session_state().value,
                clock=self.clock,
                heartbeat_interval_ms=self.config.heartbeat_interval_ms,
                on_leader_lost=self._on_leader_lost,
            )

    def _on_peer_event(self, kind: str, peer_id: str) -> None:
        with self._lock:
            if self.session is not None and kind == "peer_lost":
                self.session.log_system_event(Action.PEER_LOST,
                                              {"peer_id": peer_id})

    def _on_leader_lost(self) -> None:
        # Partition policy: keep recording, log, let humans decide locally.
        with self._lock:
            if self.session is not None:
                self.session.log_system_event(Action.PEER_LOST,
                                              {"peer_id": "leader"})

    def _execute_scheduled(self, action: str, at_ns: int) -> None:
        try:
            self.apply_action(action, Actor.SYSTEM, direct=True)
        except CuscoError:
            pass  # divergence is reported via status, never auto-resolved

    # --- session control ---------------------------------------------------------

    def session_state(self) -> SessionState:
        with self._lock:
            return self.session.state if self.session else SessionState.IDLE

    def create_session(self) -> Session:
        with self._lock:
            if self.session is not None and self.session.state not in (
                SessionState.STOPPED,
            ):
                raise TransitionError("a session is already active")
            cfg = self.config
            session_config = SessionConfig(
                session_id=uuid.uuid4(),
                project_id=uuid.uuid4(),
                public_wrap_key=self.public_wrap_key,
                output_dir=cfg.output_dir,
                streams=list(cfg.streams),
                chunk_params=cfg.chunk_params,
                override_absent=cfg.override_absent,
                features_only=cfg.features_only,
                vad_source_stream_id=cfg.vad.source_stream_id if cfg.vad else None,
                vad_frame_ms=cfg.vad.frame_ms if cfg.vad else 30,
                vad_threshold_db=cfg.vad.threshold_db if cfg.vad else -40.0,
                vad_hangover_frames=cfg.vad.hangover_frames if cfg.vad else 8,
            )
            self.session = Session(session_config, clock=self.clock)
            return self.session

    def require_session(self) -> Session:
        with self._lock:
            if self.session is None:
                raise TransitionError("no session created yet")
            return self.session

    def apply_action(self, action: str, actor: Actor | str,
                     reason: str | None = None, direct: bool = False) -> dict:
        """Route a lifecycle mutation; the leader schedules across peers."""
        session = self.require_session()
        if (not direct and self.leader is not None
                and self.leader.monitor.peers()):
            plan = self.leader.schedule(action, self.config.schedule_lead_time_ms)
            execute_at = plan["execute_at_leader_ns"]
            threading.Thread(
                target=self._local_scheduled,
                args=(action, actor, reason, execute_at),
                daemon=True,
            ).start()
            return {"scheduled": True, **plan}
        self._run_action(session, action, actor, reason)
        return {"scheduled": False, "state": session.state.value}

    def _local_scheduled(self, action, actor, reason, execute_at_ns) -> None:
        self.clock.sleep_until(execute_at_ns)
        try:
            self._run_action(self.require_session(), action, actor, reason)
        except CuscoError:
            pass

    def _run_action(self, session: Session, action: str, actor, reason) -> None:
        if action == "start":
            session.start(actor)
            with self._lock:
                self.capture = LiveCapture(session)
                self.capture.start()
        elif action == "pause":
            session.pause(actor, reason)
        elif action == "resume":
            session.resume(actor, reason)
        elif action == "stop":
            with self._lock:
                capture, self.capture = self.capture, None
            if capture is not None:
                capture.stop()
            session.stop(actor, reason)
        else:
            raise ConfigError(f"unknown action {action!r}")

    def status_snapshot(self) -> dict:
        with self._lock:
            session = self.session
        streams = []
        statuses = {s.stream_id: s for s in probe_sources(self.config.streams)}
        counts = {}
        if session is not None and session.writer is not None:
            counts = session.writer.stream_chunk_counts()
        for desc in self.config.streams:
            streams.append({
                "stream_id": desc.stream_id,
                "kind": desc.kind.value,
                "label": desc.label,
                "status": statuses[desc.stream_id].state,
                "chunks": counts.get(desc.stream_id, 0),
            })
        peers = []
        if self.leader is not None:
            peers = self.leader.peer_table()
        elif self.follower is not None:
            sync = self.follower.sync
            peers = [{
                "peer_id": "leader",
                "role": "leader",
                "clock_offset_ns": sync.offset_ns if sync else None,
                "offset_uncertainty_ns": sync.uncertainty_ns if sync else None,
                "lost": self.follower.leader_lost,
            }]
        disk = shutil.disk_usage(self.config.output_dir)
        return {
            "device_id": self.config.device_id,
            "role": self.config.role,
            "state": self.session_state().value,
            "session": session.status() if session else None,
            "streams": streams,
            "peers": peers,
            "disk_free_bytes": disk.free,
            "uptime_s": round(time.monotonic() - self.started_at, 3),
        }

    def shutdown(self) -> None:
        """Equivalent to stop(): no graceful-exit path may lose data."""
        with self._lock:
            session = self.session
        if session is not None and session.state in (
            SessionState.RECORDING, SessionState.PAUSED
        ):
            self.apply_action("stop", Actor.SYSTEM, direct=True)
        if self.follower is not None:
            self.follower.close()
        if self.leader is not None:
            self.leader.close()


# --- HTTP API ---------------------------------------------------------------------

def _http_error(status: int, error: str, **extra) -> HTTPException:
    return HTTPException(status_code=status, detail={"error": error, **extra})


def _translate(session_state: SessionState, exc: CuscoError) -> HTTPException:
    if isinstance(exc, ConsentError):
        return _http_error(409, "consent_rejected", reason=str(exc))
    if isinstance(exc, TransitionError):
        text = str(exc)
        if "witness consent missing" in text:
            return _http_error(409, "consent_incomplete", missing="witness")
        if "cannot start from state Idle" in text:
            return _http_error(409, "consent_incomplete", missing="participant")
        if "sources absent" in text:
            return _http_error(409, "sources_absent", reason=text)
        return _http_error(409, "illegal_transition", reason=text,
                           state=session_state.value)
    if isinstance(exc, ConfigError):
        return _http_error(422, "invalid_request", reason=str(exc))
    return _http_error(500, "internal", reason=str(exc))


def build_app(daemon: Daemon) -> FastAPI:
    app = FastAPI(title="cusco recorder", docs_url=None, redoc_url=None,
                  openapi_url=None)

    def auth(authorization: str | None = Header(default=None)) -> None:
        expected = f"Bearer {daemon.config.api_token}"
        if authorization != expected:
            raise _http_error(401, "unauthorized")

    @app.exception_handler(HTTPException)
    async def on_http_error(request: Request, exc: HTTPException):
        detail = exc.detail if isinstance(exc.detail, dict) else {"error": exc.detail}
        return JSONResponse(status_code=exc.status_code, content=detail)

    @app.get(API_PREFIX + "/status", dependencies=[Depends(auth)])
    def get_status():
        return daemon.status_snapshot()

    @app.get(API_PREFIX + "/streams", dependencies=[Depends(auth)])
    def get_streams():
        statuses = probe_sources(daemon.config.streams)
        return {
            "streams": [
                {**desc.to_dict(), "status": status.state, "detail": status.detail}
                for desc, status in zip(daemon.config.streams, statuses)
            ]
        }

    @app.get(API_PREFIX + "/peers", dependencies=[Depends(auth)])
    def get_peers():
        return {"peers": daemon.status_snapshot()["peers"]}

    @app.post(API_PREFIX + "/session", dependencies=[Depends(auth)])
    def post_session():
        try:
            session = daemon.create_session()
        except CuscoError as exc:
            raise _translate(daemon.session_state(), exc)
        return {"session_id": str(session.config.session_id),
                "state": session.state.value}

    @app.post(API_PREFIX + "/session/consent", dependencies=[Depends(auth)])
    def post_consent(body: dict):
        role = body.get("role")
        try:
            session = daemon.require_session()
            if role == "participant":
                state = session.record_consent_participant(
                    participant_code=str(body["participant_code"]),
                    pis_version=str(body.get("pis_version", "unversioned")),
                )
            elif role == "witness":
                state = session.record_consent_witness(
                    witness_code=str(body["witness_code"]),
                    attests=dict(body.get("attests", {})),
                )
            else:
                raise _http_error(422, "invalid_request",
                                  reason="role must be participant or witness")
        except KeyError as exc:
            raise _http_error(422, "invalid_request",
                              reason=f"missing field {exc}")
        except CuscoError as exc:
            raise _translate(daemon.session_state(), exc)
        return {"state": state.value}

    def lifecycle(action: str):
        def handler(body: dict | None = None):
            body = body or {}
            actor = body.get("actor", "researcher")
            if actor not in (Actor.RESEARCHER.value, Actor.WITNESS.value):
                raise _http_error(422, "invalid_request",
                                  reason="actor must be researcher or witness")
            try:
                result = daemon.apply_action(action, Actor(actor),
                                             body.get("reason"))
            except CuscoError as exc:
                raise _translate(daemon.session_state(), exc)
            return {"state": daemon.session_state().value, **result}
        return handler

    for action in ("start", "pause", "resume", "stop"):
        app.post(API_PREFIX + f"/session/{action}",
                 dependencies=[Depends(auth)])(lifecycle(action))

    panel_dir = daemon.config.panel_dir
    if panel_dir is not None and Path(panel_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(panel_dir), html=True),
                  name="panel")

    return app


def serve(config: DaemonConfig) -> int:
    """Run until terminated; SIGTERM stops any live session safely."""
    daemon = Daemon(config)
    daemon.start_coord()
    app = build_app(daemon)
    host, port = parse_address(config.api_listen_address, "api_listen_address")
    server = uvicorn.Server(uvicorn.Config(app, host=host, port=port,
                                           log_level="warning"))

    def handle_term(signum, frame):
        server.should_exit = True

    signal.signal(signal.SIGTERM, handle_term)
    try:
        server.run()
    finally:
        daemon.shutdown()
    return 0
