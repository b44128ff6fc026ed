"""Consent-gated session lifecycle.

No recording exists until the participant has consented and a witness
has countersigned, in that order, with all attestations affirmed. Once
recording, the researcher or the witness can pause or stop at any
moment; a reason is never required. Every transition lands in the
container's meta stream, so the encrypted file carries its own audit
log.

State machine:

    Idle -> ConsentPending -> Ready -> Recording <-> Paused
                                       {Recording, Paused} -> Stopped

Stopped is terminal and stop is idempotent: a second stop reports
"already stopped" instead of erroring, because a distressed-participant
moment must never meet an error dialog.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path

from cusco.anonymize import LiveAudioFeatureTap, mono_mixdown, to_ndjson
from cusco.clock import Clock, SystemClock
from cusco.container import ChunkParams, ContainerWriter, create_container
from cusco.errors import ConfigError, ConsentError, TransitionError
from cusco.streams import (
    LiveVad,
    MediaFrame,
    StreamDescriptor,
    StreamKind,
    SyntheticSource,
    make_source,
    probe_sources,
)

META_SCHEMA_VERSION = 1


class SessionState(str, Enum):
    IDLE = "Idle"
    CONSENT_PENDING = "ConsentPending"
    READY = "Ready"
    RECORDING = "Recording"
    PAUSED = "Paused"
    STOPPED = "Stopped"


class Actor(str, Enum):
    RESEARCHER = "researcher"
    WITNESS = "witness"
    SYSTEM = "system"


class Action(str, Enum):
    CONSENT_PARTICIPANT = "consent_participant"
    CONSENT_WITNESS = "consent_witness"
    START = "start"
    PAUSE = "pause"
    RESUME = "resume"
    STOP = "stop"
    STREAM_GAP = "stream_gap"
    PEER_LOST = "peer_lost"


ATTESTATION_FLAGS = ("understood_pis", "questions_answered", "no_deception")


@dataclass(frozen=True)
class ConsentRecord:
    participant_code: str
    pis_version: str
    participant_consent_at: datetime
    witness_code: str
    witness_consent_at: datetime
    witness_attests: dict

    def validate(self) -> None:
        if self.witness_consent_at < self.participant_consent_at:
            raise ConsentError("witness must sign after participant")
        for flag in ATTESTATION_FLAGS:
            if not self.witness_attests.get(flag):
                raise ConsentError(f"witness attestation {flag!r} not affirmed")

    def to_record(self) -> dict:
        return {
            "v": META_SCHEMA_VERSION,
            "type": "consent",
            "participant_code": self.participant_code,
            "pis_version": self.pis_version,
            "participant_consent_at": self.participant_consent_at.isoformat(),
            "witness_code": self.witness_code,
            "witness_consent_at": self.witness_consent_at.isoformat(),
            "witness_attests": {k: bool(self.witness_attests.get(k))
                                for k in ATTESTATION_FLAGS},
        }


@dataclass(frozen=True)
class SessionEvent:
    seq: int
    at: datetime
    actor: Actor
    action: Action
    reason: str | None = None
    detail: dict | None = None

    def to_record(self) -> dict:
        doc: dict = {
            "v": META_SCHEMA_VERSION,
            "type": "event",
            "seq": self.seq,
            "at": self.at.isoformat(),
            "actor": self.actor.value,
            "action": self.action.value,
        }
        if self.reason is not None:
            doc["reason"] = self.reason
        if self.detail is not None:
            doc["detail"] = self.detail
        return doc


@dataclass
class SessionConfig:
    session_id: uuid.UUID
    project_id: uuid.UUID
    public_wrap_key: bytes
    output_dir: Path
    streams: list[StreamDescriptor]
    chunk_params: ChunkParams = field(default_factory=ChunkParams)
    override_absent: frozenset[int] = frozenset()
    # Streams whose media never enters the container: live features only.
    features_only: frozenset[int] = frozenset()
    # Audio stream feeding the voice-activity stream (None disables it).
    vad_source_stream_id: int | None = None
    vad_frame_ms: int = 30
    vad_threshold_db: float = -40.0
    vad_hangover_frames: int = 8
    feature_window_ms: int = 500

    @property
    def container_path(self) -> Path:
        return Path(self.output_dir) / f"{self.session_id}.rec"

    @property
    def features_path(self) -> Path:
        return Path(self.output_dir) / f"{self.session_id}.features.ndjson"


class _ChunkAssembler:
    """Batches frames into chunks bounded by bytes and duration."""

    def __init__(self, writer: ContainerWriter, stream_id: int,
                 params: ChunkParams):
        self.writer = writer
        self.stream_id = stream_id
        self.params = params
        self._frames: list[MediaFrame] = []
        self._bytes = 0

    def add(self, frame: MediaFrame) -> None:
        self._frames.append(frame)
        self._bytes += len(frame.payload)
        duration_ms = (frame.t_capture_ns - self._frames[0].t_capture_ns) / 1e6
        if (self._bytes >= self.params.max_chunk_bytes
                or duration_ms >= self.params.max_chunk_duration_ms):
            self.flush()

    def flush(self) -> None:
        if self._frames:
            self.writer.append_chunk(self.stream_id, self._frames)
            self._frames = []
            self._bytes = 0


class Session:
    """One recording session; all transitions are serialized internally."""

    def __init__(self, config: SessionConfig, clock: Clock | None = None):
        for desc in config.streams:
            desc.validate()
        if not config.streams:
            raise ConfigError("session needs at least one stream")
        self.config = config
        self.clock = clock or SystemClock()
        self.state = SessionState.IDLE
        self.events: list[SessionEvent] = []
        self._lock = threading.RLock()
        self._participant: dict | None = None
        self.consent: ConsentRecord | None = None
        self.writer: ContainerWriter | None = None
        self._assemblers: dict[int, _ChunkAssembler] = {}
        self._sources: dict[int, SyntheticSource] = {}
        self._meta_stream_id: int | None = None
        self._vad_stream_id: int | None = None
        self._meta_seq = 0
        self._vad_seq = 0
        self._vad: LiveVad | None = None
        self._feature_taps: dict[int, LiveAudioFeatureTap] = {}
        self._features_fh = None
        self._media_chunks = 0
        self._pause_windows: list[tuple[int, int | None]] = []

    # --- consent ------------------------------------------------------------

    def record_consent_participant(self, participant_code: str,
                                   pis_version: str,
                                   at: datetime | None = None) -> SessionState:
        with self._lock:
            if self.state not in (SessionState.IDLE, SessionState.CONSENT_PENDING):
                raise TransitionError(
                    f"cannot record participant consent in state {self.state.value}"
                )
            self._participant = {
                "participant_code": participant_code,
                "pis_version": pis_version,
                "at": at or self.clock.now_utc(),
            }
            self._log(Actor.RESEARCHER, Action.CONSENT_PARTICIPANT)
            self.state = SessionState.CONSENT_PENDING
            return self.state

    def record_consent_witness(self, witness_code: str, attests: dict,
                               at: datetime | None = None) -> SessionState:
        with self._lock:
            if self.state == SessionState.IDLE or self._participant is None:
                raise ConsentError("participant consent missing")
            if self.state != SessionState.CONSENT_PENDING:
                raise TransitionError(
                    f"cannot record witness consent in state {self.state.value}"
                )
            record = ConsentRecord(
                participant_code=self._participant["participant_code"],
                pis_version=self._participant["pis_version"],
                participant_consent_at=self._participant["at"],
                witness_code=witness_code,
                witness_consent_at=at or self.clock.now_utc(),
                witness_attests=attests,
            )
            record.validate()
            self.consent = record
            self._log(Actor.WITNESS, Action.CONSENT_WITNESS)
            self.state = SessionState.READY
            return self.state

    # --- lifecycle ------------------------------------------------------------

    def start(self, actor: Actor | str) -> SessionState:
        actor = Actor(actor)
        with self._lock:
            if self.state == SessionState.CONSENT_PENDING:
                raise TransitionError("witness consent missing")
            if self.state != SessionState.READY:
                raise TransitionError(
                    f"cannot start from state {self.state.value}"
                )
            absent = [
                s for s in probe_sources(self.config.streams)
                if s.state != "present"
                and s.stream_id not in self.config.override_absent
            ]
            if absent:
                names = ", ".join(
                    f"{s.stream_id} ({s.detail})" for s in absent
                )
                raise TransitionError(f"sources absent: {names}")

            table = self._build_stream_table()
            self.config.output_dir.mkdir(parents=True, exist_ok=True)
            self.writer = create_container(
                self.config.container_path,
                self.config.public_wrap_key,
                {"recorder": "cusco"},
                table,
                self.config.chunk_params,
                project_id=self.config.project_id,
                session_id=self.config.session_id,
            )
            start_event = self._log(actor, Action.START)
            # First meta chunk is the start event; the consent document
            # follows so the container carries its own gate evidence.
            self._append_meta(start_event.to_record())
            self._append_meta(self.consent.to_record())
            for e in self.events:
                if e.action in (Action.CONSENT_PARTICIPANT, Action.CONSENT_WITNESS):
                    continue  # represented by the consent document
                if e is not start_event:
                    self._append_meta(e.to_record())
            self._open_capture()
            self.state = SessionState.RECORDING
            return self.state

    def pause(self, actor: Actor | str, reason: str | None = None) -> SessionState:
        actor = Actor(actor)
        with self._lock:
            if self.state != SessionState.RECORDING:
                raise TransitionError(f"cannot pause from {self.state.value}")
            self._flush_media()
            event = self._log(actor, Action.PAUSE, reason)
            self._append_meta(event.to_record())
            self._pause_windows.append((self.clock.now_ns(), None))
            self.state = SessionState.PAUSED
            return self.state

    def resume(self, actor: Actor | str, reason: str | None = None) -> SessionState:
        actor = Actor(actor)
        with self._lock:
            if self.state != SessionState.PAUSED:
                raise TransitionError(f"cannot resume from {self.state.value}")
            event = self._log(actor, Action.RESUME, reason)
            self._append_meta(event.to_record())
            t0, _ = self._pause_windows[-1]
            self._pause_windows[-1] = (t0, self.clock.now_ns())
            self.state = SessionState.RECORDING
            return self.state

    def stop(self, actor: Actor | str, reason: str | None = None) -> bool:
        """Returns True if the session was already stopped (no-op)."""
        actor = Actor(actor)
        with self._lock:
            if self.state == SessionState.STOPPED:
                return True
            if self.state not in (SessionState.RECORDING, SessionState.PAUSED):
                raise TransitionError(f"cannot stop from {self.state.value}")
            if self.state == SessionState.PAUSED and self._pause_windows:
                t0, t1 = self._pause_windows[-1]
                if t1 is None:
                    self._pause_windows[-1] = (t0, self.clock.now_ns())
            self._flush_media()
            self._close_vad()
            self._close_features()
            event = self._log(actor, Action.STOP, reason)
            self._append_meta(event.to_record())
            self.writer.finalize()
            self.state = SessionState.STOPPED
            return False

    def log_system_event(self, action: Action, detail: dict | None = None) -> None:
        """Record coordinator / stream events (peer_lost, stream_gap)."""
        with self._lock:
            event = self._log(Actor.SYSTEM, action, detail=detail)
            if self.writer is not None and self.state in (
                SessionState.RECORDING, SessionState.PAUSED
            ):
                self._append_meta(event.to_record())

    # --- capture ------------------------------------------------------------

    def advance_to(self, t_ns: int) -> None:
        """Pull-mode capture: generate and persist frames up to t_ns.

        Frames produced while not Recording are discarded at the source,
        so nothing from a pause window can ever reach the container."""
        with self._lock:
            if self.state not in (SessionState.RECORDING, SessionState.PAUSED):
                return
            for stream_id, source in self._sources.items():
                frames = source.next_frames(t_ns)
                if self.state != SessionState.RECORDING:
                    continue
                for frame in frames:
                    self._ingest_locked(frame)

    def ingest(self, frame: MediaFrame) -> None:
        """Push-mode capture entry point for live source threads."""
        with self._lock:
            if self.state != SessionState.RECORDING:
                return
            self._ingest_locked(frame)

    def _ingest_locked(self, frame: MediaFrame) -> None:
        desc = self._stream_desc(frame.stream_id)
        if frame.stream_id == self.config.vad_source_stream_id and self._vad:
            mono = mono_mixdown(frame.payload, desc.audio.sample_format,
                                desc.audio.channels)
            for seg in self._vad.feed(mono):
                self._append_vad(seg)
        if frame.stream_id in self.config.features_only:
            tap = self._feature_taps.get(frame.stream_id)
            if tap is not None:
                mono = mono_mixdown(frame.payload, desc.audio.sample_format,
                                    desc.audio.channels)
                frames = tap.feed(mono)
                if frames and self._features_fh:
                    self._features_fh.write(to_ndjson(frames))
                    self._features_fh.flush()
            return  # media never persisted for features-only streams
        assembler = self._assemblers.get(frame.stream_id)
        if assembler is not None:
            assembler.add(frame)
            self._media_chunks = self.writer.chunk_count

    # --- helpers ------------------------------------------------------------

    def _build_stream_table(self) -> list[StreamDescriptor]:
        table = list(self.config.streams)
        next_id = max(s.stream_id for s in table) + 1
        if self.config.vad_source_stream_id is not None:
            src = self._config_stream(self.config.vad_source_stream_id)
            if src.kind != StreamKind.AUDIO:
                raise ConfigError("vad_source_stream_id must be an audio stream")
            self._vad_stream_id = next_id
            table.append(StreamDescriptor(
                stream_id=next_id, kind=StreamKind.VAD_EVENTS,
                label="voice-activity", device_binding="internal:vad",
            ))
            next_id += 1
        self._meta_stream_id = next_id
        table.append(StreamDescriptor(
            stream_id=next_id, kind=StreamKind.META,
            label="session-log", device_binding="internal:session",
        ))
        return table

    def _config_stream(self, stream_id: int) -> StreamDescriptor:
        for s in self.config.streams:
            if s.stream_id == stream_id:
                return s
        raise ConfigError(f"stream id {stream_id} not configured")

    def _stream_desc(self, stream_id: int) -> StreamDescriptor:
        return self._config_stream(stream_id)

    def _open_capture(self) -> None:
        start_ns = self.clock.now_ns()
        statuses = {s.stream_id: s for s in probe_sources(self.config.streams)}
        for desc in self.config.streams:
            self._assemblers[desc.stream_id] = _ChunkAssembler(
                self.writer, desc.stream_id, self.config.chunk_params
            )
            # Overridden-absent streams stay in the table with zero chunks.
            if statuses[desc.stream_id].state == "present":
                self._sources[desc.stream_id] = make_source(desc, start_ns=start_ns)
        if self.config.vad_source_stream_id is not None:
            self._vad = LiveVad(
                self._config_stream(self.config.vad_source_stream_id)
                .audio.sample_rate_hz,
                frame_ms=self.config.vad_frame_ms,
                energy_threshold_db=self.config.vad_threshold_db,
                hangover_frames=self.config.vad_hangover_frames,
            )
        for stream_id in self.config.features_only:
            desc = self._config_stream(stream_id)
            if desc.kind != StreamKind.AUDIO:
                raise ConfigError("features_only is supported for audio streams")
            self._feature_taps[stream_id] = LiveAudioFeatureTap(
                desc.audio.sample_rate_hz, self.config.feature_window_ms
            )
        if self._feature_taps:
            self._features_fh = open(self.config.features_path, "a")

    def _flush_media(self) -> None:
        for assembler in self._assemblers.values():
            assembler.flush()
        if self.writer is not None:
            self._media_chunks = self.writer.chunk_count

    def _close_vad(self) -> None:
        if self._vad is not None:
            for seg in self._vad.flush():
                self._append_vad(seg)

    def _close_features(self) -> None:
        for tap in self._feature_taps.values():
            frames = tap.flush()
            if frames and self._features_fh:
                self._features_fh.write(to_ndjson(frames))
        if self._features_fh:
            self._features_fh.close()
            self._features_fh = None

    def _log(self, actor: Actor, action: Action, reason: str | None = None,
             detail: dict | None = None) -> SessionEvent:
        event = SessionEvent(
            seq=len(self.events),
            at=self.clock.now_utc(),
            actor=actor,
            action=action,
            reason=reason,
            detail=detail,
        )
        self.events.append(event)
        return event

    def _append_meta(self, record: dict) -> None:
        payload = (json.dumps(record, sort_keys=True, separators=(",", ":"))
                   + "\n").encode()
        frame = MediaFrame(self._meta_stream_id, self._meta_seq,
                           self.clock.now_ns(), payload)
        self._meta_seq += 1
        self.writer.append_chunk(self._meta_stream_id, [frame])

    def _append_vad(self, seg) -> None:
        record = {"v": META_SCHEMA_VERSION, "type": "vad_segment",
                  **seg.to_dict()}
        payload = (json.dumps(record, sort_keys=True, separators=(",", ":"))
                   + "\n").encode()
        frame = MediaFrame(self._vad_stream_id, self._vad_seq,
                           self.clock.now_ns(), payload)
        self._vad_seq += 1
        self.writer.append_chunk(self._vad_stream_id, [frame])

    def status(self) -> dict:
        with self._lock:
            return {
                "session_id": str(self.config.session_id),
                "state": self.state.value,
                "consent": {
                    "participant": self._participant is not None,
                    "witness": self.consent is not None,
                },
                "events": len(self.events),
                "media_chunks": self._media_chunks,
                "container": (
                    str(self.config.container_path)
                    if self.writer is not None else None
                ),
            }


# --- meta stream decoding ----------------------------------------------------

def decode_meta_log(reader) -> tuple[list[dict], dict | None]:
    """Parse a container's meta stream into (event records, consent doc)."""
    meta_ids = [
        s.stream_id for s in reader.header.stream_table
        if s.kind == StreamKind.META
    ]
    events: list[dict] = []
    consent: dict | None = None
    for info, frames in reader.chunks():
        if info.stream_id not in meta_ids:
            continue
        for frame in frames:
            for line in frame.payload.decode().splitlines():
                doc = json.loads(line)
                if doc.get("type") == "consent":
                    consent = doc
                elif doc.get("type") == "event":
                    events.append(doc)
    events.sort(key=lambda d: d["seq"])
    return events, consent


def replay_final_state(events: list[dict], consent: dict | None) -> SessionState:
    """Reconstruct the final state from a decoded event log."""
    state = SessionState.IDLE
    for doc in events:
        action = Action(doc["action"])
        if action == Action.CONSENT_PARTICIPANT:
            state = SessionState.CONSENT_PENDING
        elif action == Action.CONSENT_WITNESS:
            state = SessionState.READY
        elif action == Action.START:
            if state == SessionState.IDLE and consent is not None:
                state = SessionState.READY  # consent doc stands in for events
            state = SessionState.RECORDING
        elif action == Action.PAUSE:
            state = SessionState.PAUSED
        elif action == Action.RESUME:
            state = SessionState.RECORDING
        elif action == Action.STOP:
            state = SessionState.STOPPED
    return state
