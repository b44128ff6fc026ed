"""Daemon configuration: one human-editable JSON file.

Validation failures name the exact field path (e.g.
"streams[1].audio.sample_rate_hz: must be > 0") because these files are
edited in the field, away from anyone who can read a stack trace.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from cusco.container import ChunkParams
from cusco.errors import ConfigError
from cusco.streams import StreamDescriptor, validate_stream_table

ENV_API_LISTEN = "CUSCO_API_LISTEN"
ENV_COORD_LISTEN = "CUSCO_COORD_LISTEN"
ENV_LEADER_ADDRESS = "CUSCO_LEADER_ADDRESS"
ENV_API_TOKEN = "CUSCO_API_TOKEN"


@dataclass
class VadConfig:
    source_stream_id: int
    frame_ms: int = 30
    threshold_db: float = -40.0
    hangover_frames: int = 8


@dataclass
class DaemonConfig:
    device_id: str
    role: str  # leader | follower
    api_listen_address: str
    api_token: str
    project_public_key_path: Path
    output_dir: Path
    streams: list[StreamDescriptor]
    listen_address: str | None = None      # coord endpoint (leader)
    leader_address: str | None = None      # coord target (followers)
    chunk_params: ChunkParams = field(default_factory=ChunkParams)
    vad: VadConfig | None = None
    features_only: frozenset[int] = frozenset()
    override_absent: frozenset[int] = frozenset()
    panel_dir: Path | None = None
    heartbeat_interval_ms: int = 1000
    heartbeat_loss_threshold: int = 3
    schedule_lead_time_ms: int = 500


def _need(doc: dict, key: str, kind, path: str = ""):
    where = f"{path}.{key}" if path else key
    if key not in doc:
        raise ConfigError(f"{where}: required field missing")
    value = doc[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"{where}: expected {kind.__name__}")
    return value


def parse_address(value: str, where: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"{where}: expected host:port, got {value!r}")
    return host, int(port)


def load_config(path: str | Path) -> DaemonConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(doc, base_dir=Path(path).resolve().parent)


def parse_config(doc: dict, base_dir: Path | None = None) -> DaemonConfig:
    base = base_dir or Path.cwd()

    device_id = _need(doc, "device_id", str)
    role = _need(doc, "role", str)
    if role not in ("leader", "follower"):
        raise ConfigError(f"role: must be \"leader\" or \"follower\", got {role!r}")

    api_listen = os.environ.get(ENV_API_LISTEN) or _need(doc, "api_listen_address", str)
    parse_address(api_listen, "api_listen_address")
    api_token = os.environ.get(ENV_API_TOKEN) or _need(doc, "api_token", str)
    if not api_token:
        raise ConfigError("api_token: must be non-empty")

    listen_address = os.environ.get(ENV_COORD_LISTEN) or doc.get("listen_address")
    leader_address = os.environ.get(ENV_LEADER_ADDRESS) or doc.get("leader_address")
    if role == "follower":
        if not leader_address:
            raise ConfigError("leader_address: required when role is \"follower\"")
        parse_address(leader_address, "leader_address")
    if listen_address:
        parse_address(listen_address, "listen_address")

    key_path = base / _need(doc, "project_public_key_path", str)
    output_dir = base / _need(doc, "output_dir", str)

    raw_streams = _need(doc, "streams", list)
    if not raw_streams:
        raise ConfigError("streams: at least one stream is required")
    streams = []
    for i, raw in enumerate(raw_streams):
        if not isinstance(raw, dict):
            raise ConfigError(f"streams[{i}]: expected an object")
        try:
            streams.append(StreamDescriptor.from_dict(raw))
        except (ConfigError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"streams[{i}]: {exc}") from exc
    try:
        validate_stream_table(streams)
    except ConfigError as exc:
        raise ConfigError(f"streams: {exc}") from exc

    chunk_params = ChunkParams()
    if "chunk_params" in doc:
        cp = _need(doc, "chunk_params", dict)
        chunk_params = ChunkParams(
            max_chunk_bytes=_need(cp, "max_chunk_bytes", int, "chunk_params"),
            max_chunk_duration_ms=_need(cp, "max_chunk_duration_ms", int,
                                        "chunk_params"),
        )
        try:
            chunk_params.validate()
        except ConfigError as exc:
            raise ConfigError(f"chunk_params: {exc}") from exc

    vad = None
    if "vad" in doc:
        vd = _need(doc, "vad", dict)
        vad = VadConfig(
            source_stream_id=_need(vd, "source_stream_id", int, "vad"),
            frame_ms=vd.get("frame_ms", 30),
            threshold_db=float(vd.get("threshold_db", -40.0)),
            hangover_frames=vd.get("hangover_frames", 8),
        )
        if vad.source_stream_id not in {s.stream_id for s in streams}:
            raise ConfigError(
                f"vad.source_stream_id: stream {vad.source_stream_id} not in streams"
            )

    features_only = frozenset(doc.get("features_only", []))
    stream_ids = {s.stream_id for s in streams}
    for sid in features_only:
        if sid not in stream_ids:
            raise ConfigError(f"features_only: stream {sid} not in streams")
    override_absent = frozenset(doc.get("override_absent", []))
    for sid in override_absent:
        if sid not in stream_ids:
            raise ConfigError(f"override_absent: stream {sid} not in streams")

    panel_dir = None
    if doc.get("panel_dir"):
        panel_dir = base / doc["panel_dir"]

    return DaemonConfig(
        device_id=device_id,
        role=role,
        api_listen_address=api_listen,
        api_token=api_token,
        project_public_key_path=key_path,
        output_dir=output_dir,
        streams=streams,
        listen_address=listen_address,
        leader_address=leader_address,
        chunk_params=chunk_params,
        vad=vad,
        features_only=features_only,
        override_absent=override_absent,
        panel_dir=panel_dir,
        heartbeat_interval_ms=int(doc.get("heartbeat_interval_ms", 1000)),
        heartbeat_loss_threshold=int(doc.get("heartbeat_loss_threshold", 3)),
        schedule_lead_time_ms=int(doc.get("schedule_lead_time_ms", 500)),
    )


def example_follower_config() -> dict:
    """Second box of the shipped deployment: the other depth camera plus the
    microphone array, following the leader at 7301."""
    return {
        "device_id": "cusco-b",
        "role": "follower",
        "leader_address": "cusco-a.local:7301",
        "api_listen_address": "127.0.0.1:7300",
        "api_token": "change-me",
        "project_public_key_path": "project.pub",
        "output_dir": "recordings",
        "streams": [
            {
                "stream_id": 0,
                "kind": "depth",
                "label": "researcher-camera",
                "device_binding": "synthetic:ramp",
                "video": {"width_px": 320, "height_px": 240, "fps": 15,
                          "pixel_format": "gray16le"},
            },
            {
                "stream_id": 1,
                "kind": "audio",
                "label": "mic-array",
                "device_binding": "synthetic:noise?seed=1&amplitude=0.4",
                "audio": {"sample_rate_hz": 16000, "channels": 8,
                          "sample_format": "s16le"},
            },
        ],
    }


def example_config() -> dict:
    """The shipped two-device deployment: this box carries one depth camera
    and the table microphone; its twin (see example_follower_config) carries
    the second camera and the microphone array."""
    return {
        "device_id": "cusco-a",
        "role": "leader",
        "listen_address": "0.0.0.0:7301",
        "api_listen_address": "127.0.0.1:7300",
        "api_token": "change-me",
        "project_public_key_path": "project.pub",
        "output_dir": "recordings",
        "streams": [
            {
                "stream_id": 0,
                "kind": "depth",
                "label": "participant-camera",
                "device_binding": "synthetic:ramp",
                "video": {"width_px": 320, "height_px": 240, "fps": 15,
                          "pixel_format": "gray16le"},
            },
            {
                "stream_id": 1,
                "kind": "audio",
                "label": "table-mic",
                "device_binding": "synthetic:sine440?amplitude=0.5",
                "audio": {"sample_rate_hz": 16000, "channels": 1,
                          "sample_format": "s16le"},
            },
        ],
        "vad": {"source_stream_id": 1},
        "chunk_params": {"max_chunk_bytes": 1048576,
                         "max_chunk_duration_ms": 1000},
    }
