"""Capture streams: descriptors, device probing, synthetic sources, VAD.

Each stream is one modality (audio, video, depth) or one function
(voice activity detection, session metadata). A descriptor carries the
stream's geometry and a device binding; `synthetic:*` bindings are
deterministic generators that stand in for hardware drivers, and
`internal:*` bindings are filled by the recorder itself.
"""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Protocol

import numpy as np

from cusco.clock import Clock
from cusco.errors import ConfigError, SourceError

SAMPLE_FORMATS = {"s16le": 2, "f32le": 4}
PIXEL_FORMATS = {"gray8": 1, "gray16le": 2, "rgb24": 3}

# Audio sources emit fixed-duration sample blocks.
AUDIO_BLOCK_MS = 50


class StreamKind(str, Enum):
    AUDIO = "audio"
    VIDEO = "video"
    DEPTH = "depth"
    VAD_EVENTS = "vad_events"
    META = "meta"


@dataclass(frozen=True)
class AudioParams:
    sample_rate_hz: int
    channels: int
    sample_format: str = "s16le"

    @property
    def bytes_per_sample(self) -> int:
        return SAMPLE_FORMATS[self.sample_format] * self.channels


@dataclass(frozen=True)
class VideoParams:
    width_px: int
    height_px: int
    fps: float
    pixel_format: str = "gray8"

    @property
    def bytes_per_frame(self) -> int:
        return self.width_px * self.height_px * PIXEL_FORMATS[self.pixel_format]


@dataclass(frozen=True)
class StreamDescriptor:
    stream_id: int
    kind: StreamKind
    label: str = ""
    device_binding: str = "internal:none"
    audio: AudioParams | None = None
    video: VideoParams | None = None

    def validate(self) -> None:
        kind = StreamKind(self.kind)
        if self.stream_id < 0:
            raise ConfigError(f"stream {self.label!r}: stream_id must be >= 0")
        if kind == StreamKind.AUDIO:
            if self.audio is None or self.video is not None:
                raise ConfigError(
                    f"stream {self.stream_id}: audio streams need exactly an audio block"
                )
            if self.audio.sample_rate_hz <= 0:
                raise ConfigError(f"stream {self.stream_id}: sample_rate_hz must be > 0")
            if self.audio.channels <= 0:
                raise ConfigError(f"stream {self.stream_id}: channels must be > 0")
            if self.audio.sample_format not in SAMPLE_FORMATS:
                raise ConfigError(
                    f"stream {self.stream_id}: unknown sample_format "
                    f"{self.audio.sample_format!r}"
                )
        elif kind in (StreamKind.VIDEO, StreamKind.DEPTH):
            if self.video is None or self.audio is not None:
                raise ConfigError(
                    f"stream {self.stream_id}: {kind.value} streams need exactly a video block"
                )
            if self.video.width_px <= 0 or self.video.height_px <= 0:
                raise ConfigError(f"stream {self.stream_id}: frame geometry must be positive")
            if self.video.fps <= 0:
                raise ConfigError(f"stream {self.stream_id}: fps must be > 0")
            if self.video.pixel_format not in PIXEL_FORMATS:
                raise ConfigError(
                    f"stream {self.stream_id}: unknown pixel_format "
                    f"{self.video.pixel_format!r}"
                )
        else:
            if self.audio is not None or self.video is not None:
                raise ConfigError(
                    f"stream {self.stream_id}: {kind.value} streams carry no media params"
                )

    def to_dict(self) -> dict:
        d: dict = {
            "stream_id": self.stream_id,
            "kind": self.kind.value,
            "label": self.label,
            "device_binding": self.device_binding,
        }
        if self.audio is not None:
            d["audio"] = {
                "sample_rate_hz": self.audio.sample_rate_hz,
                "channels": self.audio.channels,
                "sample_format": self.audio.sample_format,
            }
        if self.video is not None:
            d["video"] = {
                "width_px": self.video.width_px,
                "height_px": self.video.height_px,
                "fps": self.video.fps,
                "pixel_format": self.video.pixel_format,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StreamDescriptor":
        audio = AudioParams(**d["audio"]) if "audio" in d else None
        video = VideoParams(**d["video"]) if "video" in d else None
        desc = cls(
            stream_id=d["stream_id"],
            kind=StreamKind(d["kind"]),
            label=d.get("label", ""),
            device_binding=d.get("device_binding", "internal:none"),
            audio=audio,
            video=video,
        )
        desc.validate()
        return desc


def validate_stream_table(streams: Iterable[StreamDescriptor]) -> list[StreamDescriptor]:
    """Check ids are unique and dense 0..n-1; returns the list id-sorted."""
    table = sorted(streams, key=lambda s: s.stream_id)
    if not table:
        raise ConfigError("at least one stream is required")
    ids = [s.stream_id for s in table]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate stream ids: {ids}")
    if ids != list(range(len(ids))):
        raise ConfigError(f"stream ids must be dense 0..{len(ids) - 1}, got {ids}")
    for s in table:
        s.validate()
    return table


@dataclass(frozen=True)
class MediaFrame:
    stream_id: int
    seq: int
    t_capture_ns: int
    payload: bytes


@dataclass(frozen=True)
class SourceStatus:
    stream_id: int
    state: str  # present | absent | error
    detail: str = ""
    last_frame_at_ns: int | None = None


# --- synthetic generators ----------------------------------------------------

def _parse_binding(binding: str) -> tuple[str, str, dict[str, str]]:
    """Split "scheme:name?k=v&k=v" into (scheme, name, params)."""
    scheme, _, rest = binding.partition(":")
    name, _, query = rest.partition("?")
    params: dict[str, str] = {}
    if query:
        for part in query.split("&"):
            k, _, v = part.partition("=")
            params[k] = v
    return scheme, name, params


class FrameSource(Protocol):
    descriptor: StreamDescriptor

    def next_frames(self, now_ns: int) -> list[MediaFrame]:
        """All frames completed since the last call, in order."""
        ...


class SyntheticSource:
    """Deterministic generator source for one stream.

    Frame i covers [start + i*period, start + (i+1)*period) and is
    emitted once that interval has fully elapsed, so a 1 s run of
    16 kHz audio yields exactly 16000 samples.
    """

    def __init__(self, desc: StreamDescriptor, start_ns: int = 0):
        desc.validate()
        self.descriptor = desc
        self.start_ns = start_ns
        self._next_index = 0
        self._payload_fn = _generator_for(desc)

    @property
    def frame_period_ns(self) -> int:
        if self.descriptor.kind == StreamKind.AUDIO:
            return AUDIO_BLOCK_MS * 1_000_000
        return round(1e9 / self.descriptor.video.fps)

    def frame_time_ns(self, index: int) -> int:
        return self.start_ns + index * self.frame_period_ns

    def next_frames(self, now_ns: int) -> list[MediaFrame]:
        frames = []
        while self.frame_time_ns(self._next_index + 1) <= now_ns:
            i = self._next_index
            frames.append(
                MediaFrame(
                    stream_id=self.descriptor.stream_id,
                    seq=i,
                    t_capture_ns=self.frame_time_ns(i),
                    payload=self._payload_fn(i),
                )
            )
            self._next_index += 1
        return frames


def _sine_block(desc: StreamDescriptor, freq_hz: float, amplitude: float, index: int) -> bytes:
    a = desc.audio
    n = a.sample_rate_hz * AUDIO_BLOCK_MS // 1000
    k0 = index * n
    t = (np.arange(k0, k0 + n)) / a.sample_rate_hz
    mono = amplitude * np.sin(2 * math.pi * freq_hz * t)
    return _pack_samples(np.repeat(mono[:, None], a.channels, axis=1), a.sample_format)


def _silence_block(desc: StreamDescriptor, index: int) -> bytes:
    a = desc.audio
    n = a.sample_rate_hz * AUDIO_BLOCK_MS // 1000
    return bytes(n * a.bytes_per_sample)


def _noise_block(desc: StreamDescriptor, seed: int, amplitude: float, index: int) -> bytes:
    a = desc.audio
    n = a.sample_rate_hz * AUDIO_BLOCK_MS // 1000
    rng = np.random.default_rng(seed + index)
    mono = amplitude * rng.uniform(-1.0, 1.0, n)
    return _pack_samples(np.repeat(mono[:, None], a.channels, axis=1), a.sample_format)


def _testcard_frame(desc: StreamDescriptor, index: int) -> bytes:
    """Gradient test card with a moving vertical bar (so motion is nonzero)."""
    v = desc.video
    bpp = PIXEL_FORMATS[v.pixel_format]
    x = np.arange(v.width_px, dtype=np.uint32)
    y = np.arange(v.height_px, dtype=np.uint32)
    img = ((x[None, :] * 255 // max(v.width_px - 1, 1))
           + (y[:, None] * 64 // max(v.height_px - 1, 1))) % 256
    bar = (index * 7) % v.width_px
    img[:, bar:min(bar + 8, v.width_px)] = 255
    img8 = img.astype(np.uint8)
    if bpp == 1:
        return img8.tobytes()
    if v.pixel_format == "rgb24":
        return np.repeat(img8[:, :, None], 3, axis=2).tobytes()
    return (img8.astype("<u2") * 257).tobytes()  # gray16le


def _ramp_frame(desc: StreamDescriptor, index: int) -> bytes:
    """Depth stand-in: 16-bit linear ramp shifted per frame."""
    v = desc.video
    x = np.arange(v.width_px, dtype=np.uint32)
    row = ((x * 65535 // max(v.width_px - 1, 1)) + index * 13) % 65536
    img = np.tile(row.astype("<u2"), (v.height_px, 1))
    return img.tobytes()


def _pack_samples(samples: np.ndarray, sample_format: str) -> bytes:
    if sample_format == "s16le":
        return (
            np.clip(np.round(samples * 32767.0), -32768, 32767)
            .astype("<i2")
            .tobytes()
        )
    return samples.astype("<f4").tobytes()


def _generator_for(desc: StreamDescriptor) -> Callable[[int], bytes]:
    scheme, name, params = _parse_binding(desc.device_binding)
    if scheme != "synthetic":
        raise SourceError(
            f"stream {desc.stream_id}: no source for binding {desc.device_binding!r}"
        )
    if desc.kind == StreamKind.AUDIO:
        amplitude = float(params.get("amplitude", "0.8"))
        if name.startswith("sine"):
            freq = float(name[4:] or 440)
            return lambda i: _sine_block(desc, freq, amplitude, i)
        if name == "silence":
            return lambda i: _silence_block(desc, i)
        if name == "noise":
            seed = int(params.get("seed", "0"))
            return lambda i: _noise_block(desc, seed, amplitude, i)
    elif desc.kind in (StreamKind.VIDEO, StreamKind.DEPTH):
        if name == "testcard":
            return lambda i: _testcard_frame(desc, i)
        if name == "ramp":
            return lambda i: _ramp_frame(desc, i)
    raise SourceError(
        f"stream {desc.stream_id}: unknown synthetic generator {name!r} for {desc.kind.value}"
    )


def _binding_present(desc: StreamDescriptor) -> tuple[bool, str]:
    scheme, name, _ = _parse_binding(desc.device_binding)
    if scheme == "internal":
        return True, "recorder-internal stream"
    if scheme == "synthetic":
        try:
            _generator_for(desc)
        except SourceError as exc:
            return False, str(exc)
        return True, f"synthetic generator {name!r}"
    return False, f"unknown binding {desc.device_binding!r}"


def probe_sources(config: Iterable[StreamDescriptor]) -> list[SourceStatus]:
    """One status per descriptor; never raises, errors are statuses."""
    statuses = []
    for desc in config:
        try:
            desc.validate()
        except ConfigError as exc:
            statuses.append(SourceStatus(desc.stream_id, "error", str(exc)))
            continue
        present, detail = _binding_present(desc)
        statuses.append(
            SourceStatus(desc.stream_id, "present" if present else "absent", detail)
        )
    return statuses


def make_source(desc: StreamDescriptor, start_ns: int = 0) -> SyntheticSource:
    return SyntheticSource(desc, start_ns=start_ns)


def run_source(
    source: FrameSource,
    sink: Callable[[MediaFrame], None],
    clock: Clock,
    stop: threading.Event,
    status_sink: Callable[[SourceStatus], None] | None = None,
) -> int:
    """Pump a source until stopped; returns the final frame count.

    A source failure mid-run is reported as an error status and ends
    only this stream; sibling runners are unaffected.
    """
    desc = source.descriptor
    count = 0
    last_t = None
    while not stop.is_set():
        try:
            frames = source.next_frames(clock.now_ns())
        except SourceError as exc:
            if status_sink:
                status_sink(SourceStatus(desc.stream_id, "error", str(exc), last_t))
            break
        for frame in frames:
            sink(frame)
            count += 1
            last_t = frame.t_capture_ns
        if not frames:
            clock.sleep_until(clock.now_ns() + 5_000_000)
    return count


class StreamQueue:
    """Bounded frame queue between a source and the container writer.

    Overflow drops the oldest frame and records a gap so a live
    recorder can never deadlock while keeping losses auditable.
    """

    def __init__(self, desc: StreamDescriptor, capacity_seconds: float = 2.0,
                 on_gap: Callable[[int, int], None] | None = None):
        if desc.kind == StreamKind.AUDIO:
            per_second = 1000 / AUDIO_BLOCK_MS
        elif desc.video is not None:
            per_second = desc.video.fps
        else:
            per_second = 20
        self.capacity = max(2, math.ceil(per_second * capacity_seconds))
        self._frames: deque[MediaFrame] = deque()
        self._lock = threading.Lock()
        self._desc = desc
        self._on_gap = on_gap
        self.dropped = 0

    def push(self, frame: MediaFrame) -> None:
        dropped = None
        with self._lock:
            if len(self._frames) >= self.capacity:
                dropped = self._frames.popleft()
                self.dropped += 1
            self._frames.append(frame)
        if dropped is not None and self._on_gap:
            self._on_gap(self._desc.stream_id, dropped.seq)

    def drain(self) -> list[MediaFrame]:
        with self._lock:
            frames = list(self._frames)
            self._frames.clear()
        return frames


# --- voice activity detection ------------------------------------------------

RMS_DB_FLOOR = -96.0


def rms_dbfs(samples: np.ndarray) -> float:
    """RMS level in dBFS, floored at -96 for silence."""
    if samples.size == 0:
        return RMS_DB_FLOOR
    rms = float(np.sqrt(np.mean(np.square(samples, dtype=np.float64))))
    if rms <= 0.0:
        return RMS_DB_FLOOR
    return max(20.0 * math.log10(rms), RMS_DB_FLOOR)


def _as_float_mono(pcm: np.ndarray) -> np.ndarray:
    pcm = np.asarray(pcm)
    if pcm.ndim != 1:
        raise ValueError("pcm must be a mono 1-D array")
    if np.issubdtype(pcm.dtype, np.integer):
        scale = float(2 ** (8 * pcm.dtype.itemsize - 1))
        return pcm.astype(np.float64) / scale
    return pcm.astype(np.float64)


@dataclass(frozen=True)
class VadSegment:
    t_start_s: float
    t_end_s: float

    def to_dict(self) -> dict:
        return {"t_start_s": self.t_start_s, "t_end_s": self.t_end_s}


def vad_segments(
    pcm: np.ndarray,
    sample_rate_hz: int,
    frame_ms: int = 30,
    energy_threshold_db: float = -40.0,
    hangover_frames: int = 8,
) -> list[VadSegment]:
    """Energy-threshold voice activity detection with hangover.

    The signal is cut into non-overlapping frame_ms frames; a frame is
    speech when its RMS (dBFS) clears the threshold, and activity is
    held for hangover_frames after the last energetic frame so short
    gaps do not fragment a segment. Returns merged, sorted intervals.
    """
    if not 10 <= frame_ms <= 100:
        raise ValueError(f"frame_ms must be in [10, 100], got {frame_ms}")
    if hangover_frames < 0:
        raise ValueError("hangover_frames must be >= 0")
    x = _as_float_mono(pcm)
    if x.size == 0:
        return []
    frame_len = sample_rate_hz * frame_ms // 1000
    n_frames = x.size // frame_len
    if n_frames == 0:
        raise ValueError(
            f"pcm shorter than one {frame_ms} ms frame ({x.size} samples)"
        )
    levels = [
        rms_dbfs(x[i * frame_len:(i + 1) * frame_len]) for i in range(n_frames)
    ]
    frame_s = frame_len / sample_rate_hz

    segments: list[VadSegment] = []
    seg_start = None
    hang = 0
    for i, level in enumerate(levels):
        energetic = level >= energy_threshold_db
        if energetic:
            hang = hangover_frames
            if seg_start is None:
                seg_start = i
        elif seg_start is not None:
            if hang > 0:
                hang -= 1
            else:
                segments.append(VadSegment(seg_start * frame_s, i * frame_s))
                seg_start = None
    if seg_start is not None:
        # Hangover past the last energetic frame is clipped to the signal end.
        segments.append(VadSegment(seg_start * frame_s, n_frames * frame_s))
    return segments


class LiveVad:
    """Incremental energy VAD with the same semantics as vad_segments.

    Feed sample blocks as they are captured; closed segments come back as
    soon as the hangover expires. flush() closes any open segment at the
    end of the signal."""

    def __init__(self, sample_rate_hz: int, frame_ms: int = 30,
                 energy_threshold_db: float = -40.0, hangover_frames: int = 8):
        if not 10 <= frame_ms <= 100:
            raise ValueError(f"frame_ms must be in [10, 100], got {frame_ms}")
        self.sample_rate_hz = sample_rate_hz
        self.frame_len = sample_rate_hz * frame_ms // 1000
        self.frame_s = self.frame_len / sample_rate_hz
        self.threshold_db = energy_threshold_db
        self.hangover_frames = hangover_frames
        self._residual = np.zeros(0)
        self._frame_index = 0
        self._seg_start: int | None = None
        self._hang = 0

    def feed(self, samples: np.ndarray) -> list[VadSegment]:
        x = _as_float_mono(np.asarray(samples))
        self._residual = np.concatenate([self._residual, x])
        closed: list[VadSegment] = []
        while self._residual.size >= self.frame_len:
            fr = self._residual[:self.frame_len]
            self._residual = self._residual[self.frame_len:]
            i = self._frame_index
            self._frame_index += 1
            energetic = rms_dbfs(fr) >= self.threshold_db
            if energetic:
                self._hang = self.hangover_frames
                if self._seg_start is None:
                    self._seg_start = i
            elif self._seg_start is not None:
                if self._hang > 0:
                    self._hang -= 1
                else:
                    closed.append(
                        VadSegment(self._seg_start * self.frame_s, i * self.frame_s)
                    )
                    self._seg_start = None
        return closed

    def flush(self) -> list[VadSegment]:
        if self._seg_start is None:
            return []
        seg = VadSegment(
            self._seg_start * self.frame_s, self._frame_index * self.frame_s
        )
        self._seg_start = None
        return [seg]
