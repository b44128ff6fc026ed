"""Non-invertible interaction features.

The extracted descriptions are deliberately coarse: windowed level and
zero-crossing statistics for audio, small motion grids for video, and
pause statistics over speech segments. Windows are floored at 100 ms
and grids capped at 8x8 so the features cannot resolve content; levels
and rates are additionally quantized to a coarse grid, which both
shrinks the output and makes phase-shifted signals collapse onto the
same feature values (many inputs -> one output, so no reconstruction).

Export format: newline-delimited JSON, one record per line, with a
schema version field on every line.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cusco.errors import ConfigError
from cusco.streams import RMS_DB_FLOOR, VadSegment, rms_dbfs

FEATURE_SCHEMA_VERSION = 1

MIN_WINDOW_MS = 100      # anonymization floor for audio windows
MAX_MOTION_GRID = 8      # anonymization ceiling for motion resolution

RMS_DB_STEP = 0.01       # quantization grids
ZCR_STEP = 10.0
MOTION_DECIMALS = 4

DEFAULT_VOICED_THRESHOLD_DB = -50.0


@dataclass(frozen=True)
class FeatureFrame:
    t_start_s: float
    t_end_s: float
    rms_db: float
    zero_crossing_rate: float
    voiced: bool

    def to_record(self) -> dict:
        return {
            "v": FEATURE_SCHEMA_VERSION,
            "type": "audio_features",
            "t_start_s": self.t_start_s,
            "t_end_s": self.t_end_s,
            "rms_db": self.rms_db,
            "zero_crossing_rate": self.zero_crossing_rate,
            "voiced": self.voiced,
        }


@dataclass(frozen=True)
class MotionFrame:
    t_s: float
    grid: tuple[tuple[float, ...], ...]

    def to_record(self) -> dict:
        return {
            "v": FEATURE_SCHEMA_VERSION,
            "type": "motion_features",
            "t_s": self.t_s,
            "grid": [list(row) for row in self.grid],
        }


@dataclass(frozen=True)
class PauseStats:
    pause_count: int
    mean_pause_s: float
    median_pause_s: float
    total_pause_ratio: float

    @property
    def speech_ratio(self) -> float:
        return 1.0 - self.total_pause_ratio

    def to_record(self) -> dict:
        return {
            "v": FEATURE_SCHEMA_VERSION,
            "type": "pause_stats",
            "pause_count": self.pause_count,
            "mean_pause_s": self.mean_pause_s,
            "median_pause_s": self.median_pause_s,
            "total_pause_ratio": self.total_pause_ratio,
        }


def _quantize(value: float, step: float) -> float:
    return round(round(value / step) * step, 6)


def extract_audio_features(
    pcm: np.ndarray,
    sample_rate_hz: int,
    window_ms: int = 500,
    voiced_threshold_db: float = DEFAULT_VOICED_THRESHOLD_DB,
) -> list[FeatureFrame]:
    """Windowed RMS / zero-crossing / voicing features over mono audio.

    Windows tile the signal without overlap; the trailing partial window
    is dropped. Zero crossings are counted per inter-sample gap and each
    gap belongs to the window of its left sample, so every full window
    spans exactly window_ms of signal.
    """
    if window_ms < MIN_WINDOW_MS:
        raise ConfigError(
            f"window_ms {window_ms} below anonymization floor {MIN_WINDOW_MS}"
        )
    x = np.asarray(pcm)
    if x.ndim != 1:
        raise ValueError("pcm must be mono (1-D)")
    if np.issubdtype(x.dtype, np.integer):
        x = x.astype(np.float64) / float(2 ** (8 * x.dtype.itemsize - 1))
    else:
        x = x.astype(np.float64)
    wlen = sample_rate_hz * window_ms // 1000
    n_windows = x.size // wlen
    window_s = wlen / sample_rate_hz

    signs = np.sign(x)
    crossings = (signs[:-1] * signs[1:]) < 0  # gap i = samples (i, i+1)

    frames = []
    for i in range(n_windows):
        lo, hi = i * wlen, (i + 1) * wlen
        rms_db = _quantize(max(rms_dbfs(x[lo:hi]), RMS_DB_FLOOR), RMS_DB_STEP)
        n_cross = int(np.count_nonzero(crossings[lo:min(hi, crossings.size)]))
        zcr = _quantize(n_cross / window_s, ZCR_STEP)
        frames.append(
            FeatureFrame(
                t_start_s=round(i * window_s, 6),
                t_end_s=round((i + 1) * window_s, 6),
                rms_db=rms_db,
                zero_crossing_rate=zcr,
                voiced=rms_db >= voiced_threshold_db,
            )
        )
    return frames


def _grid_cells(shape: tuple[int, int], grid: int):
    rows = np.array_split(np.arange(shape[0]), grid)
    cols = np.array_split(np.arange(shape[1]), grid)
    return rows, cols


def extract_motion_features(
    frames: Sequence[np.ndarray],
    grid: int = 4,
    times_s: Sequence[float] | None = None,
) -> list[MotionFrame]:
    """Coarse inter-frame motion: per grid cell, mean absolute pixel
    difference against the previous frame, normalized to [0, 1]."""
    if not 1 <= grid <= MAX_MOTION_GRID:
        raise ConfigError(f"grid must be in [1, {MAX_MOTION_GRID}], got {grid}")
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    first = np.asarray(frames[0])
    geometry = first.shape
    if np.issubdtype(first.dtype, np.integer):
        full_scale = float(2 ** (8 * first.dtype.itemsize) - 1)
    else:
        full_scale = 1.0
    if times_s is None:
        times_s = list(range(len(frames)))
    rows, cols = _grid_cells(geometry[:2], grid)

    out = []
    prev = first.astype(np.float64)
    for i in range(1, len(frames)):
        cur = np.asarray(frames[i])
        if cur.shape != geometry:
            raise ValueError(
                f"frame {i} geometry {cur.shape} differs from first {geometry}"
            )
        diff = np.abs(cur.astype(np.float64) - prev)
        if diff.ndim == 3:
            diff = diff.mean(axis=2)
        cells = tuple(
            tuple(
                round(float(diff[np.ix_(r, c)].mean()) / full_scale, MOTION_DECIMALS)
                for c in cols
            )
            for r in rows
        )
        out.append(MotionFrame(t_s=float(times_s[i]), grid=cells))
        prev = cur.astype(np.float64)
    return out


def pause_statistics(
    speech_segments: Sequence[VadSegment],
    session_span_s: float,
) -> PauseStats:
    """Pauses are the complement of speech within the whole session span;
    leading and trailing silence count as pauses."""
    if session_span_s <= 0:
        raise ValueError("session_span_s must be positive")
    last_end = 0.0
    for seg in speech_segments:
        if seg.t_start_s < last_end:
            raise ValueError(
                f"segment at {seg.t_start_s} overlaps or is unsorted"
            )
        if seg.t_start_s < 0 or seg.t_end_s > session_span_s:
            raise ValueError(
                f"segment [{seg.t_start_s}, {seg.t_end_s}] outside span "
                f"{session_span_s}"
            )
        last_end = seg.t_end_s

    pauses = []
    cursor = 0.0
    for seg in speech_segments:
        if seg.t_start_s > cursor:
            pauses.append(seg.t_start_s - cursor)
        cursor = seg.t_end_s
    if session_span_s > cursor:
        pauses.append(session_span_s - cursor)

    total_pause = sum(pauses)
    return PauseStats(
        pause_count=len(pauses),
        mean_pause_s=statistics.mean(pauses) if pauses else 0.0,
        median_pause_s=statistics.median(pauses) if pauses else 0.0,
        total_pause_ratio=min(total_pause / session_span_s, 1.0),
    )


def to_ndjson(records: Iterable) -> str:
    """Serialize feature objects (anything with to_record) as JSON lines."""
    return "".join(
        json.dumps(r.to_record(), sort_keys=True, separators=(",", ":")) + "\n"
        for r in records
    )


class LiveAudioFeatureTap:
    """Incremental audio feature extraction: feed sample blocks as they are
    captured, collect completed windows. Shares the offline math so both
    drivers emit identical records for identical signals."""

    def __init__(self, sample_rate_hz: int, window_ms: int = 500,
                 voiced_threshold_db: float = DEFAULT_VOICED_THRESHOLD_DB):
        if window_ms < MIN_WINDOW_MS:
            raise ConfigError(
                f"window_ms {window_ms} below anonymization floor {MIN_WINDOW_MS}"
            )
        self.sample_rate_hz = sample_rate_hz
        self.window_ms = window_ms
        self.voiced_threshold_db = voiced_threshold_db
        self._buffer = np.zeros(0)
        self._windows_done = 0

    @property
    def _wlen(self) -> int:
        return self.sample_rate_hz * self.window_ms // 1000

    def _emit(self, n: int, include_seam: bool) -> list[FeatureFrame]:
        wlen = self._wlen
        end = n * wlen + (1 if include_seam else 0)
        frames = extract_audio_features(
            self._buffer[:end],
            self.sample_rate_hz,
            self.window_ms,
            self.voiced_threshold_db,
        )
        offset_s = self._windows_done * (wlen / self.sample_rate_hz)
        shifted = [
            FeatureFrame(
                t_start_s=round(f.t_start_s + offset_s, 6),
                t_end_s=round(f.t_end_s + offset_s, 6),
                rms_db=f.rms_db,
                zero_crossing_rate=f.zero_crossing_rate,
                voiced=f.voiced,
            )
            for f in frames
        ]
        self._buffer = self._buffer[n * wlen:]
        self._windows_done += n
        return shifted

    def feed(self, samples: np.ndarray) -> list[FeatureFrame]:
        self._buffer = np.concatenate(
            [self._buffer, np.asarray(samples, dtype=np.float64)]
        )
        # A window is emitted only once the first sample of the next window
        # has arrived, so the seam gap is counted exactly as in one-shot
        # extraction over the whole signal.
        n = max(0, (self._buffer.size - 1)) // self._wlen
        if n == 0:
            return []
        return self._emit(n, include_seam=True)

    def flush(self) -> list[FeatureFrame]:
        """End of stream: emit remaining full windows (no seam follows)."""
        n = self._buffer.size // self._wlen
        if n == 0:
            return []
        return self._emit(n, include_seam=False)


def mono_mixdown(payload: bytes, sample_format: str, channels: int) -> np.ndarray:
    """Decode interleaved PCM bytes and average channels to mono floats."""
    if sample_format == "s16le":
        x = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    elif sample_format == "f32le":
        x = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise ConfigError(f"unknown sample_format {sample_format!r}")
    if channels > 1:
        x = x.reshape(-1, channels).mean(axis=1)
    return x


def extract_container_features(
    path, private_unwrap_key: bytes, out_dir,
    window_ms: int = 500, motion_grid: int = 4,
    vad_frame_ms: int = 30, vad_threshold_db: float = -40.0,
    vad_hangover_frames: int = 8,
) -> dict:
    """Offline driver: features for every media stream of a container.

    Writes one ndjson file per stream plus pause statistics derived from
    voice activity over the first audio stream; returns a summary with
    the feature-to-media byte ratio per stream.
    """
    from pathlib import Path

    from cusco.container import open_container
    from cusco.streams import StreamKind, vad_segments

    reader = open_container(path, private_unwrap_key)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    audio: dict[int, list[bytes]] = {}
    video: dict[int, list] = {}
    t_first: dict[int, int] = {}
    t_last: dict[int, int] = {}
    media_bytes: dict[int, int] = {}
    for info, frames in reader.chunks():
        desc = reader.header.stream(info.stream_id)
        for f in frames:
            t_first.setdefault(info.stream_id, f.t_capture_ns)
            t_last[info.stream_id] = f.t_capture_ns
            media_bytes[info.stream_id] = (
                media_bytes.get(info.stream_id, 0) + len(f.payload)
            )
            if desc.kind == StreamKind.AUDIO:
                audio.setdefault(info.stream_id, []).append(f.payload)
            elif desc.kind in (StreamKind.VIDEO, StreamKind.DEPTH):
                video.setdefault(info.stream_id, []).append(
                    (f.t_capture_ns, f.payload)
                )

    summary: dict = {"streams": []}
    first_audio_pcm = None
    first_audio_rate = None
    for desc in reader.header.stream_table:
        sid = desc.stream_id
        if desc.kind == StreamKind.AUDIO and sid in audio:
            pcm = mono_mixdown(b"".join(audio[sid]), desc.audio.sample_format,
                               desc.audio.channels)
            frames = extract_audio_features(pcm, desc.audio.sample_rate_hz,
                                            window_ms)
            out = out_dir / f"stream{sid}_audio_features.ndjson"
            out.write_text(to_ndjson(frames))
            if first_audio_pcm is None:
                first_audio_pcm = pcm
                first_audio_rate = desc.audio.sample_rate_hz
        elif desc.kind in (StreamKind.VIDEO, StreamKind.DEPTH) and sid in video:
            from cusco.redact import _decode_video

            times = [t / 1e9 for t, _ in video[sid]]
            imgs = [_decode_video(p, desc) for _, p in video[sid]]
            if len(imgs) < 2:
                continue
            frames = extract_motion_features(imgs, grid=motion_grid,
                                             times_s=times)
            out = out_dir / f"stream{sid}_motion_features.ndjson"
            out.write_text(to_ndjson(frames))
        else:
            continue
        feature_bytes = out.stat().st_size
        summary["streams"].append({
            "stream_id": sid,
            "kind": desc.kind.value,
            "file": out.name,
            "feature_bytes": feature_bytes,
            "media_bytes": media_bytes.get(sid, 0),
            "ratio": (feature_bytes / media_bytes[sid]
                      if media_bytes.get(sid) else None),
        })

    if first_audio_pcm is not None and first_audio_pcm.size:
        span_s = first_audio_pcm.size / first_audio_rate
        segments = vad_segments(first_audio_pcm, first_audio_rate,
                                vad_frame_ms, vad_threshold_db,
                                vad_hangover_frames)
        stats = pause_statistics(segments, span_s)
        (out_dir / "pause_stats.json").write_text(
            json.dumps(stats.to_record(), indent=2) + "\n"
        )
        summary["pause_stats"] = stats.to_record()
    return summary
