"""Post-hoc redaction: silence audio intervals, blur video regions, verify,
and export plaintext only after verification passes.

Silencing clips samples to a limiter envelope that is zero inside the
interval and ramps linearly over 10 ms at each edge. Clipping (rather
than gain multiplication) makes redaction exactly idempotent byte for
byte: re-applying the same list is a no-op.

Blurring replaces region pixels with an iterated k x k box blur
computed from the region's own pixels (window indices clamp to the
region edge). Passes repeat until one more pass moves no pixel by more
than the verification tolerance, so the stored region is a fixed point
of the blur by construction: verification recomputes a single pass from
the redacted file alone and checks nothing moves. Keeping the window
inside the region means the check depends only on redacted pixels.
"""

from __future__ import annotations

import hashlib
import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cusco.container import (
    RECORD_CHUNK,
    ContainerHeader,
    _parse_body,
    create_container,
    open_container,
    read_header,
    scan_records,
)
from cusco.errors import FormatError
from cusco.errors import ExportRefusedError, RedactionError
from cusco.streams import (
    MediaFrame,
    StreamDescriptor,
    StreamKind,
)

RAMP_S = 0.010
DEFAULT_BLUR_KERNEL = 15
AUDIO_VERIFY_MAX_DB = -90.0
MAX_BLUR_PASSES = 96

_MEDIA_KINDS = (StreamKind.AUDIO, StreamKind.VIDEO, StreamKind.DEPTH)


def media_time_origin(path) -> int | None:
    """Earliest media frame timestamp in a container (chunk metadata only,
    no keys needed).

    Redaction entry times are seconds on the recording's media timeline,
    the same timeline a reviewer sees in exported files, so they are
    anchored here rather than at the raw monotonic-clock values frames
    carry on disk."""
    header, _, first = read_header(path)
    media_ids = {s.stream_id for s in header.stream_table
                 if s.kind in _MEDIA_KINDS}
    origin = None
    for raw in scan_records(path, first):
        if not raw.body:
            break
        try:
            info, _, _ = _parse_body(raw.body)
        except FormatError:
            continue
        if info.record_type == RECORD_CHUNK and info.stream_id in media_ids:
            if origin is None or info.t_start_ns < origin:
                origin = info.t_start_ns
    return origin

_PIXEL_DTYPES = {"gray8": np.uint8, "gray16le": np.dtype("<u2"), "rgb24": np.uint8}


def blur_tolerance(dtype: np.dtype) -> int:
    """Fixed-point tolerance: 1 per channel on 8-bit, scaled for 16-bit."""
    return 1 if np.dtype(dtype).itemsize == 1 else 257


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass(frozen=True)
class RedactionEntry:
    stream_id: int
    t_start_s: float
    t_end_s: float
    region: Rect | None = None

    def to_dict(self) -> dict:
        d: dict = {
            "stream_id": self.stream_id,
            "t_start_s": self.t_start_s,
            "t_end_s": self.t_end_s,
        }
        if self.region is not None:
            d["region"] = self.region.to_dict()
        return d


@dataclass(frozen=True)
class RedactionList:
    session_id: str
    entries: tuple[RedactionEntry, ...] = ()

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "entries": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RedactionList":
        try:
            entries = []
            for e in doc.get("entries", []):
                region = Rect(**e["region"]) if "region" in e else None
                entries.append(
                    RedactionEntry(
                        stream_id=int(e["stream_id"]),
                        t_start_s=float(e["t_start_s"]),
                        t_end_s=float(e["t_end_s"]),
                        region=region,
                    )
                )
            return cls(session_id=str(doc["session_id"]), entries=tuple(entries))
        except (KeyError, TypeError, ValueError) as exc:
            raise RedactionError(f"malformed redaction list: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "RedactionList":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise RedactionError(f"cannot read redaction list {path}: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def validate_against(self, header: ContainerHeader) -> None:
        for i, e in enumerate(self.entries):
            try:
                desc = header.stream(e.stream_id)
            except Exception:
                raise RedactionError(
                    f"entry {i}: stream id {e.stream_id} not in container"
                ) from None
            if e.t_start_s >= e.t_end_s:
                raise RedactionError(f"entry {i}: t_start must be < t_end")
            if desc.kind == StreamKind.AUDIO:
                if e.region is not None:
                    raise RedactionError(
                        f"entry {i}: audio entries must not carry a region"
                    )
            elif desc.kind in (StreamKind.VIDEO, StreamKind.DEPTH):
                r = e.region
                if r is None:
                    raise RedactionError(f"entry {i}: video entries need a region")
                v = desc.video
                if (r.x < 0 or r.y < 0 or r.w <= 0 or r.h <= 0
                        or r.x + r.w > v.width_px or r.y + r.h > v.height_px):
                    raise RedactionError(
                        f"entry {i}: region {r.to_dict()} outside "
                        f"{v.width_px}x{v.height_px} frame"
                    )
            else:
                raise RedactionError(
                    f"entry {i}: cannot redact {desc.kind.value} streams"
                )


@dataclass
class EntryResult:
    applied: bool = False
    verified: bool = False
    metric: float | None = None


@dataclass
class RedactionReport:
    entries: list[EntryResult] = field(default_factory=list)

    @property
    def overall_pass(self) -> bool:
        return all(e.verified for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "overall_pass": self.overall_pass,
            "entries": [
                {"applied": e.applied, "verified": e.verified, "metric": e.metric}
                for e in self.entries
            ],
        }


# --- audio envelope -----------------------------------------------------------------

def _sample_limits(times_s: np.ndarray, full_scale: float,
                   t0: float, t1: float) -> tuple[np.ndarray, np.ndarray]:
    """(mask of samples inside [t0, t1), limiter amplitude per masked sample)."""
    mask = (times_s >= t0) & (times_s < t1)
    t = times_s[mask]
    gain = np.zeros_like(t)
    ramp_in = t < t0 + RAMP_S
    gain[ramp_in] = (t0 + RAMP_S - t[ramp_in]) / RAMP_S
    ramp_out = t > t1 - RAMP_S
    gain = np.maximum(gain, np.where(ramp_out, (t - (t1 - RAMP_S)) / RAMP_S, 0.0))
    return mask, np.clip(gain, 0.0, 1.0) * full_scale


def _silence_payload(payload: bytes, desc: StreamDescriptor, t_frame_ns: int,
                     entries: list[RedactionEntry], origin_ns: int) -> bytes:
    a = desc.audio
    if a.sample_format == "s16le":
        x = np.frombuffer(payload, dtype="<i2").reshape(-1, a.channels).copy()
        full_scale = 32767.0
    else:
        x = np.frombuffer(payload, dtype="<f4").reshape(-1, a.channels).copy()
        full_scale = 1.0
    times = (t_frame_ns - origin_ns) / 1e9 + np.arange(x.shape[0]) / a.sample_rate_hz
    for e in entries:
        mask, lim = _sample_limits(times, full_scale, e.t_start_s, e.t_end_s)
        if not mask.any():
            continue
        if a.sample_format == "s16le":
            lim = np.floor(lim).astype("<i2")
        else:
            lim = lim.astype("<f4")
        seg = x[mask]
        x[mask] = np.clip(seg, -lim[:, None], lim[:, None])
    return x.astype(x.dtype).tobytes()


# --- region box blur ----------------------------------------------------------------

def box_blur_region(frame: np.ndarray, rect: Rect, k: int) -> np.ndarray:
    """Replace rect pixels with a k x k box blur of the rect's own content.

    Window indices clamp to the rect edges (replicate padding), the
    divisor is always k*k, and rounding is half-up integer math, so the
    result is bit-reproducible from the region pixels alone.
    """
    if k < 1 or k % 2 == 0:
        raise RedactionError(f"blur kernel must be odd and >= 1, got {k}")
    out = frame.copy()
    sub = frame[rect.y:rect.y + rect.h, rect.x:rect.x + rect.w]
    if sub.ndim == 2:
        blurred = _box_blur_plane(sub, k)
    else:
        blurred = np.stack(
            [_box_blur_plane(sub[:, :, c], k) for c in range(sub.shape[2])],
            axis=2,
        )
    out[rect.y:rect.y + rect.h, rect.x:rect.x + rect.w] = blurred
    return out


def _box_blur_plane(plane: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    pad = np.pad(plane.astype(np.int64), r, mode="edge")
    ii = np.zeros((pad.shape[0] + 1, pad.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = pad.cumsum(axis=0).cumsum(axis=1)
    h, w = plane.shape
    sums = (
        ii[k:k + h, k:k + w]
        - ii[0:h, k:k + w]
        - ii[k:k + h, 0:w]
        + ii[0:h, 0:w]
    )
    area = k * k
    return ((sums + area // 2) // area).astype(plane.dtype)


def _region_deviation(a: np.ndarray, b: np.ndarray, rect: Rect) -> int:
    sa = a[rect.y:rect.y + rect.h, rect.x:rect.x + rect.w].astype(np.int64)
    sb = b[rect.y:rect.y + rect.h, rect.x:rect.x + rect.w].astype(np.int64)
    return int(np.max(np.abs(sa - sb))) if sa.size else 0


def blur_region_to_fixed_point(frame: np.ndarray, rect: Rect, k: int) -> np.ndarray:
    """Blur until one more pass stays within the verification tolerance."""
    tol = blur_tolerance(frame.dtype)
    out = box_blur_region(frame, rect, k)
    for _ in range(MAX_BLUR_PASSES):
        nxt = box_blur_region(out, rect, k)
        if _region_deviation(nxt, out, rect) <= tol:
            return nxt
        out = nxt
    raise RedactionError(
        f"blur failed to reach fixed point within {MAX_BLUR_PASSES} passes"
    )


def _frame_in_interval(t_ns: int, e: RedactionEntry, origin_ns: int) -> bool:
    t_s = (t_ns - origin_ns) / 1e9
    return e.t_start_s <= t_s < e.t_end_s


def _decode_video(payload: bytes, desc: StreamDescriptor) -> np.ndarray:
    v = desc.video
    dtype = _PIXEL_DTYPES[v.pixel_format]
    arr = np.frombuffer(payload, dtype=dtype)
    if v.pixel_format == "rgb24":
        return arr.reshape(v.height_px, v.width_px, 3)
    return arr.reshape(v.height_px, v.width_px)


def _blur_payload(payload: bytes, desc: StreamDescriptor, t_frame_ns: int,
                  entries: list[RedactionEntry], k: int,
                  origin_ns: int) -> bytes:
    img = _decode_video(payload, desc)
    touched = False
    for e in entries:
        if _frame_in_interval(t_frame_ns, e, origin_ns):
            img = blur_region_to_fixed_point(img, e.region, k)
            touched = True
    return img.tobytes() if touched else payload


# --- apply ----------------------------------------------------------------------------

def apply_redactions(
    in_path: str | Path,
    private_unwrap_key: bytes,
    rlist: RedactionList,
    out_path: str | Path,
    public_wrap_key: bytes,
    blur_kernel: int = DEFAULT_BLUR_KERNEL,
) -> RedactionReport:
    """Rewrite a container with redactions applied and re-encrypted output.

    Chunk batching, frame timestamps and all non-redacted bytes are
    preserved exactly; the output gets a fresh session key wrapped to
    public_wrap_key. Returns the verification report of the output.
    """
    reader = open_container(in_path, private_unwrap_key)
    rlist.validate_against(reader.header)
    origin_ns = media_time_origin(in_path) or 0
    by_stream: dict[int, list[RedactionEntry]] = {}
    for e in rlist.entries:
        by_stream.setdefault(e.stream_id, []).append(e)

    writer = create_container(
        out_path,
        public_wrap_key,
        {**reader.header.session_meta, "redacted": True},
        reader.header.stream_table,
        reader.header.chunk_params,
        project_id=reader.header.project_id,
        session_id=reader.header.session_id,
    )
    applied_any = {i: False for i in range(len(rlist.entries))}
    try:
        for info, frames in reader.chunks():
            desc = reader.header.stream(info.stream_id)
            entries = by_stream.get(info.stream_id, [])
            if entries and desc.kind == StreamKind.AUDIO:
                frames = [
                    MediaFrame(
                        f.stream_id, f.seq, f.t_capture_ns,
                        _silence_payload(f.payload, desc, f.t_capture_ns,
                                         entries, origin_ns),
                    )
                    for f in frames
                ]
            elif entries and desc.kind in (StreamKind.VIDEO, StreamKind.DEPTH):
                frames = [
                    MediaFrame(
                        f.stream_id, f.seq, f.t_capture_ns,
                        _blur_payload(f.payload, desc, f.t_capture_ns, entries,
                                      blur_kernel, origin_ns),
                    )
                    for f in frames
                ]
            for idx, e in enumerate(rlist.entries):
                if e.stream_id == info.stream_id and not applied_any[idx]:
                    if any(
                        _frame_covers_entry(f, desc, e, origin_ns)
                        for f in frames
                    ):
                        applied_any[idx] = True
            writer.append_chunk(info.stream_id, frames)
        writer.finalize()
    except BaseException:
        writer.close()
        Path(out_path).unlink(missing_ok=True)
        raise

    report = verify_redactions(out_path, private_unwrap_key, rlist,
                               blur_kernel=blur_kernel)
    for idx, res in enumerate(report.entries):
        res.applied = applied_any[idx]
    return report


def _frame_covers_entry(f: MediaFrame, desc: StreamDescriptor,
                        e: RedactionEntry, origin_ns: int) -> bool:
    if desc.kind == StreamKind.AUDIO:
        a = desc.audio
        n = len(f.payload) // a.bytes_per_sample
        t0 = (f.t_capture_ns - origin_ns) / 1e9
        t1 = t0 + n / a.sample_rate_hz
        return t0 < e.t_end_s and t1 > e.t_start_s
    return _frame_in_interval(f.t_capture_ns, e, origin_ns)


# --- verify ---------------------------------------------------------------------------

def verify_redactions(
    path: str | Path,
    private_unwrap_key: bytes,
    rlist: RedactionList,
    blur_kernel: int = DEFAULT_BLUR_KERNEL,
) -> RedactionReport:
    """Check each entry against the container content.

    Audio: RMS inside the interval (excluding the edge ramps) must be at
    or below -90 dBFS; the metric is the measured dBFS. Video: the region
    must be a fixed point of the blur within 1 per channel; the metric is
    the maximum per-pixel deviation.
    """
    reader = open_container(path, private_unwrap_key)
    rlist.validate_against(reader.header)
    origin_ns = media_time_origin(path) or 0
    results = [EntryResult(applied=True) for _ in rlist.entries]
    sumsq = [0.0 for _ in rlist.entries]
    counts = [0 for _ in rlist.entries]
    max_dev = [None for _ in rlist.entries]

    for info, frames in reader.chunks():
        desc = reader.header.stream(info.stream_id)
        for idx, e in enumerate(rlist.entries):
            if e.stream_id != info.stream_id:
                continue
            if desc.kind == StreamKind.AUDIO:
                a = desc.audio
                core0, core1 = e.t_start_s + RAMP_S, e.t_end_s - RAMP_S
                for f in frames:
                    if a.sample_format == "s16le":
                        x = np.frombuffer(f.payload, dtype="<i2").astype(np.float64)
                        x = x.reshape(-1, a.channels) / 32768.0
                    else:
                        x = np.frombuffer(f.payload, dtype="<f4").astype(np.float64)
                        x = x.reshape(-1, a.channels)
                    times = ((f.t_capture_ns - origin_ns) / 1e9
                             + np.arange(x.shape[0]) / a.sample_rate_hz)
                    m = (times >= core0) & (times < core1)
                    if m.any():
                        sumsq[idx] += float(np.sum(np.square(x[m])))
                        counts[idx] += int(m.sum()) * a.channels
            else:
                for f in frames:
                    if not _frame_in_interval(f.t_capture_ns, e, origin_ns):
                        continue
                    img = _decode_video(f.payload, desc)
                    reblurred = box_blur_region(img, e.region, blur_kernel)
                    dev = _region_deviation(reblurred, img, e.region)
                    prev = max_dev[idx]
                    max_dev[idx] = dev if prev is None else max(prev, dev)

    report = RedactionReport(entries=results)
    for idx, e in enumerate(rlist.entries):
        desc = reader.header.stream(e.stream_id)
        if desc.kind == StreamKind.AUDIO:
            if counts[idx] == 0:
                results[idx].applied = False
                results[idx].verified = False
                continue
            rms = (sumsq[idx] / counts[idx]) ** 0.5
            db = 20 * np.log10(rms) if rms > 0 else -96.0
            db = max(float(db), -96.0)
            results[idx].metric = round(db, 2)
            results[idx].verified = db <= AUDIO_VERIFY_MAX_DB
        else:
            if max_dev[idx] is None:
                results[idx].applied = False
                results[idx].verified = False
                continue
            tol = blur_tolerance(_PIXEL_DTYPES[desc.video.pixel_format])
            results[idx].metric = float(max_dev[idx])
            results[idx].verified = max_dev[idx] <= tol
    return report


# --- export ---------------------------------------------------------------------------

def export_plain(
    path: str | Path,
    private_unwrap_key: bytes,
    out_dir: str | Path,
    rlist: RedactionList | None,
    attest_no_redactions: bool = False,
) -> dict:
    """Write per-stream plaintext files plus a hash manifest.

    Refuses unless redaction verification passes in this same call; an
    empty/missing list is only accepted with attest_no_redactions.
    """
    if rlist is None or not rlist.entries:
        if not attest_no_redactions:
            raise ExportRefusedError(
                "no redaction list: pass --attest-no-redactions to export "
                "a container that needs none"
            )
        report = None
    else:
        report = verify_redactions(path, private_unwrap_key, rlist)
        if not report.overall_pass:
            raise ExportRefusedError(
                "redaction verification failed; export refused"
            )

    reader = open_container(path, private_unwrap_key)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    per_stream: dict[int, list[MediaFrame]] = {
        s.stream_id: [] for s in reader.header.stream_table
    }
    for info, frames in reader.chunks():
        per_stream[info.stream_id].extend(frames)

    manifest: dict = {
        "session_id": str(reader.header.session_id),
        "project_id": str(reader.header.project_id),
        "verified": bool(report.overall_pass) if report else False,
        "attested_no_redactions": report is None,
        "streams": [],
    }
    for desc in reader.header.stream_table:
        frames = per_stream[desc.stream_id]
        name = f"stream{desc.stream_id}_{desc.kind.value}"
        entry: dict = {"stream_id": desc.stream_id, "kind": desc.kind.value,
                       "label": desc.label, "frames": len(frames)}
        if desc.kind == StreamKind.AUDIO and desc.audio.sample_format == "s16le":
            file = out_dir / f"{name}.wav"
            with wave.open(str(file), "wb") as wf:
                wf.setnchannels(desc.audio.channels)
                wf.setsampwidth(2)
                wf.setframerate(desc.audio.sample_rate_hz)
                for f in frames:
                    wf.writeframes(f.payload)
        elif desc.kind == StreamKind.AUDIO:
            file = out_dir / f"{name}.f32"
            with open(file, "wb") as fh:
                for f in frames:
                    fh.write(f.payload)
            _write_sidecar(file, desc, frames)
        elif desc.kind in (StreamKind.VIDEO, StreamKind.DEPTH):
            file = out_dir / f"{name}.raw"
            with open(file, "wb") as fh:
                for f in frames:
                    fh.write(f.payload)
            _write_sidecar(file, desc, frames)
        else:
            file = out_dir / f"{name}.ndjson"
            with open(file, "wb") as fh:
                for f in frames:
                    fh.write(f.payload)
                    if not f.payload.endswith(b"\n"):
                        fh.write(b"\n")
        entry["file"] = file.name
        entry["sha256"] = hashlib.sha256(file.read_bytes()).hexdigest()
        entry["bytes"] = file.stat().st_size
        manifest["streams"].append(entry)

    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def _write_sidecar(file: Path, desc: StreamDescriptor,
                   frames: list[MediaFrame]) -> None:
    doc = desc.to_dict()
    doc["frame_count"] = len(frames)
    if frames:
        doc["t_first_ns"] = frames[0].t_capture_ns
        doc["t_last_ns"] = frames[-1].t_capture_ns
    file.with_suffix(file.suffix + ".json").write_text(
        json.dumps(doc, indent=2) + "\n"
    )
