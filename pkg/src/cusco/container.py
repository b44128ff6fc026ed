"""Append-only encrypted recording container.

File layout (all integers big-endian):

    magic "CUSCOREC"
    u32 header_len | header (canonical JSON, self-describing, versioned)
    repeated: u32 body_len | body

    body := u8 record_type | u32 stream_id | u64 chunk_seq
          | i64 t_start_ns | i64 t_end_ns | u64 global_index
          | u8 nonce_len | nonce | ciphertext+tag

Record types: 1 = media chunk, 2 = footer (a sealed final chunk holding
chunk counts; readers never require it, so files cut short by a crash
stay readable by sequential scan).

Security model: a random 32-byte session root key is wrapped to the
project public key and stored in the header; the device never keeps the
unwrapped root. Chunk keys come from a hash-forward ratchet seeded by
the root, and the chain key for step i is discarded as soon as chunk i
is sealed, so writer state captured at counter k cannot decrypt any
chunk with global_index < k. Each chunk is ChaCha20-Poly1305 sealed
with its metadata (and the header hash) as associated data, so moving,
renumbering or editing a chunk breaks its tag.
"""

from __future__ import annotations

import dataclasses
import hashlib
import hmac
import io
import json
import os
import secrets
import struct
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Iterator

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from cusco.errors import (
    ChunkOrderError,
    ConfigError,
    FormatError,
    IntegrityError,
)
from cusco.keys import unwrap_key, wrap_key
from cusco.streams import MediaFrame, StreamDescriptor, validate_stream_table

MAGIC = b"CUSCOREC"
FORMAT_VERSION = 1

RECORD_CHUNK = 1
RECORD_FOOTER = 2

DEFAULT_MAX_CHUNK_BYTES = 1 << 20
DEFAULT_MAX_CHUNK_DURATION_MS = 1000

# Sanity cap on a single record so a corrupt length prefix cannot make the
# reader allocate gigabytes.
MAX_RECORD_BYTES = 1 << 28

_CHAIN_INIT = b"CUSCO.chain.init.v1"
_CHAIN_STEP = b"CUSCO.chain.step.v1"
_CHUNK_KEY = b"CUSCO.chunk.key.v1"

_PREFIX = struct.Struct(">BIQqqQ")  # type, stream_id, seq, t_start, t_end, global_index
_NONCE_LEN = 12


def _kdf(key: bytes, label: bytes) -> bytes:
    return hmac.new(key, label, hashlib.sha256).digest()


def _nonce(record_type: int, global_index: int) -> bytes:
    # Chunk keys never repeat, and footers get their own nonce domain so a
    # recovery pass can re-seal a footer at a reused index without nonce reuse.
    return struct.pack(">BxxxQ", record_type, global_index)


@dataclass
class RatchetState:
    """Forward-only key chain position: everything derivable from here is
    key(counter) and later, never earlier."""

    counter: int
    current_key: bytes

    def chunk_key(self) -> bytes:
        return _kdf(self.current_key, _CHUNK_KEY)

    def advance(self) -> None:
        self.current_key = _kdf(self.current_key, _CHAIN_STEP)
        self.counter += 1

    def snapshot(self) -> "RatchetState":
        return RatchetState(self.counter, self.current_key)


def initial_chain_key(session_root_key: bytes) -> bytes:
    return _kdf(session_root_key, _CHAIN_INIT)


@dataclass(frozen=True)
class ChunkParams:
    max_chunk_bytes: int = DEFAULT_MAX_CHUNK_BYTES
    max_chunk_duration_ms: int = DEFAULT_MAX_CHUNK_DURATION_MS

    def validate(self) -> None:
        if self.max_chunk_bytes <= 0 or self.max_chunk_duration_ms <= 0:
            raise ConfigError("chunk bounds must be positive")

    def to_dict(self) -> dict:
        return {
            "max_chunk_bytes": self.max_chunk_bytes,
            "max_chunk_duration_ms": self.max_chunk_duration_ms,
        }


@dataclass(frozen=True)
class ContainerHeader:
    format_version: int
    project_id: uuid.UUID
    session_id: uuid.UUID
    created_at: datetime
    stream_table: list[StreamDescriptor]
    wrapped_session_key: bytes
    chunk_params: ChunkParams
    session_meta: dict

    def encode(self) -> bytes:
        doc = {
            "format_version": self.format_version,
            "project_id": str(self.project_id),
            "session_id": str(self.session_id),
            "created_at": self.created_at.isoformat(),
            "streams": [s.to_dict() for s in self.stream_table],
            "wrapped_session_key": self.wrapped_session_key.hex(),
            "chunk_params": self.chunk_params.to_dict(),
            "session_meta": self.session_meta,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def decode(cls, raw: bytes) -> "ContainerHeader":
        try:
            doc = json.loads(raw.decode())
            version = int(doc["format_version"])
            if version != FORMAT_VERSION:
                raise FormatError(f"unsupported container format version {version}")
            return cls(
                format_version=version,
                project_id=uuid.UUID(doc["project_id"]),
                session_id=uuid.UUID(doc["session_id"]),
                created_at=datetime.fromisoformat(doc["created_at"]),
                stream_table=[StreamDescriptor.from_dict(d) for d in doc["streams"]],
                wrapped_session_key=bytes.fromhex(doc["wrapped_session_key"]),
                chunk_params=ChunkParams(**doc["chunk_params"]),
                session_meta=doc.get("session_meta", {}),
            )
        except FormatError:
            raise
        except (KeyError, ValueError, TypeError, ConfigError, UnicodeDecodeError) as exc:
            raise FormatError(f"malformed container header: {exc}") from exc

    def stream(self, stream_id: int) -> StreamDescriptor:
        for s in self.stream_table:
            if s.stream_id == stream_id:
                return s
        raise FormatError(f"stream id {stream_id} not in header")


@dataclass(frozen=True)
class ChunkInfo:
    """On-disk metadata of one sealed chunk."""

    stream_id: int
    seq: int
    t_start_ns: int
    t_end_ns: int
    global_index: int
    record_type: int = RECORD_CHUNK
    offset: int = 0          # file offset of the record's length prefix
    record_len: int = 0      # total bytes including the length prefix
    ciphertext_len: int = 0


@dataclass
class IntegrityReport:
    chunks_ok: int = 0
    tampered: list[int] = field(default_factory=list)
    truncated_at: int | None = None
    footer_present: bool = False

    @property
    def clean(self) -> bool:
        return not self.tampered and self.truncated_at is None

    def to_dict(self) -> dict:
        return {
            "chunks_ok": self.chunks_ok,
            "tampered": list(self.tampered),
            "truncated_at": self.truncated_at,
            "footer_present": self.footer_present,
            "clean": self.clean,
        }


# --- frame batch codec --------------------------------------------------------

def encode_frames(frames: list[MediaFrame]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack(">I", len(frames)))
    for f in frames:
        out.write(struct.pack(">QqI", f.seq, f.t_capture_ns, len(f.payload)))
        out.write(f.payload)
    return out.getvalue()


def decode_frames(stream_id: int, plaintext: bytes) -> list[MediaFrame]:
    try:
        (count,) = struct.unpack_from(">I", plaintext, 0)
        pos = 4
        frames = []
        for _ in range(count):
            seq, t_capture, plen = struct.unpack_from(">QqI", plaintext, pos)
            pos += 20
            payload = plaintext[pos:pos + plen]
            if len(payload) != plen:
                raise FormatError("frame payload shorter than declared")
            pos += plen
            frames.append(MediaFrame(stream_id, seq, t_capture, payload))
        return frames
    except struct.error as exc:
        raise FormatError(f"malformed chunk plaintext: {exc}") from exc


# --- writer --------------------------------------------------------------------

class ContainerWriter:
    """Single writer per file; append calls must be serialized by the caller."""

    def __init__(self, path: Path, fh: BinaryIO, header: ContainerHeader,
                 chain_key: bytes, header_hash: bytes):
        self.path = path
        self._fh = fh
        self.header = header
        self._ratchet = RatchetState(0, chain_key)
        self._header_hash = header_hash
        self._stream_seq: dict[int, int] = {
            s.stream_id: 0 for s in header.stream_table
        }
        self._stream_last_t: dict[int, int] = {}
        self._chunk_count = 0
        self._finalized = False

    @property
    def ratchet_counter(self) -> int:
        return self._ratchet.counter

    def ratchet_snapshot(self) -> RatchetState:
        """The complete key material a mid-recording device snapshot exposes."""
        return self._ratchet.snapshot()

    @property
    def chunk_count(self) -> int:
        return self._chunk_count

    def stream_chunk_counts(self) -> dict[int, int]:
        return dict(self._stream_seq)

    def _seal_record(self, record_type: int, stream_id: int, seq: int,
                     t_start: int, t_end: int, plaintext: bytes) -> ChunkInfo:
        index = self._ratchet.counter
        nonce = _nonce(record_type, index)
        prefix = _PREFIX.pack(record_type, stream_id, seq, t_start, t_end, index)
        prefix += bytes([len(nonce)]) + nonce
        aad = self._header_hash + prefix
        ct = ChaCha20Poly1305(self._ratchet.chunk_key()).encrypt(nonce, plaintext, aad)
        body = prefix + ct
        offset = self._fh.tell()
        self._fh.write(struct.pack(">I", len(body)))
        self._fh.write(body)
        self._fh.flush()
        os.fsync(self._fh.fileno())
        # The chain key that sealed this chunk is gone once we advance.
        self._ratchet.advance()
        return ChunkInfo(
            stream_id=stream_id,
            seq=seq,
            t_start_ns=t_start,
            t_end_ns=t_end,
            global_index=index,
            record_type=record_type,
            offset=offset,
            record_len=4 + len(body),
            ciphertext_len=len(ct),
        )

    def append_chunk(self, stream_id: int, frames: list[MediaFrame]) -> ChunkInfo:
        """Seal one batch of frames; durable on disk when this returns."""
        if self._finalized:
            raise FormatError("container already finalized")
        if stream_id not in self._stream_seq:
            raise ConfigError(f"stream id {stream_id} not in container header")
        if not frames:
            raise ValueError("frame batch must be non-empty")
        t_start = frames[0].t_capture_ns
        t_end = frames[-1].t_capture_ns
        for a, b in zip(frames, frames[1:]):
            if b.t_capture_ns < a.t_capture_ns:
                raise ChunkOrderError(
                    f"stream {stream_id}: frame timestamps regress within batch"
                )
        last_t = self._stream_last_t.get(stream_id)
        if last_t is not None and t_start < last_t:
            raise ChunkOrderError(
                f"stream {stream_id}: batch starts at {t_start} before "
                f"previous chunk end {last_t}"
            )
        seq = self._stream_seq[stream_id]
        info = self._seal_record(
            RECORD_CHUNK, stream_id, seq, t_start, t_end, encode_frames(frames)
        )
        self._stream_seq[stream_id] = seq + 1
        self._stream_last_t[stream_id] = t_end
        self._chunk_count += 1
        return info

    def finalize(self) -> None:
        """Seal the footer and close. Absence of a footer marks a crashed file."""
        if self._finalized:
            return
        footer = json.dumps(
            {
                "chunk_count": self._chunk_count,
                "stream_chunk_counts": {
                    str(k): v for k, v in sorted(self._stream_seq.items())
                },
            },
            sort_keys=True,
        ).encode()
        self._seal_record(RECORD_FOOTER, 0, 0, 0, 0, footer)
        self._finalized = True
        self._fh.close()

    def close(self) -> None:
        """Close without a footer (simulates interruption; file stays valid)."""
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "ContainerWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.finalize()
        else:
            self.close()


def create_container(
    path: str | Path,
    public_wrap_key: bytes,
    session_meta: dict,
    streams: list[StreamDescriptor],
    chunk_params: ChunkParams | None = None,
    project_id: uuid.UUID | None = None,
    session_id: uuid.UUID | None = None,
) -> ContainerWriter:
    """Create a new container; the header is durable before this returns.

    Only the public wrap key is needed. The unwrapped session root key
    exists just long enough to derive the first chain key.
    """
    path = Path(path)
    if path.exists():
        raise FileExistsError(f"refusing to overwrite existing container {path}")
    table = validate_stream_table(streams)
    params = chunk_params or ChunkParams()
    params.validate()
    root = secrets.token_bytes(32)
    header = ContainerHeader(
        format_version=FORMAT_VERSION,
        project_id=project_id or uuid.uuid4(),
        session_id=session_id or uuid.uuid4(),
        created_at=datetime.now(timezone.utc),
        stream_table=table,
        wrapped_session_key=wrap_key(public_wrap_key, root),
        chunk_params=params,
        session_meta=session_meta,
    )
    chain0 = initial_chain_key(root)
    del root
    raw = header.encode()
    fh = open(path, "xb")
    fh.write(MAGIC)
    fh.write(struct.pack(">I", len(raw)))
    fh.write(raw)
    fh.flush()
    os.fsync(fh.fileno())
    return ContainerWriter(path, fh, header, chain0, hashlib.sha256(raw).digest())


# --- raw scan (no keys needed) --------------------------------------------------

@dataclass(frozen=True)
class RawRecord:
    offset: int
    body: bytes

    @property
    def record_len(self) -> int:
        return 4 + len(self.body)


def read_header(path: str | Path) -> tuple[ContainerHeader, bytes, int]:
    """Returns (header, header_hash, offset of first record)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"{path}: not a recording container (bad magic)")
        lenraw = fh.read(4)
        if len(lenraw) != 4:
            raise FormatError(f"{path}: truncated header length")
        (hlen,) = struct.unpack(">I", lenraw)
        if hlen > MAX_RECORD_BYTES:
            raise FormatError(f"{path}: implausible header length {hlen}")
        raw = fh.read(hlen)
        if len(raw) != hlen:
            raise FormatError(f"{path}: truncated header")
        header = ContainerHeader.decode(raw)
        return header, hashlib.sha256(raw).digest(), fh.tell()


def scan_records(path: str | Path, start_offset: int) -> Iterator[RawRecord]:
    """Sequential scan of length-prefixed records.

    Raises TruncationMark (carrying the offset) wrapped as StopIteration
    semantics: instead of raising we stop and expose the cut offset via
    the generator's return value; use iter_records() for the common case.
    """
    with open(path, "rb") as fh:
        fh.seek(start_offset)
        while True:
            offset = fh.tell()
            lenraw = fh.read(4)
            if not lenraw:
                return
            if len(lenraw) != 4:
                yield RawRecord(offset, b"")  # trailing partial length prefix
                return
            (blen,) = struct.unpack(">I", lenraw)
            if blen == 0 or blen > MAX_RECORD_BYTES:
                yield RawRecord(offset, b"")  # corrupt length; treat as cut here
                return
            body = fh.read(blen)
            if len(body) != blen:
                yield RawRecord(offset, b"")  # record cut mid-body
                return
            yield RawRecord(offset, body)


def _parse_body(body: bytes) -> tuple[ChunkInfo, bytes, bytes]:
    """Split a record body into (info, aad_prefix, ciphertext)."""
    if len(body) < _PREFIX.size + 1:
        raise FormatError("record body too short")
    rtype, stream_id, seq, t_start, t_end, index = _PREFIX.unpack_from(body, 0)
    pos = _PREFIX.size
    nlen = body[pos]
    pos += 1
    nonce = body[pos:pos + nlen]
    if len(nonce) != nlen or nlen != _NONCE_LEN:
        raise FormatError("record nonce malformed")
    pos += nlen
    info = ChunkInfo(
        stream_id=stream_id, seq=seq, t_start_ns=t_start, t_end_ns=t_end,
        global_index=index, record_type=rtype, ciphertext_len=len(body) - pos,
    )
    return info, body[:pos], body[pos:]


# A sealed record is never smaller than this; bounds how many ratchet steps a
# file of a given size can plausibly demand, so a corrupt index field cannot
# drive the key walk into the 2^64 range.
_MIN_RECORD_BYTES = 4 + _PREFIX.size + 1 + _NONCE_LEN + 16


def _plausible_index_cap(path: str | Path) -> int:
    return os.path.getsize(path) // _MIN_RECORD_BYTES + 8


class _ChainWalker:
    """Derives chunk keys forward from the unwrapped root, skipping gaps."""

    def __init__(self, root: bytes, max_index: int):
        self._state = RatchetState(0, initial_chain_key(root))
        self._max_index = max_index

    @property
    def counter(self) -> int:
        return self._state.counter

    def key_for(self, index: int) -> bytes:
        if index < self._state.counter:
            raise IntegrityError(
                f"global_index {index} regressed below ratchet position "
                f"{self._state.counter}"
            )
        if index > self._max_index:
            raise IntegrityError(
                f"global_index {index} beyond what a {self._max_index}-record "
                f"file can hold"
            )
        while self._state.counter < index:
            self._state.advance()
        return self._state.chunk_key()


# --- reader ----------------------------------------------------------------------

class ContainerReader:
    """Sequential decrypting reader; every tag is verified before any
    plaintext is yielded."""

    def __init__(self, path: str | Path, private_unwrap_key: bytes):
        self.path = Path(path)
        self.header, self._header_hash, self._first_record = read_header(path)
        root = unwrap_key(private_unwrap_key, self.header.wrapped_session_key)
        self._root = root
        self._max_index = _plausible_index_cap(path)

    def records(self) -> Iterator[tuple[ChunkInfo, bytes]]:
        """Yield (info, plaintext) for every sealed record including the
        footer; raises IntegrityError on the first bad record."""
        walker = _ChainWalker(self._root, self._max_index)
        for raw in scan_records(self.path, self._first_record):
            if not raw.body:
                raise IntegrityError(
                    f"{self.path}: truncated record at byte {raw.offset}"
                )
            try:
                info, prefix, ct = _parse_body(raw.body)
                key = walker.key_for(info.global_index)
                plaintext = ChaCha20Poly1305(key).decrypt(
                    _nonce(info.record_type, info.global_index),
                    ct,
                    self._header_hash + prefix,
                )
            except (FormatError, InvalidTag) as exc:
                raise IntegrityError(
                    f"{self.path}: chunk at byte {raw.offset} failed "
                    f"authentication"
                ) from exc
            info = dataclasses.replace(
                info, offset=raw.offset, record_len=raw.record_len
            )
            yield info, plaintext

    def chunks(self) -> Iterator[tuple[ChunkInfo, list[MediaFrame]]]:
        """Decrypted media chunks in global order, as decoded frames."""
        for info, plaintext in self.records():
            if info.record_type == RECORD_CHUNK:
                yield info, decode_frames(info.stream_id, plaintext)

    def stream_frames(self, stream_id: int) -> Iterator[MediaFrame]:
        for info, frames in self.chunks():
            if info.stream_id == stream_id:
                yield from frames

    def footer(self) -> dict | None:
        for info, plaintext in self.records():
            if info.record_type == RECORD_FOOTER:
                return json.loads(plaintext.decode())
        return None


def open_container(path: str | Path, private_unwrap_key: bytes) -> ContainerReader:
    return ContainerReader(path, private_unwrap_key)


def verify_container(path: str | Path, private_unwrap_key: bytes) -> IntegrityReport:
    """Full read-only scan localizing every bad chunk.

    Damage never aborts the scan: a bad tag is recorded by global index
    (or, when the index field itself is unreadable, by position) and the
    walk continues at the next record boundary.
    """
    header, header_hash, first = read_header(path)
    root = unwrap_key(private_unwrap_key, header.wrapped_session_key)
    report = IntegrityReport()
    cap = _plausible_index_cap(path)
    # Keys are derived on demand; a regressed or corrupt index rebuilds the
    # chain from scratch rather than breaking the walk.
    walker = _ChainWalker(root, cap)
    position = 0
    for raw in scan_records(path, first):
        if not raw.body:
            report.truncated_at = raw.offset
            break
        try:
            info, prefix, ct = _parse_body(raw.body)
        except FormatError:
            report.tampered.append(position)
            position += 1
            continue
        # A failed record whose own index field is damaged beyond plausibility
        # is reported by its position in the file, which equals the index for
        # containers written in one piece.
        label = info.global_index if info.global_index <= cap else position
        try:
            if info.global_index < walker.counter:
                walker = _ChainWalker(root, cap)
            key = walker.key_for(info.global_index)
            ChaCha20Poly1305(key).decrypt(
                _nonce(info.record_type, info.global_index),
                ct,
                header_hash + prefix,
            )
        except (InvalidTag, IntegrityError):
            report.tampered.append(label)
            position += 1
            continue
        if info.record_type == RECORD_FOOTER:
            report.footer_present = True
        else:
            report.chunks_ok += 1
        position += 1
    return report


def recover_truncated(
    path: str | Path, private_unwrap_key: bytes, out_path: str | Path
) -> int:
    """Copy every verifiable chunk into a fresh finalized container.

    Returns the number of recovered media chunks (equals
    verify_container().chunks_ok). The header must be intact; an
    unreadable header is unrecoverable by design since it holds the
    wrapped session key.
    """
    out_path = Path(out_path)
    if out_path.exists():
        raise FileExistsError(f"refusing to overwrite {out_path}")
    header, header_hash, first = read_header(path)
    root = unwrap_key(private_unwrap_key, header.wrapped_session_key)

    kept: list[RawRecord] = []
    stream_counts: dict[int, int] = {}
    max_index = -1
    index_cap = _plausible_index_cap(path)
    walker = _ChainWalker(root, index_cap)
    for raw in scan_records(path, first):
        if not raw.body:
            break
        try:
            info, prefix, ct = _parse_body(raw.body)
        except FormatError:
            continue
        try:
            if info.global_index < walker.counter:
                walker = _ChainWalker(root, index_cap)
            key = walker.key_for(info.global_index)
            ChaCha20Poly1305(key).decrypt(
                _nonce(info.record_type, info.global_index),
                ct,
                header_hash + prefix,
            )
        except (InvalidTag, IntegrityError):
            continue
        max_index = max(max_index, info.global_index)
        if info.record_type == RECORD_CHUNK:
            kept.append(raw)
            stream_counts[info.stream_id] = stream_counts.get(info.stream_id, 0) + 1

    raw_header = header.encode()
    with open(out_path, "xb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(">I", len(raw_header)))
        fh.write(raw_header)
        for raw in kept:
            fh.write(struct.pack(">I", len(raw.body)))
            fh.write(raw.body)
        # Fresh footer sealed past every index seen in the damaged file, so
        # its key (and footer-domain nonce) can never collide with bytes the
        # original file already exposed.
        footer_index = max_index + 1
        chain = RatchetState(0, initial_chain_key(root))
        while chain.counter < footer_index:
            chain.advance()
        footer_doc = json.dumps(
            {
                "chunk_count": len(kept),
                "stream_chunk_counts": {str(k): v for k, v in sorted(stream_counts.items())},
                "recovered": True,
            },
            sort_keys=True,
        ).encode()
        nonce = _nonce(RECORD_FOOTER, footer_index)
        prefix = _PREFIX.pack(RECORD_FOOTER, 0, 0, 0, 0, footer_index)
        prefix += bytes([_NONCE_LEN]) + nonce
        ct = ChaCha20Poly1305(_kdf(chain.current_key, _CHUNK_KEY)).encrypt(
            nonce, footer_doc, header_hash + prefix
        )
        body = prefix + ct
        fh.write(struct.pack(">I", len(body)))
        fh.write(body)
        fh.flush()
        os.fsync(fh.fileno())
    return len(kept)
