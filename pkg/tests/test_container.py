"""Container format: sealing, ratchet forward secrecy, tamper localization,
truncation recovery."""

import random
import secrets
import struct
import uuid

import pytest
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from cusco.container import (
    ChunkParams,
    RatchetState,
    _kdf,
    _nonce,
    _parse_body,
    _CHUNK_KEY,
    create_container,
    open_container,
    read_header,
    recover_truncated,
    scan_records,
    verify_container,
)
from cusco.errors import (
    ChunkOrderError,
    ConfigError,
    FormatError,
    IntegrityError,
    KeyMismatchError,
)
from cusco.keys import generate_project_keys, unwrap_key, wrap_key
from cusco.streams import MediaFrame

from conftest import audio_desc, depth_desc, video_desc


def frame(stream_id, seq, t_ns, payload=None, size=64):
    if payload is None:
        payload = secrets.token_bytes(size)
    return MediaFrame(stream_id, seq, t_ns, payload)


def write_chunks(path, pub, n_chunks, streams=None, frames_per_chunk=2,
                 payload_size=64, finalize=True):
    """Build a container with n_chunks single-stream chunks; returns
    (infos, plaintext frames per chunk)."""
    streams = streams or [audio_desc(0)]
    w = create_container(path, pub, {"test": True}, streams)
    infos, batches = [], []
    t = 0
    seqs = {s.stream_id: 0 for s in streams}
    for i in range(n_chunks):
        sid = streams[i % len(streams)].stream_id
        batch = []
        for _ in range(frames_per_chunk):
            batch.append(frame(sid, seqs[sid], t, size=payload_size))
            seqs[sid] += 1
            t += 1_000_000
        infos.append(w.append_chunk(sid, batch))
        batches.append(batch)
    if finalize:
        w.finalize()
    else:
        w.close()
    return infos, batches


# --- keypairs -----------------------------------------------------------------

def test_keygen_distinct():
    pid = uuid.uuid4()
    a = generate_project_keys(pid)
    b = generate_project_keys(pid)
    assert a.public_wrap_key != b.public_wrap_key
    assert a.private_unwrap_key != b.private_unwrap_key


def test_wrap_roundtrip(keypair):
    payload = secrets.token_bytes(32)
    assert unwrap_key(keypair.private_unwrap_key, wrap_key(keypair.public_wrap_key, payload)) == payload


def test_cross_project_unwrap_fails(keypair, other_keypair):
    wrapped = wrap_key(keypair.public_wrap_key, secrets.token_bytes(32))
    with pytest.raises(KeyMismatchError):
        unwrap_key(other_keypair.private_unwrap_key, wrapped)


# --- create -------------------------------------------------------------------

def test_create_then_crash_yields_empty_container(tmp_path, keypair):
    path = tmp_path / "empty.rec"
    w = create_container(path, keypair.public_wrap_key, {}, [audio_desc(0)])
    w.close()  # no chunks, no footer: simulated crash right after create
    r = open_container(path, keypair.private_unwrap_key)
    assert list(r.chunks()) == []
    assert r.header.stream_table[0].stream_id == 0
    assert verify_container(path, keypair.private_unwrap_key).chunks_ok == 0


def test_create_refuses_existing_path(tmp_path, keypair):
    path = tmp_path / "a.rec"
    path.write_bytes(b"something")
    with pytest.raises(FileExistsError):
        create_container(path, keypair.public_wrap_key, {}, [audio_desc(0)])


def test_create_duplicate_stream_ids_rejected(tmp_path, keypair):
    with pytest.raises(ConfigError):
        create_container(
            tmp_path / "d.rec", keypair.public_wrap_key, {},
            [audio_desc(0), audio_desc(0)],
        )


def test_create_zero_streams_rejected(tmp_path, keypair):
    with pytest.raises(ConfigError):
        create_container(tmp_path / "z.rec", keypair.public_wrap_key, {}, [])


def test_create_sparse_stream_ids_rejected(tmp_path, keypair):
    with pytest.raises(ConfigError):
        create_container(
            tmp_path / "s.rec", keypair.public_wrap_key, {},
            [audio_desc(0), video_desc(2)],
        )


def test_create_two_camera_two_mic_setup(tmp_path, keypair):
    # The shipped deployment shape: two depth cameras, a table mic, a mic array.
    streams = [
        depth_desc(0),
        depth_desc(1),
        audio_desc(2, channels=1),
        audio_desc(3, channels=8),
    ]
    w = create_container(tmp_path / "rig.rec", keypair.public_wrap_key, {}, streams)
    assert len(w.header.stream_table) == 4
    w.finalize()


# --- append + roundtrip ---------------------------------------------------------

def test_roundtrip_frames_bit_exact(tmp_path, keypair):
    path = tmp_path / "rt.rec"
    _, batches = write_chunks(path, keypair.public_wrap_key, 7,
                              streams=[audio_desc(0), video_desc(1)])
    r = open_container(path, keypair.private_unwrap_key)
    got = [frames for _, frames in r.chunks()]
    assert got == batches


def test_append_empty_batch_rejected(tmp_path, keypair):
    w = create_container(tmp_path / "e.rec", keypair.public_wrap_key, {}, [audio_desc(0)])
    with pytest.raises(ValueError):
        w.append_chunk(0, [])
    w.close()


def test_append_unknown_stream_rejected(tmp_path, keypair):
    w = create_container(tmp_path / "u.rec", keypair.public_wrap_key, {}, [audio_desc(0)])
    with pytest.raises(ConfigError):
        w.append_chunk(5, [frame(5, 0, 0)])
    w.close()


def test_append_timestamp_regression_rejected(tmp_path, keypair):
    w = create_container(tmp_path / "t.rec", keypair.public_wrap_key, {}, [audio_desc(0)])
    w.append_chunk(0, [frame(0, 0, 1_000_000)])
    with pytest.raises(ChunkOrderError):
        w.append_chunk(0, [frame(0, 1, 500_000)])
    # The writer survives a rejected batch; a later in-order batch lands.
    w.append_chunk(0, [frame(0, 1, 2_000_000)])
    w.finalize()
    r = open_container(tmp_path / "t.rec", keypair.private_unwrap_key)
    assert len(list(r.chunks())) == 2


def test_per_stream_chunk_seq_dense(tmp_path, keypair):
    path = tmp_path / "seq.rec"
    write_chunks(path, keypair.public_wrap_key, 10,
                 streams=[audio_desc(0), video_desc(1)])
    r = open_container(path, keypair.private_unwrap_key)
    seen = {0: [], 1: []}
    for info, _ in r.chunks():
        seen[info.stream_id].append(info.seq)
    for sid, seqs in seen.items():
        assert seqs == list(range(len(seqs)))


# --- forward secrecy -------------------------------------------------------------

def snapshot_decrypt_attempts(path, snapshot, upto_index, extra_keys=30):
    """Adversary oracle: given ratchet state captured at counter k, try every
    derivable chunk key against every earlier sealed record, exhaustively.

    Returns the number of records with global_index < upto_index that
    decrypted under ANY derivable key (must be zero)."""
    header, header_hash, first = read_header(path)
    candidates = []
    state = RatchetState(snapshot.counter, snapshot.current_key)
    for _ in range(extra_keys):
        candidates.append(_kdf(state.current_key, _CHUNK_KEY))
        state.advance()
    recovered = 0
    for raw in scan_records(path, first):
        if not raw.body:
            break
        info, prefix, ct = _parse_body(raw.body)
        if info.global_index >= upto_index:
            continue
        for key in candidates:
            try:
                ChaCha20Poly1305(key).decrypt(
                    _nonce(info.record_type, info.global_index),
                    ct, header_hash + prefix,
                )
                recovered += 1
                break
            except InvalidTag:
                continue
    return recovered


def test_snapshot_cannot_decrypt_past_chunks(tmp_path, keypair):
    path = tmp_path / "fs.rec"
    streams = [audio_desc(0)]
    w = create_container(path, keypair.public_wrap_key, {}, streams)
    t = 0
    for i in range(100):
        w.append_chunk(0, [frame(0, i, t)])
        t += 1_000_000
        if i == 49:
            snapshot = w.ratchet_snapshot()
    w.finalize()
    assert snapshot.counter == 50
    assert snapshot_decrypt_attempts(path, snapshot, upto_index=50) == 0


def test_snapshot_forward_secrecy_random_lengths(tmp_path, keypair):
    rng = random.Random(20240517)
    for trial in range(5):
        n = rng.randint(2, 40)
        k = rng.randint(1, n)
        path = tmp_path / f"fsr{trial}.rec"
        w = create_container(path, keypair.public_wrap_key, {}, [audio_desc(0)])
        snapshot = None
        for i in range(n):
            w.append_chunk(0, [frame(0, i, i * 1_000_000, size=rng.randint(16, 200))])
            if i == k - 1:
                snapshot = w.ratchet_snapshot()
        w.finalize()
        assert snapshot_decrypt_attempts(path, snapshot, upto_index=k) == 0


def test_no_plaintext_windows_on_disk(tmp_path, keypair):
    path = tmp_path / "np.rec"
    payloads = [secrets.token_bytes(256) for _ in range(12)]
    w = create_container(path, keypair.public_wrap_key, {}, [audio_desc(0)])
    for i, p in enumerate(payloads):
        w.append_chunk(0, [MediaFrame(0, i, i * 1_000_000, p)])
    w.finalize()
    blob = path.read_bytes()
    for p in payloads:
        for off in range(0, len(p) - 16):
            assert p[off:off + 16] not in blob


# --- open ------------------------------------------------------------------------

def test_open_wrong_project_key(tmp_path, keypair, other_keypair):
    path = tmp_path / "wk.rec"
    write_chunks(path, keypair.public_wrap_key, 3)
    with pytest.raises(KeyMismatchError):
        open_container(path, other_keypair.private_unwrap_key)


def test_open_garbage_file(tmp_path, keypair):
    path = tmp_path / "g.rec"
    path.write_bytes(secrets.token_bytes(4096))
    with pytest.raises(FormatError):
        open_container(path, keypair.private_unwrap_key)


def test_open_garbage_with_valid_magic(tmp_path, keypair):
    path = tmp_path / "gm.rec"
    path.write_bytes(b"CUSCOREC" + struct.pack(">I", 512) + secrets.token_bytes(512))
    with pytest.raises(FormatError):
        open_container(path, keypair.private_unwrap_key)


def test_reader_raises_on_tampered_chunk(tmp_path, keypair):
    path = tmp_path / "rt2.rec"
    infos, _ = write_chunks(path, keypair.public_wrap_key, 3)
    blob = bytearray(path.read_bytes())
    mid = infos[1].offset + infos[1].record_len - 1
    blob[mid] ^= 0x01
    path.write_bytes(bytes(blob))
    r = open_container(path, keypair.private_unwrap_key)
    it = r.chunks()
    next(it)  # chunk 0 fine
    with pytest.raises(IntegrityError):
        next(it)


# --- verify -----------------------------------------------------------------------

def test_verify_pristine(tmp_path, keypair):
    path = tmp_path / "v.rec"
    write_chunks(path, keypair.public_wrap_key, 20)
    report = verify_container(path, keypair.private_unwrap_key)
    assert report.chunks_ok == 20
    assert report.tampered == []
    assert report.truncated_at is None
    assert report.footer_present
    assert report.clean


def test_verify_localizes_tampered_chunks(tmp_path, keypair):
    path = tmp_path / "vt.rec"
    infos, _ = write_chunks(path, keypair.public_wrap_key, 20)
    blob = bytearray(path.read_bytes())
    for idx in (3, 7):
        # Flip a byte inside the ciphertext region of chunk idx.
        off = infos[idx].offset + infos[idx].record_len - 2
        blob[off] ^= 0xFF
    path.write_bytes(bytes(blob))
    report = verify_container(path, keypair.private_unwrap_key)
    assert report.tampered == [3, 7]
    assert report.chunks_ok == 18


def test_verify_detects_metadata_tamper_exactly_one_chunk(tmp_path, keypair):
    path = tmp_path / "vm.rec"
    infos, _ = write_chunks(path, keypair.public_wrap_key, 6)
    # Flip one byte of chunk 2's bound metadata (timestamp field).
    blob = bytearray(path.read_bytes())
    t_start_off = infos[2].offset + 4 + 1 + 4 + 8 + 3
    blob[t_start_off] ^= 0x10
    path.write_bytes(bytes(blob))
    report = verify_container(path, keypair.private_unwrap_key)
    assert report.chunks_ok == 5
    assert len(report.tampered) == 1


def test_verify_truncation_mid_final_chunk(tmp_path, keypair):
    path = tmp_path / "vtr.rec"
    infos, _ = write_chunks(path, keypair.public_wrap_key, 20, finalize=False)
    cut = infos[19].offset + 5  # inside chunk 19's record
    blob = path.read_bytes()[:cut]
    path.write_bytes(blob)
    report = verify_container(path, keypair.private_unwrap_key)
    assert report.chunks_ok == 19
    assert report.truncated_at == infos[19].offset


def test_verify_every_single_byte_flip_detected(tmp_path, keypair):
    """Any one-byte change anywhere in the file must make verification
    non-clean (or fail to parse at all); a mutated file never reads clean."""
    path = tmp_path / "flip.rec"
    write_chunks(path, keypair.public_wrap_key, 4, payload_size=24)
    pristine = path.read_bytes()
    rng = random.Random(99)
    offsets = rng.sample(range(len(pristine)), 150)
    mutated_file = tmp_path / "flip_m.rec"
    for off in offsets:
        blob = bytearray(pristine)
        blob[off] ^= rng.randint(1, 255)
        mutated_file.write_bytes(bytes(blob))
        try:
            report = verify_container(mutated_file, keypair.private_unwrap_key)
            assert not report.clean, f"offset {off} mutated but verified clean"
        except (FormatError, KeyMismatchError):
            pass  # header damage: detected before any chunk is read


# --- recovery -----------------------------------------------------------------------

def test_recover_no_truncation_is_identity(tmp_path, keypair):
    path = tmp_path / "r0.rec"
    _, batches = write_chunks(path, keypair.public_wrap_key, 10)
    out = tmp_path / "r0out.rec"
    n = recover_truncated(path, keypair.private_unwrap_key, out)
    assert n == 10
    got = [frames for _, frames in open_container(out, keypair.private_unwrap_key).chunks()]
    assert got == batches
    assert verify_container(out, keypair.private_unwrap_key).clean


def test_recover_truncation_sweep(tmp_path, keypair):
    """Cut the file at every byte offset: recovery never crashes and yields
    exactly the chunks whose records are fully inside the kept prefix."""
    path = tmp_path / "sweep.rec"
    infos, _ = write_chunks(path, keypair.public_wrap_key, 10,
                            frames_per_chunk=1, payload_size=20)
    blob = path.read_bytes()
    _, _, first_record = read_header(path)
    ends = [i.offset + i.record_len for i in infos]
    cut_file = tmp_path / "cut.rec"
    for cut in range(len(blob) + 1):
        cut_file.write_bytes(blob[:cut])
        out = tmp_path / f"out{cut}.rec"
        if cut < first_record:
            with pytest.raises(FormatError):
                recover_truncated(cut_file, keypair.private_unwrap_key, out)
        else:
            expected = sum(1 for e in ends if e <= cut)
            n = recover_truncated(cut_file, keypair.private_unwrap_key, out)
            assert n == expected
            report = verify_container(out, keypair.private_unwrap_key)
            assert report.chunks_ok == expected and report.clean
            out.unlink()
        cut_file.unlink()


def test_recover_matches_verify_count_with_mid_file_damage(tmp_path, keypair):
    path = tmp_path / "rd.rec"
    infos, _ = write_chunks(path, keypair.public_wrap_key, 8)
    blob = bytearray(path.read_bytes())
    blob[infos[4].offset + infos[4].record_len - 3] ^= 0x55
    path.write_bytes(bytes(blob))
    report = verify_container(path, keypair.private_unwrap_key)
    out = tmp_path / "rdout.rec"
    n = recover_truncated(path, keypair.private_unwrap_key, out)
    assert n == report.chunks_ok == 7
    # Recovered container must itself verify clean and skip the bad index.
    assert verify_container(out, keypair.private_unwrap_key).clean
    indices = [i.global_index for i, _ in open_container(out, keypair.private_unwrap_key).chunks()]
    assert 4 not in indices


def test_chunk_params_roundtrip(tmp_path, keypair):
    path = tmp_path / "cp.rec"
    params = ChunkParams(max_chunk_bytes=4096, max_chunk_duration_ms=250)
    w = create_container(path, keypair.public_wrap_key, {}, [audio_desc(0)], params)
    w.finalize()
    header, _, _ = read_header(path)
    assert header.chunk_params == params
