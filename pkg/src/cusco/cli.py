"""Operator command line.

Covers the full lifecycle without the browser panel: key generation,
device probing, headless scripted recording, daemon control, container
verification and inspection, redaction, export, and feature extraction.

Exit codes: 0 success, 1 operation failure (tamper found, verification
failed, API unreachable), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
import uuid
from pathlib import Path

from cusco import __version__
from cusco.errors import ConfigError, CuscoError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

PRIVATE_KEY_WARNING = (
    "WARNING: the private key decrypts every recording of this project.\n"
    "Keep it OFF recording devices; store it with the study's data custodian."
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cusco",
        description="secure multi-modal conversation recorder",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a project keypair")
    p.add_argument("--project", help="project UUID (random if omitted)")
    p.add_argument("--out-dir", required=True, help="directory for key files")

    p = sub.add_parser("probe", help="check configured capture sources")
    p.add_argument("--config", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("serve", help="run the recording daemon")
    p.add_argument("--config", required=True)

    p = sub.add_parser("status", help="query a running daemon")
    p.add_argument("--api", required=True, help="base URL, e.g. http://host:7300")
    p.add_argument("--token", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("record", help="run a headless scripted session")
    p.add_argument("--config", required=True)
    p.add_argument("--script", required=True,
                   help="JSON script of timed lifecycle steps")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("verify", help="verify container integrity")
    p.add_argument("--in", dest="path", required=True)
    p.add_argument("--key", required=True, help="project private key file")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("inspect", help="decrypt and summarize a container")
    p.add_argument("--in", dest="path", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("recover", help="salvage complete chunks from a damaged container")
    p.add_argument("--in", dest="path", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("redact", help="apply a redaction list")
    p.add_argument("--in", dest="path", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--list", dest="rlist", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("verify-redactions", help="verify redactions against a list")
    p.add_argument("--in", dest="path", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--list", dest="rlist", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("export", help="export verified plaintext media")
    p.add_argument("--in", dest="path", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--list", dest="rlist")
    p.add_argument("--attest-no-redactions", action="store_true")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("features", help="extract anonymized features")
    p.add_argument("--in", dest="path", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-ms", type=int, default=500)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--json", action="store_true")

    return parser


def _load_private(path: str) -> bytes:
    from cusco.keys import load_key_file

    _, key = load_key_file(path, "private")
    return key


def _emit(doc: dict, as_json: bool, text_lines: list[str]) -> None:
    if as_json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        for line in text_lines:
            print(line)


def cmd_keygen(args) -> int:
    from cusco.keys import generate_project_keys, save_private_key, save_public_key

    project_id = uuid.UUID(args.project) if args.project else uuid.uuid4()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kp = generate_project_keys(project_id)
    pub = out_dir / f"{project_id}.pub"
    priv = out_dir / f"{project_id}.sk"
    save_public_key(kp, pub)
    save_private_key(kp, priv)
    print(f"project: {project_id}")
    print(f"public key:  {pub}")
    print(f"private key: {priv} (mode 0600)")
    print(PRIVATE_KEY_WARNING, file=sys.stderr)
    return EXIT_OK


def cmd_probe(args) -> int:
    from cusco.config import load_config
    from cusco.streams import probe_sources

    config = load_config(args.config)
    statuses = probe_sources(config.streams)
    doc = {"statuses": [
        {"stream_id": s.stream_id, "state": s.state, "detail": s.detail}
        for s in statuses
    ]}
    _emit(doc, args.json, [
        f"stream {s.stream_id}: {s.state}  ({s.detail})" for s in statuses
    ])
    return EXIT_OK if all(s.state == "present" for s in statuses) else EXIT_FAILURE


def cmd_serve(args) -> int:
    from cusco.config import load_config
    from cusco.daemon import serve
    from cusco.errors import FormatError

    config = load_config(args.config)
    try:
        return serve(config)
    except FormatError as exc:
        # bad key file is a configuration problem, not a runtime one
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(
            f"fatal: cannot serve on {config.api_listen_address} "
            f"/ {config.listen_address}: {exc}",
            file=sys.stderr,
        )
        return 3


def cmd_status(args) -> int:
    import httpx

    url = args.api.rstrip("/") + "/v1/status"
    try:
        resp = httpx.get(url, headers={"Authorization": f"Bearer {args.token}"},
                         timeout=5.0)
    except httpx.HTTPError as exc:
        print(f"cannot reach daemon: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    if resp.status_code != 200:
        print(f"daemon returned {resp.status_code}: {resp.text}", file=sys.stderr)
        return EXIT_FAILURE
    doc = resp.json()
    _emit(doc, args.json, [
        f"state: {doc['state']}",
        f"device: {doc['device_id']} ({doc['role']})",
        "streams: " + ", ".join(
            f"{s['stream_id']}={s['status']}/{s['chunks']}ck"
            for s in doc["streams"]
        ),
    ])
    return EXIT_OK


def _private_key_on_device(config) -> Path | None:
    """Recording devices must never hold decryption capability."""
    candidates = set()
    pub = Path(config.project_public_key_path)
    candidates.add(pub.with_suffix(".sk"))
    for directory in (pub.parent, Path(config.output_dir)):
        if directory.is_dir():
            candidates.update(directory.glob("*.sk"))
    for candidate in sorted(candidates):
        if candidate.exists():
            return candidate
    return None


def cmd_record(args) -> int:
    from cusco.clock import SimulatedClock
    from cusco.config import load_config
    from cusco.container import verify_container
    from cusco.keys import load_key_file
    from cusco.session import Actor, Session, SessionConfig, SessionState

    config = load_config(args.config)
    offender = _private_key_on_device(config)
    if offender is not None:
        print(
            f"refusing to record: project private key present on device "
            f"({offender}); move it off this machine first",
            file=sys.stderr,
        )
        return EXIT_USAGE
    try:
        script = json.loads(Path(args.script).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read script {args.script}: {exc}") from exc
    if not isinstance(script, list):
        raise ConfigError("script must be a JSON array of steps")

    _, pub = load_key_file(config.project_public_key_path, "public")
    clock = SimulatedClock()
    session = Session(
        SessionConfig(
            session_id=uuid.uuid4(),
            project_id=uuid.uuid4(),
            public_wrap_key=pub,
            output_dir=Path(config.output_dir),
            streams=list(config.streams),
            chunk_params=config.chunk_params,
            override_absent=config.override_absent,
            features_only=config.features_only,
            vad_source_stream_id=(config.vad.source_stream_id
                                  if config.vad else None),
        ),
        clock=clock,
    )
    for i, step in enumerate(script):
        if not isinstance(step, dict) or "action" not in step:
            raise ConfigError(f"script step {i}: expected an object with 'action'")
        at_ns = int(float(step.get("at_s", 0)) * 1e9)
        clock.advance_to(at_ns)
        session.advance_to(at_ns)
        action = step["action"]
        actor = Actor(step.get("actor", "researcher"))
        if action == "consent_participant":
            session.record_consent_participant(
                step.get("participant_code", "P00"),
                step.get("pis_version", "unversioned"),
            )
        elif action == "consent_witness":
            session.record_consent_witness(
                step.get("witness_code", "W00"),
                step.get("attests", {
                    "understood_pis": True,
                    "questions_answered": True,
                    "no_deception": True,
                }),
            )
        elif action in ("start", "pause", "resume", "stop"):
            getattr(session, action)(actor)
        else:
            raise ConfigError(f"script step {i}: unknown action {action!r}")
    if session.state not in (SessionState.STOPPED, SessionState.IDLE,
                             SessionState.CONSENT_PENDING, SessionState.READY):
        session.stop(Actor.SYSTEM)

    doc = session.status()
    _emit(doc, args.json, [
        f"session {doc['session_id']}: {doc['state']}",
        f"container: {doc['container']}",
        f"media chunks: {doc['media_chunks']}, events: {doc['events']}",
    ])
    return EXIT_OK


def cmd_verify(args) -> int:
    from cusco.container import verify_container

    report = verify_container(args.path, _load_private(args.key))
    doc = report.to_dict()
    _emit(doc, args.json, [
        f"chunks ok: {report.chunks_ok}",
        f"tampered: {report.tampered or 'none'}",
        f"truncated at: {report.truncated_at if report.truncated_at is not None else 'no'}",
        f"result: {'CLEAN' if report.clean else 'DAMAGED'}",
    ])
    return EXIT_OK if report.clean else EXIT_FAILURE


def cmd_inspect(args) -> int:
    from cusco.container import open_container
    from cusco.session import decode_meta_log

    reader = open_container(args.path, _load_private(args.key))
    counts: dict[int, int] = {}
    spans: dict[int, tuple[int, int]] = {}
    for info, frames in reader.chunks():
        counts[info.stream_id] = counts.get(info.stream_id, 0) + 1
        lo, hi = spans.get(info.stream_id, (info.t_start_ns, info.t_end_ns))
        spans[info.stream_id] = (min(lo, info.t_start_ns), max(hi, info.t_end_ns))
    events, consent = decode_meta_log(reader)
    header = reader.header
    doc = {
        "project_id": str(header.project_id),
        "session_id": str(header.session_id),
        "created_at": header.created_at.isoformat(),
        "streams": [
            {**s.to_dict(), "chunks": counts.get(s.stream_id, 0),
             "span_ns": list(spans.get(s.stream_id, (0, 0)))}
            for s in header.stream_table
        ],
        "events": events,
        "consent": consent,
    }
    _emit(doc, args.json, [
        f"session {doc['session_id']} (project {doc['project_id']})",
        "streams: " + ", ".join(
            f"{s['stream_id']}:{s['kind']}x{s['chunks']}" for s in doc["streams"]
        ),
        f"events: {[e['action'] for e in events]}",
        f"consent: {'complete' if consent else 'absent'}",
    ])
    return EXIT_OK


def cmd_recover(args) -> int:
    from cusco.container import recover_truncated

    n = recover_truncated(args.path, _load_private(args.key), args.out)
    _emit({"recovered_chunks": n, "out": args.out}, args.json,
          [f"recovered {n} chunks into {args.out}"])
    return EXIT_OK


def _derive_public(private_key: bytes) -> bytes:
    from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey
    from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

    return X25519PrivateKey.from_private_bytes(private_key).public_key() \
        .public_bytes(Encoding.Raw, PublicFormat.Raw)


def cmd_redact(args) -> int:
    from cusco.redact import RedactionList, apply_redactions

    priv = _load_private(args.key)
    rlist = RedactionList.load(args.rlist)
    report = apply_redactions(args.path, priv, rlist, args.out,
                              _derive_public(priv))
    doc = report.to_dict()
    _emit(doc, args.json, [
        f"entries: {len(report.entries)}",
        f"verification: {'PASS' if report.overall_pass else 'FAIL'}",
    ])
    return EXIT_OK if report.overall_pass else EXIT_FAILURE


def cmd_verify_redactions(args) -> int:
    from cusco.redact import RedactionList, verify_redactions

    report = verify_redactions(args.path, _load_private(args.key),
                               RedactionList.load(args.rlist))
    doc = report.to_dict()
    _emit(doc, args.json, [
        f"entries: {len(report.entries)}",
        f"verification: {'PASS' if report.overall_pass else 'FAIL'}",
    ])
    return EXIT_OK if report.overall_pass else EXIT_FAILURE


def cmd_export(args) -> int:
    from cusco.redact import RedactionList, export_plain

    rlist = RedactionList.load(args.rlist) if args.rlist else None
    manifest = export_plain(
        args.path, _load_private(args.key), args.out, rlist,
        attest_no_redactions=args.attest_no_redactions,
    )
    _emit(manifest, args.json, [
        f"exported {len(manifest['streams'])} streams to {args.out}",
        *(f"  {s['file']}  sha256={s['sha256'][:16]}..." for s in manifest["streams"]),
    ])
    return EXIT_OK


def cmd_features(args) -> int:
    from cusco.anonymize import extract_container_features

    summary = extract_container_features(
        args.path, _load_private(args.key), args.out,
        window_ms=args.window_ms, motion_grid=args.grid,
    )
    _emit(summary, args.json, [
        *(f"{s['file']}: {s['feature_bytes']} bytes "
          f"({100 * s['ratio']:.2f}% of media)" for s in summary["streams"]),
        f"pause stats: {summary.get('pause_stats', 'n/a')}",
    ])
    return EXIT_OK


COMMANDS = {
    "keygen": cmd_keygen,
    "probe": cmd_probe,
    "serve": cmd_serve,
    "status": cmd_status,
    "record": cmd_record,
    "verify": cmd_verify,
    "inspect": cmd_inspect,
    "recover": cmd_recover,
    "redact": cmd_redact,
    "verify-redactions": cmd_verify_redactions,
    "export": cmd_export,
    "features": cmd_features,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CuscoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
