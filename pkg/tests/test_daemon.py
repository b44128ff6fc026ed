"""Config validation, API auth and lifecycle, route-table security audit."""

import json
import time

import pytest
from fastapi.testclient import TestClient

from cusco.config import (
    ENV_API_TOKEN,
    example_config,
    load_config,
    parse_config,
)
from cusco.container import verify_container
from cusco.daemon import Daemon, build_app
from cusco.errors import ConfigError
from cusco.keys import save_public_key

TOKEN = "test-token-1"


def write_config(tmp_path, keypair, **overrides):
    doc = example_config()
    doc["api_token"] = TOKEN
    doc["output_dir"] = "recordings"
    doc["project_public_key_path"] = "project.pub"
    doc["chunk_params"] = {"max_chunk_bytes": 1 << 20,
                           "max_chunk_duration_ms": 100}
    doc.update(overrides)
    save_public_key(keypair, tmp_path / "project.pub")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


@pytest.fixture
def client(tmp_path, keypair):
    config = load_config(write_config(tmp_path, keypair))
    daemon = Daemon(config)
    app = build_app(daemon)
    with TestClient(app) as c:
        c.daemon = daemon
        yield c


def auth(token=TOKEN):
    return {"Authorization": f"Bearer {token}"}


# --- config validation ------------------------------------------------------------

def test_example_config_parses(tmp_path, keypair):
    config = load_config(write_config(tmp_path, keypair))
    assert config.role == "leader"
    assert len(config.streams) == 2
    assert config.vad.source_stream_id == 1


def test_config_missing_field_names_path():
    doc = example_config()
    del doc["api_token"]
    with pytest.raises(ConfigError, match="api_token: required"):
        parse_config(doc)


def test_config_bad_stream_names_index():
    doc = example_config()
    doc["streams"][1]["audio"]["sample_rate_hz"] = -1
    with pytest.raises(ConfigError, match=r"streams\[1\]"):
        parse_config(doc)


def test_config_follower_requires_leader_address():
    doc = example_config()
    doc["role"] = "follower"
    doc.pop("leader_address", None)
    with pytest.raises(ConfigError, match="leader_address: required"):
        parse_config(doc)


def test_config_empty_token_rejected():
    doc = example_config()
    doc["api_token"] = ""
    with pytest.raises(ConfigError, match="api_token"):
        parse_config(doc)


def test_config_bad_address_rejected():
    doc = example_config()
    doc["api_listen_address"] = "nonsense"
    with pytest.raises(ConfigError, match="api_listen_address"):
        parse_config(doc)


def test_config_env_token_override(monkeypatch):
    doc = example_config()
    monkeypatch.setenv(ENV_API_TOKEN, "from-env")
    config = parse_config(doc)
    assert config.api_token == "from-env"


def test_config_vad_source_must_exist():
    doc = example_config()
    doc["vad"]["source_stream_id"] = 9
    with pytest.raises(ConfigError, match="vad.source_stream_id"):
        parse_config(doc)


# --- auth -----------------------------------------------------------------------------

def test_status_requires_token(client):
    assert client.get("/v1/status").status_code == 401
    assert client.get("/v1/status", headers=auth("wrong")).status_code == 401


def test_bad_token_causes_no_state_change(client):
    client.post("/v1/session", headers=auth())
    resp = client.post("/v1/session/start", headers=auth("nope"),
                       json={"actor": "researcher"})
    assert resp.status_code == 401
    status = client.get("/v1/status", headers=auth()).json()
    assert status["state"] == "Idle"


def test_unknown_path_404(client):
    assert client.get("/v1/nope", headers=auth()).status_code == 404


# --- lifecycle over the API --------------------------------------------------------------

def test_start_before_any_consent(client):
    client.post("/v1/session", headers=auth())
    resp = client.post("/v1/session/start", headers=auth(),
                       json={"actor": "researcher"})
    assert resp.status_code == 409
    assert resp.json() == {"error": "consent_incomplete", "missing": "participant"}


def test_start_before_witness_consent(client):
    client.post("/v1/session", headers=auth())
    client.post("/v1/session/consent", headers=auth(),
                json={"role": "participant", "participant_code": "P01",
                      "pis_version": "1.0"})
    resp = client.post("/v1/session/start", headers=auth(),
                       json={"actor": "researcher"})
    assert resp.status_code == 409
    assert resp.json() == {"error": "consent_incomplete", "missing": "witness"}


def test_witness_consent_without_participant_409(client):
    client.post("/v1/session", headers=auth())
    resp = client.post("/v1/session/consent", headers=auth(),
                       json={"role": "witness", "witness_code": "W01",
                             "attests": {"understood_pis": True,
                                         "questions_answered": True,
                                         "no_deception": True}})
    assert resp.status_code == 409
    assert resp.json()["error"] == "consent_rejected"


def run_consent(client):
    client.post("/v1/session", headers=auth())
    client.post("/v1/session/consent", headers=auth(),
                json={"role": "participant", "participant_code": "P01",
                      "pis_version": "1.0"})
    client.post("/v1/session/consent", headers=auth(),
                json={"role": "witness", "witness_code": "W01",
                      "attests": {"understood_pis": True,
                                  "questions_answered": True,
                                  "no_deception": True}})


def test_full_api_lifecycle(client, keypair):
    run_consent(client)
    resp = client.post("/v1/session/start", headers=auth(),
                       json={"actor": "researcher"})
    assert resp.status_code == 200
    assert resp.json()["state"] == "Recording"

    time.sleep(0.35)
    status = client.get("/v1/status", headers=auth()).json()
    assert status["state"] == "Recording"

    resp = client.post("/v1/session/pause", headers=auth(),
                       json={"actor": "witness"})
    assert resp.status_code == 200
    assert client.get("/v1/status", headers=auth()).json()["state"] == "Paused"

    resp = client.post("/v1/session/resume", headers=auth(),
                       json={"actor": "researcher"})
    assert resp.status_code == 200
    time.sleep(0.15)
    resp = client.post("/v1/session/stop", headers=auth(), json={})
    assert resp.status_code == 200
    assert client.get("/v1/status", headers=auth()).json()["state"] == "Stopped"

    container = client.daemon.session.config.container_path
    report = verify_container(container, keypair.private_unwrap_key)
    assert report.clean and report.chunks_ok > 0


def test_pause_while_idle_is_409_with_reason(client):
    client.post("/v1/session", headers=auth())
    resp = client.post("/v1/session/pause", headers=auth(),
                       json={"actor": "witness"})
    assert resp.status_code == 409
    body = resp.json()
    assert body["error"] == "illegal_transition"
    assert "reason" in body


def test_bad_actor_422(client):
    client.post("/v1/session", headers=auth())
    resp = client.post("/v1/session/start", headers=auth(),
                       json={"actor": "intruder"})
    assert resp.status_code == 422


def test_consent_bad_role_422(client):
    client.post("/v1/session", headers=auth())
    resp = client.post("/v1/session/consent", headers=auth(),
                       json={"role": "bystander"})
    assert resp.status_code == 422


def test_second_session_while_active_409(client):
    run_consent(client)
    client.post("/v1/session/start", headers=auth(), json={})
    resp = client.post("/v1/session", headers=auth())
    assert resp.status_code == 409
    client.post("/v1/session/stop", headers=auth(), json={})
    assert client.post("/v1/session", headers=auth()).status_code == 200


def test_streams_and_peers_endpoints(client):
    streams = client.get("/v1/streams", headers=auth()).json()["streams"]
    assert [s["status"] for s in streams] == ["present", "present"]
    peers = client.get("/v1/peers", headers=auth()).json()["peers"]
    assert peers == []  # coordination not started in API-only tests


def test_status_polling_is_side_effect_free(client):
    run_consent(client)
    client.post("/v1/session/start", headers=auth(), json={})
    snaps = [client.get("/v1/status", headers=auth()).json() for _ in range(5)]
    assert all(s["state"] == "Recording" for s in snaps)
    counts = [sum(st["chunks"] for st in s["streams"]) for s in snaps]
    assert counts == sorted(counts)  # monotone, never reset by a read
    client.post("/v1/session/stop", headers=auth(), json={})


# --- security audit ------------------------------------------------------------------------

EXPECTED_ROUTES = {
    ("GET", "/v1/status"),
    ("GET", "/v1/streams"),
    ("GET", "/v1/peers"),
    ("POST", "/v1/session"),
    ("POST", "/v1/session/consent"),
    ("POST", "/v1/session/start"),
    ("POST", "/v1/session/pause"),
    ("POST", "/v1/session/resume"),
    ("POST", "/v1/session/stop"),
}


def test_route_table_exposes_no_media_or_keys(client):
    routes = set()
    for route in client.app.routes:
        methods = getattr(route, "methods", None)
        if not methods:
            continue
        for m in methods - {"HEAD", "OPTIONS"}:
            routes.add((m, route.path))
    assert routes == EXPECTED_ROUTES
    for _, path in routes:
        assert "media" not in path and "key" not in path and "chunk" not in path


def test_status_payload_contains_no_key_material(client, keypair):
    run_consent(client)
    client.post("/v1/session/start", headers=auth(), json={})
    body = client.get("/v1/status", headers=auth()).text
    client.post("/v1/session/stop", headers=auth(), json={})
    assert keypair.public_wrap_key.hex() not in body
    assert keypair.private_unwrap_key.hex() not in body
