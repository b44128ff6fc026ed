"""Project keypairs and session-key wrapping.

Each project gets one asymmetric keypair. Recording devices only ever
hold the public half: it is enough to create containers and seal chunks,
but can never decrypt anything. The private half stays off-device and is
required for open / verify / redact / export.

Wrapping is hybrid: an ephemeral X25519 exchange against the project
public key feeds HKDF, and the derived key seals the 32-byte session
root key with ChaCha20-Poly1305. Unwrapping with the wrong private key
fails authentication; no partial plaintext is ever returned.
"""

from __future__ import annotations

import json
import os
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

from cusco.errors import FormatError, KeyMismatchError

KEY_LEN = 32
_WRAP_INFO = b"CUSCO.wrap.v1"
_WRAP_NONCE = bytes(12)  # wrap key is single-use, fixed nonce is safe


@dataclass(frozen=True)
class ProjectKeypair:
    """Raw 32-byte X25519 key halves plus project identity."""

    project_id: uuid.UUID
    public_wrap_key: bytes
    private_unwrap_key: bytes
    created_at: datetime


def generate_project_keys(project_id: uuid.UUID) -> ProjectKeypair:
    """Generate a fresh keypair for a project from OS randomness."""
    priv = X25519PrivateKey.generate()
    return ProjectKeypair(
        project_id=project_id,
        public_wrap_key=priv.public_key().public_bytes(
            Encoding.Raw, PublicFormat.Raw
        ),
        private_unwrap_key=priv.private_bytes(
            Encoding.Raw, PrivateFormat.Raw, NoEncryption()
        ),
        created_at=datetime.now(timezone.utc),
    )


def _derive_wrap_key(shared: bytes, eph_pub: bytes, recipient_pub: bytes) -> bytes:
    return HKDF(
        algorithm=SHA256(),
        length=KEY_LEN,
        salt=None,
        info=_WRAP_INFO + eph_pub + recipient_pub,
    ).derive(shared)


def wrap_key(public_wrap_key: bytes, payload: bytes) -> bytes:
    """Seal payload to a project public key.

    Returns ephemeral_pub(32) || ciphertext+tag.
    """
    if len(public_wrap_key) != KEY_LEN:
        raise FormatError("public wrap key must be 32 raw bytes")
    recipient = X25519PublicKey.from_public_bytes(public_wrap_key)
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    key = _derive_wrap_key(eph.exchange(recipient), eph_pub, public_wrap_key)
    sealed = ChaCha20Poly1305(key).encrypt(_WRAP_NONCE, payload, eph_pub)
    return eph_pub + sealed


def unwrap_key(private_unwrap_key: bytes, wrapped: bytes) -> bytes:
    """Recover a wrapped payload; raises KeyMismatchError on the wrong key."""
    if len(private_unwrap_key) != KEY_LEN:
        raise FormatError("private unwrap key must be 32 raw bytes")
    if len(wrapped) < KEY_LEN + 16:
        raise FormatError("wrapped key blob too short")
    eph_pub, sealed = wrapped[:KEY_LEN], wrapped[KEY_LEN:]
    priv = X25519PrivateKey.from_private_bytes(private_unwrap_key)
    recipient_pub = priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    key = _derive_wrap_key(shared, eph_pub, recipient_pub)
    try:
        return ChaCha20Poly1305(key).decrypt(_WRAP_NONCE, sealed, eph_pub)
    except InvalidTag:
        raise KeyMismatchError(
            "wrapped session key does not unwrap with this private key"
        ) from None


# --- key files -------------------------------------------------------------
#
# Small JSON documents so operators can inspect them; the private file is
# written owner-only.

def save_public_key(kp: ProjectKeypair, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(
            {
                "cusco_key": "public",
                "project_id": str(kp.project_id),
                "created_at": kp.created_at.isoformat(),
                "key_hex": kp.public_wrap_key.hex(),
            },
            indent=2,
        )
        + "\n"
    )


def save_private_key(kp: ProjectKeypair, path: str | Path) -> None:
    path = Path(path)
    data = (
        json.dumps(
            {
                "cusco_key": "private",
                "project_id": str(kp.project_id),
                "created_at": kp.created_at.isoformat(),
                "key_hex": kp.private_unwrap_key.hex(),
            },
            indent=2,
        )
        + "\n"
    )
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    try:
        os.write(fd, data.encode())
    finally:
        os.close(fd)


def load_key_file(path: str | Path, expect: str) -> tuple[uuid.UUID, bytes]:
    """Load a key file; expect is "public" or "private"."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read key file {path}: {exc}") from exc
    if doc.get("cusco_key") != expect:
        raise FormatError(f"{path} is not a {expect} key file")
    try:
        key = bytes.fromhex(doc["key_hex"])
        project_id = uuid.UUID(doc["project_id"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed key file {path}: {exc}") from exc
    if len(key) != KEY_LEN:
        raise FormatError(f"{path}: key must be {KEY_LEN} bytes")
    return project_id, key
