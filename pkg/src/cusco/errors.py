"""Exception hierarchy shared across the recorder."""


class CuscoError(Exception):
    """Base class for all recorder errors that reach operators."""


class ConfigError(CuscoError):
    """Invalid configuration or stream descriptor."""


class FormatError(CuscoError):
    """Container bytes are not a readable recording (bad magic, version,
    header framing)."""


class KeyMismatchError(CuscoError):
    """The supplied private key cannot unwrap this container's session key.

    Distinct from :class:`IntegrityError` so callers can tell "wrong key"
    apart from "damaged file"."""


class IntegrityError(CuscoError):
    """A sealed chunk failed authentication."""


class ChunkOrderError(CuscoError):
    """A frame batch regressed in time relative to the stream's last chunk."""


class TransitionError(CuscoError):
    """Illegal session state transition."""


class ConsentError(TransitionError):
    """Consent record rejected (ordering or attestation failure)."""


class SourceError(CuscoError):
    """A capture source is absent or failed mid-run."""


class SyncError(CuscoError):
    """Clock synchronisation failed (timeout or no usable round)."""


class ScheduleError(CuscoError):
    """Coordinated action refused (stale peer sync, unknown peer)."""


class RedactionError(CuscoError):
    """Redaction list invalid or inapplicable to this container."""


class ExportRefusedError(CuscoError):
    """Plaintext export blocked: redaction verification missing or failed."""
