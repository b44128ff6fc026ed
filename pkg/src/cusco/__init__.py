"""Secure multi-modal conversation recorder.

Recordings are sealed chunk-by-chunk into an append-only encrypted
container that only the holder of the project private key can open.
Capture is consent-gated, multi-device deployments coordinate over a
LAN link, and post-hoc tooling covers redaction, verification and
non-invertible feature extraction.
"""

__version__ = "0.1.0"

from cusco.errors import (
    ConfigError,
    CuscoError,
    FormatError,
    IntegrityError,
    KeyMismatchError,
)
from cusco.keys import ProjectKeypair, generate_project_keys

__all__ = [
    "ConfigError",
    "CuscoError",
    "FormatError",
    "IntegrityError",
    "KeyMismatchError",
    "ProjectKeypair",
    "generate_project_keys",
    "__version__",
]
