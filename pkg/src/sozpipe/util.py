"""Small shared helpers: deterministic sub-seeding, canonical JSON, CSV floats."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def child_seed(*parts) -> int:
    """Derive a deterministic 63-bit seed from any hashable parts.

    sha256 keeps the derivation platform independent, unlike Python's
    builtin hash which is salted per process.
    """
    blob = json.dumps([str(p) for p in parts]).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1


def canonical_json(obj) -> str:
    """Stable serialization used for config fingerprints and on-disk configs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:12]


def fmt_float(x) -> str:
    """Shortest round-trip decimal form, used everywhere a float lands in CSV."""
    return repr(float(x))


def require_finite(name: str, arr: np.ndarray) -> None:
    from .errors import NumericalError

    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains NaN or Inf")
