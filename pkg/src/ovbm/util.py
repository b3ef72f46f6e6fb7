"""Shared helpers: deterministic seeding, hashing, atomic file writes."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path


def derive_seed(root: int, *names: str) -> int:
    """Derive a named sub-seed from a run seed.

    All randomness in a run flows from one root seed; every consumer
    (split, init, shuffle, ...) gets its own stream keyed by name so
    adding a consumer never perturbs the others.
    """
    key = "/".join([str(int(root)), *names]).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj) -> str:
    """Hex digest of a canonical JSON rendering; embedded in artifacts."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
