"""Run manifests and content hashing for reproducibility checks."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def hash64(data: bytes) -> bytes:
    """8-byte content hash used as the trailing checksum in binary files."""
    return hashlib.sha256(data).digest()[:8]


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path) -> str:
    return sha256_hex(Path(path).read_bytes())


def write_manifest(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def manifest_path(artifact_path) -> Path:
    return Path(str(artifact_path) + ".manifest.json")
