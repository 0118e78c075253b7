"""Small shared helpers: seed derivation, hashing, deterministic JSON."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any


def derive_seed(base: int, *parts: str) -> int:
    """Derive a stable per-item seed from a base seed and string parts.

    Stable across processes and platforms (unlike ``hash()``), so any stage
    keyed by (base seed, item id) reproduces bit-identically.
    """
    payload = "|".join([str(int(base)), *parts]).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:4], "little")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def canonical_json(obj: Any) -> str:
    """JSON with sorted keys and no whitespace drift; safe to hash."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path: str | Path, obj: Any, indent: int = 2) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=indent) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))
