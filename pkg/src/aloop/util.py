"""Small shared helpers: stable seeding and atomic file writes."""

from __future__ import annotations

import json
import os
import zlib
from pathlib import Path


def stable_seed(*parts) -> int:
    """Deterministic 31-bit seed from arbitrary labels (process-independent)."""
    key = "|".join(str(p) for p in parts)
    return zlib.crc32(key.encode("utf-8")) & 0x7FFFFFFF


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a temp file + rename so readers never observe partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, json.dumps(obj, indent=1, sort_keys=True).encode("utf-8"))


def read_json(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
