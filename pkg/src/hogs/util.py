"""Shared plumbing: worker-count control, hashing, deterministic JSON."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numba

THREADS_ENV = "HOGS_THREADS"


def num_threads() -> int:
    """Worker count for parallel kernels.

    HOGS_THREADS is a cap: the effective count is min(cap, threads numba can
    actually launch). Unset or invalid values fall back to the numba default.
    """
    limit = numba.config.NUMBA_NUM_THREADS
    raw = os.environ.get(THREADS_ENV, "")
    try:
        requested = int(raw)
    except ValueError:
        return limit
    if requested < 1:
        return limit
    return min(requested, limit)


def apply_thread_cap() -> int:
    n = num_threads()
    numba.set_num_threads(n)
    return n


def dumps_canonical(obj) -> str:
    """JSON with sorted keys and stable float repr; safe to byte-compare."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(dumps_canonical(obj))


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_header_block(path: str | Path, header: dict, payload: bytes) -> None:
    """Single-file container: 8-byte LE header length, JSON header, raw payload."""
    head = dumps_canonical(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(head).to_bytes(8, "little"))
        f.write(head)
        f.write(payload)


def read_header_block(path: str | Path) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        n = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(n).decode("utf-8"))
        payload = f.read()
    return header, payload
