"""
Digest-checked binary container used for watermark sets and model checkpoints.

File layout:
    WAFFLE1\\n
    <header JSON, one line>\\n
    <raw payload bytes>

The header carries a "digest" field (SHA-256 hex). What the digest covers is
decided by the caller through `digest_fn`; on load it is recomputed and must match.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Callable, Dict, Tuple

from errors import ConfigError, TamperError

MAGIC = b"WAFFLE1\n"


def write_container(path: str | Path, header: Dict[str, Any], payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(payload)
    os.replace(tmp, path)


def read_container(
    path: str | Path,
    digest_fn: Callable[[Dict[str, Any], bytes], str],
) -> Tuple[Dict[str, Any], bytes]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"File not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise TamperError(f"{path} is not a WAFFLE container")
    rest = raw[len(MAGIC):]
    newline = rest.find(b"\n")
    if newline < 0:
        raise TamperError(f"{path} has a truncated header")
    try:
        header = json.loads(rest[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TamperError(f"{path} has a corrupt header: {e}") from e
    payload = rest[newline + 1:]
    stored = header.get("digest")
    actual = digest_fn(header, payload)
    if stored != actual:
        raise TamperError(f"Digest mismatch for {path}: stored {stored}, computed {actual}")
    return header, payload
