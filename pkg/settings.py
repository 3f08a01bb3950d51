"""
Runtime settings shared by every module: environment variables, the console and
seed derivation.

Environment variables
- WAFFLE_DATA_ROOT       dataset cache root (default ./data)
- WAFFLE_RUNS_ROOT       results root (default ./runs)
- WAFFLE_ALLOW_DOWNLOAD  "1" permits dataset auto-download (default "1")
- WAFFLE_GRID            grid file used by railway_start.py
- WAFFLE_WORKERS         parallel grid cells for railway_start.py (default 1)
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Optional

from rich.console import Console

from errors import ConfigError

CODE_VERSION = "0.3.0"
SCHEMA_VERSION = 1

# stderr keeps stdout clean for JSON printed by `verify` and `commitment`
console = Console(stderr=True)


def get_env(name: str, default: Optional[str] = None) -> str:
    v = os.getenv(name)
    if not v:
        if default is None:
            raise ConfigError(f"Missing environment variable: {name}")
        return default
    return v


def data_root() -> Path:
    return Path(get_env("WAFFLE_DATA_ROOT", "data"))


def runs_root() -> Path:
    return Path(get_env("WAFFLE_RUNS_ROOT", "runs"))


def allow_download() -> bool:
    return get_env("WAFFLE_ALLOW_DOWNLOAD", "1").strip().lower() in {"1", "true", "yes"}


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def digest_of(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def derive_seed(*parts: Any) -> int:
    """Derive an independent 63-bit seed from arbitrary (JSON-able) parts.

    Streams derived this way do not depend on call order, so serial, parallel and
    resumed executions draw identical randomness.
    """
    h = hashlib.sha256(canonical_json([str(p) for p in parts]).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)
