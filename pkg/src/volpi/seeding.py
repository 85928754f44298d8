"""Stable seed derivation (process-independent, unlike built-in hash)."""

from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Mix ints/strings into a nonnegative 63-bit seed, reproducibly."""
    key = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF
