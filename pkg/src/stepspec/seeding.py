"""Deterministic seed and RNG substream derivation.

Substreams are keyed by arbitrary parts (names, seeds, indices), so results
never depend on call ordering, wall clock, or thread interleaving.
"""

from __future__ import annotations

import hashlib
from typing import Any

import numpy as np

_SEP = b"\x1f"


def _digest(parts: tuple[Any, ...]) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        raw = part if isinstance(part, bytes) else repr(part).encode("utf-8")
        h.update(raw)
        h.update(_SEP)
    return h.digest()


def derive_seed(*parts: Any) -> int:
    """Stable 64-bit seed from the given key parts."""
    return int.from_bytes(_digest(parts)[:8], "big")


def derive_rng(*parts: Any) -> np.random.Generator:
    """Private RNG substream for the given key parts."""
    return np.random.default_rng(int.from_bytes(_digest(parts), "big"))
