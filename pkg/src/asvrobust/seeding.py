"""Deterministic seed derivation for independent RNG streams."""

import hashlib


def derive_seed(*parts) -> int:
    """Map a tuple of labels to a stable 63-bit seed.

    Distinct label tuples give statistically independent streams. Parts
    are hashed by repr, so the mapping is stable across processes and
    platforms (unlike the builtin hash).
    """
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little") >> 1
