"""Deterministic seed derivation: one base seed fans out to every stage."""

from __future__ import annotations

import hashlib


def derive_seed(base: int, *parts) -> int:
    """Hash the base seed and a label path into a 63-bit stage seed.

    Stable across processes and platforms, so reruns with the same base seed
    reproduce every random draw.
    """
    text = "|".join([str(int(base))] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
