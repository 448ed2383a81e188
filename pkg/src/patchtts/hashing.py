"""Deterministic integer mixing shared by the synthetic codec and seeding.

The mixer is a splitmix-style multiply-xor-shift finalizer. It is part of
the on-disk contract: golden token streams and derived seeds must be
reproducible across machines, so the constants here are fixed.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (int(x) + _GAMMA) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix(*parts: int) -> int:
    """Fold any number of integers into one 64-bit hash."""
    h = 0
    for p in parts:
        h = splitmix64(h ^ (int(p) & _MASK64))
    return h


def derive_seed(master: int, namespace: str) -> int:
    """Split a master seed into an independent per-subsystem seed.

    Namespaces used by the pipeline: "data", "init", "batches",
    "sampling" (plus call-site suffixes). Keeping the derivation in one
    place lets ablations isolate nondeterminism sources.
    """
    h = mix(master)
    for ch in namespace:
        h = splitmix64(h ^ ord(ch))
    return h
