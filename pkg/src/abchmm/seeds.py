"""Deterministic seed derivation for replicated experiments.

All randomness in a run flows from one master seed; replication seeds are
derived, never drawn, so reruns are bit-identical and cross-language ports
can reproduce the schedule.  The scheme is pinned by test vectors:

    label_hash = FNV-1a-64(label utf-8 bytes)
    seed_i     = splitmix64(splitmix64(master XOR label_hash) + i)   (mod 2^64)

where splitmix64 is the standard finaliser-style mixer (Steele et al.),
i.e. x += 0x9E3779B97F4A7C15 followed by two xor-multiply rounds.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One SplitMix64 step: advance by the golden-gamma and finalise."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def fnv1a64(s: str) -> int:
    h = 0xCBF29CE484222325
    for b in s.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & _MASK
    return h


def derive_seed(master: int, label: str, index: int = 0) -> int:
    """Replication seed for (master seed, study/cell label, replication index)."""
    base = splitmix64((int(master) & _MASK) ^ fnv1a64(label))
    return splitmix64((base + int(index)) & _MASK)
