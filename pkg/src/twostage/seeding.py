"""Deterministic seed derivation shared by the runner and the sweep layer."""

from __future__ import annotations

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 scrambling step (public-domain constants)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64


def derive_seed(*parts: int) -> int:
    """Hash integer parts into one 63-bit seed (nonnegative, numpy-safe)."""
    acc = 0x243F6A8885A308D3
    for p in parts:
        acc = splitmix64((acc ^ (int(p) & MASK64)) & MASK64)
    return acc >> 1
