"""Deterministic 64-bit seed derivation shared by all sampling code.

Python's builtin ``hash`` is salted per process, so every seed here goes
through splitmix64 / blake2b instead. Identical inputs give identical streams
on every platform and in every process.
"""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the splitmix64 finalizer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _component_u64(component: int | str | bytes) -> int:
    if isinstance(component, int):
        return component & _MASK64
    if isinstance(component, str):
        component = component.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(component, digest_size=8).digest(), "little")


def derive_u64(*components: int | str | bytes) -> int:
    """Mix any sequence of ints/strings/bytes into one 64-bit seed."""
    h = 0
    for component in components:
        h = splitmix64(h ^ _component_u64(component))
    return h
