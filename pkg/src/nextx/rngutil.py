"""Deterministic stream derivation for seeded randomness.

All stochastic paths in the package draw from explicit ``torch.Generator``
objects. Child streams are derived by hashing (seed, role) through
splitmix64, so streams never overlap and derivation order is irrelevant.
"""

from __future__ import annotations

import torch

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, role: int | str) -> int:
    """A 63-bit child seed for (seed, role); role may be an index or a tag."""
    if isinstance(role, str):
        role_int = 0
        for byte in role.encode("utf-8"):
            role_int = splitmix64(role_int ^ byte)
    else:
        role_int = splitmix64(role & _MASK64)
    return splitmix64((seed & _MASK64) ^ role_int) >> 1


def derive_generator(seed: int, role: int | str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, role))
    return gen


def draw_seed(rng: torch.Generator) -> int:
    """Consume one value from ``rng`` and return it as a 63-bit master seed."""
    return int(torch.randint(0, 1 << 62, (1,), generator=rng).item())
