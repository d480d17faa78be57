"""Deterministic, platform-stable random streams.

Everything random in this package flows through numpy's PCG64 seeded from a
SeedSequence whose entropy mixes the experiment seed with SHA-256 digests of
string labels. PCG64 bit streams are stable across numpy releases and
platforms, so identical seeds reproduce identical corpora, models, reports
and transcripts byte for byte.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def string_key(text: str) -> int:
    """Stable 64-bit key for a string (low 8 bytes of its SHA-256)."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _entropy(parts) -> list[int]:
    out = []
    for part in parts:
        if isinstance(part, str):
            out.append(string_key(part))
        elif isinstance(part, (int, np.integer)):
            out.append(int(part) & _MASK64)
        else:
            raise TypeError(f"seed part must be int or str, got {type(part)!r}")
    return out


def seed_sequence(*parts: int | str) -> np.random.SeedSequence:
    return np.random.SeedSequence(_entropy(parts))


def generator(*parts: int | str) -> np.random.Generator:
    """One independent PCG64 stream per distinct part tuple."""
    return np.random.Generator(np.random.PCG64(seed_sequence(*parts)))


def spawn_generators(n: int, *parts: int | str) -> list[np.random.Generator]:
    """n independent child streams, stable in (parts, index)."""
    children = seed_sequence(*parts).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def derive_seed(*parts: int | str) -> int:
    """Collapse parts to a single 63-bit integer seed."""
    return int(seed_sequence(*parts).generate_state(1, np.uint64)[0]) >> 1
