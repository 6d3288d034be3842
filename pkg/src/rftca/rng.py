"""Deterministic random streams shared by every participant in a run.

All randomness in the package flows through counter-based Philox streams
keyed by ``(seed, tag)``.  Any party holding the seed can regenerate any
stream locally (no random state needs to travel over the wire), and a
stream is bit-reproducible regardless of how many other streams were
consumed before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "gaussian", "uniform"]


def _stream_key(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, tag: str) -> np.random.Generator:
    """Counter-based generator for ``(seed, tag)``; same pair, same stream."""
    return np.random.Generator(np.random.Philox(key=_stream_key(seed, tag)))


def uniform(seed: int, tag: str, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform [0, 1) samples of ``shape`` from the ``(seed, tag)`` stream."""
    return stream(seed, tag).random(int(np.prod(shape))).reshape(shape)


def gaussian(seed: int, tag: str, shape: tuple[int, ...], scale: float = 1.0) -> np.ndarray:
    """N(0, scale^2) samples via Box-Muller on the counter stream.

    Box-Muller is used instead of the generator's native normal sampler so
    the mapping from uniforms to normals is owned by this module and stays
    stable across platforms and library versions.
    """
    gen = stream(seed, tag)
    count = int(np.prod(shape))
    u1 = 1.0 - gen.random(count)  # (0, 1]: keeps log() finite
    u2 = gen.random(count)
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return (scale * z).reshape(shape)
