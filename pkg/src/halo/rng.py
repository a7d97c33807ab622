"""Seeded random streams with labelled sub-stream derivation.

Uniforms come from numpy's PCG64 bit generator, whose output is fixed across
platforms for a given seed sequence. Normals are produced from those uniforms
by Box-Muller so that no platform-specific sampling path is involved.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]


class SeededRng:
    """A deterministic stream identified by ``(seed, label)``.

    ``position`` counts the uniforms consumed so far, so a stream can be
    reproduced exactly with :meth:`at`.
    """

    def __init__(self, seed: int, label: str = ""):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.label = label
        self.position = 0
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *_label_words(label)]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def derive(self, label: str) -> "SeededRng":
        """Independent sub-stream; depends only on the seed and the joined label."""
        full = f"{self.label}/{label}" if self.label else label
        return SeededRng(self.seed, full)

    @classmethod
    def at(cls, seed: int, label: str, position: int) -> "SeededRng":
        rng = cls(seed, label)
        rng.skip(position)
        return rng

    def skip(self, n: int) -> None:
        if n:
            self.uniform(n)

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform draws on [0, 1)."""
        n = 1 if size is None else int(np.prod(size))
        out = self._gen.random(n)
        self.position += n
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normals via Box-Muller, two per pair of uniforms."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1], keeps log finite
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers on [low, high] inclusive."""
        u = self.uniform(size)
        span = high - low + 1
        out = low + np.floor(np.asarray(u) * span).astype(np.int64)
        out = np.minimum(out, high)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by this stream."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
