"""Seeded randomness: splitmix64-derived xoshiro256++ streams.

Every random draw in the toolkit comes from a `Stream` constructed with
`Stream(root_seed, label)`, so the full experiment is a pure function of the
root seed in the config. Streams with distinct labels are statistically
independent; the same (seed, label) pair always replays the same sequence.

The generator keeps LANES parallel xoshiro256++ states and steps them with
vectorized uint64 numpy ops; outputs are the interleaved lane outputs. LANES
is a frozen constant: changing it changes every stream.
"""

from __future__ import annotations

import numpy as np

_M64 = (1 << 64) - 1
LANES = 64


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & _M64
    return h


def derive_seed(root_seed: int, *labels) -> int:
    """Fold a root seed and a label path into one 64-bit stream seed."""
    h = fnv1a64(int(root_seed & _M64).to_bytes(8, "little"))
    for label in labels:
        part = str(label).encode("utf-8")
        h = fnv1a64(h.to_bytes(8, "little") + b"/" + part)
    return h


def _splitmix64(state: int, n: int) -> list[int]:
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & _M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
        out.append(z ^ (z >> 31))
    return out


class Stream:
    """Deterministic random stream for one component of the experiment."""

    def __init__(self, root_seed: int, *labels):
        seed = derive_seed(root_seed, *labels) if labels else (root_seed & _M64)
        raw = _splitmix64(seed, 4 * LANES)
        # splitmix64 output is never all-zero across a 4-word state in practice,
        # but xoshiro forbids it; nudge defensively.
        state = np.array(raw, dtype=np.uint64).reshape(4, LANES)
        dead = ~np.any(state, axis=0)
        if np.any(dead):
            state[0, dead] = np.uint64(0x9E3779B97F4A7C15)
        self._s = state
        self._buf = np.empty(0, dtype=np.uint64)
        self._norm_buf = np.empty(0, dtype=np.float64)

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        with np.errstate(over="ignore"):
            result = _rotl(s0 + s3, 23) + s0
            t = s1 << np.uint64(17)
            s2 = s2 ^ s0
            s3 = s3 ^ s1
            s1 = s1 ^ s2
            s0 = s0 ^ s3
            s2 = s2 ^ t
            s3 = _rotl(s3, 45)
        self._s = np.stack([s0, s1, s2, s3])
        return result

    def u64(self, n: int) -> np.ndarray:
        while self._buf.size < n:
            self._buf = np.concatenate([self._buf, self._step()])
        out, self._buf = self._buf[:n], self._buf[n:]
        return out.copy()

    def uniform(self, size=None) -> np.ndarray | float:
        """Doubles in [0, 1) with 53-bit resolution."""
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape)) if shape else 1
        vals = (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(vals[0]) if size is None else vals.reshape(shape)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normals via Box-Muller (buffered, deterministic)."""
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape)) if shape else 1
        while self._norm_buf.size < n:
            m = max(n - self._norm_buf.size, LANES)
            k = (m + 1) // 2
            # map to (0,1] so log never sees 0
            u1 = ((self.u64(k) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
            u2 = (self.u64(k) >> np.uint64(11)).astype(np.float64) * 2.0**-53
            r = np.sqrt(-2.0 * np.log(u1))
            theta = 2.0 * np.pi * u2
            pair = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
            self._norm_buf = np.concatenate([self._norm_buf, pair])
        out, self._norm_buf = self._norm_buf[:n], self._norm_buf[n:]
        return float(out[0]) if size is None else out.copy().reshape(shape)

    def randint(self, lo: int, hi: int, size=None):
        """Integers uniform in [lo, hi)."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        u = self.uniform(size)
        return (np.floor(u * (hi - lo)).astype(np.int64) + lo) if size is not None else int(u * (hi - lo)) + lo

    def permutation(self, n: int) -> np.ndarray:
        idx = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order randomized."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct values from {n}")
        return self.permutation(n)[:k]


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    k = np.uint64(k)
    return (x << k) | (x >> (np.uint64(64) - k))
