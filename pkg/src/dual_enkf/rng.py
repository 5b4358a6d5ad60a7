"""Counter-based random streams.

Every Gaussian draw is addressed by ``(seed, channel, step, index, sub)``:
the seed and channel form the Philox key, the step and sub-stream index sit in
the upper counter words and the particle/evaluation index selects the block.
Any subset of indices can therefore be drawn independently, which makes the
results invariant to how the work is chunked across threads.
"""
from __future__ import annotations

import enum

import numpy as np
from numpy.random import Philox

_U53 = 2.0 ** -53
_MASK64 = (1 << 64) - 1


class Channel(enum.IntEnum):
    TERMINAL = 1
    ETA = 2
    W = 3
    PROBE = 4
    ROLLOUT = 5
    INITIAL = 6
    GENERATOR = 7


def _box_muller(raw: np.ndarray) -> np.ndarray:
    """Map raw uint64 words (last axis a multiple of 2) to standard normals."""
    u = (raw >> np.uint64(11)).astype(np.float64) * _U53
    u1 = 1.0 - u[..., 0::2]  # (0, 1]
    u2 = u[..., 1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    out = np.empty(raw.shape, dtype=np.float64)
    out[..., 0::2] = r * np.cos(ang)
    out[..., 1::2] = r * np.sin(ang)
    return out


class CounterStream:
    """Addressable standard-normal generator for one 64-bit seed."""

    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0 or seed > _MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = seed

    def __repr__(self):
        return f"CounterStream(seed={self.seed})"

    def normals(self, channel: int, step: int, dim: int, ids=None, n: int | None = None,
                sub: int = 0) -> np.ndarray:
        """Standard normals of shape ``(len(ids), dim)``.

        Row ``r`` depends only on ``(seed, channel, step, ids[r], sub)``.
        ``ids`` defaults to ``range(n)``.
        """
        if ids is None:
            if n is None:
                raise TypeError("either ids or n must be given")
            lo, hi, index = 0, int(n), None
        else:
            ids = np.asarray(ids, dtype=np.int64)
            if ids.size == 0:
                return np.zeros((0, dim))
            if ids.min() < 0:
                raise ValueError("stream ids must be nonnegative")
            lo, hi = int(ids.min()), int(ids.max()) + 1
            contiguous = ids.size == hi - lo and np.all(np.diff(ids) == 1)
            index = None if contiguous else ids - lo
        if dim == 0:
            return np.zeros((hi - lo if index is None else index.size, 0))
        blocks = -(-dim // 4)
        gen = Philox(key=[self.seed, int(channel)],
                     counter=[lo * blocks, int(step), int(sub), 0])
        raw = gen.random_raw((hi - lo) * blocks * 4).reshape(hi - lo, blocks * 4)
        z = _box_muller(raw)[:, :dim]
        return z if index is None else z[index]


def stream(seed) -> CounterStream:
    return seed if isinstance(seed, CounterStream) else CounterStream(seed)
