"""Sparsifying compressors for device-to-server model deltas."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SparseDelta:
    indices: np.ndarray
    values: np.ndarray
    d: int

    def __post_init__(self):
        if len(self.indices) != len(self.values) or len(self.indices) == 0:
            raise ValueError("need matching, non-empty indices and values")
        if self.indices[0] < 0 or self.indices[-1] >= self.d:
            raise IndexError("index outside [0, d)")
        if len(self.indices) > 1 and np.any(np.diff(self.indices) <= 0):
            raise ValueError("indices must be strictly increasing")

    def __len__(self):
        return len(self.indices)

    def densify(self) -> np.ndarray:
        out = np.zeros(self.d)
        out[self.indices] = self.values
        return out

    def to_bytes(self) -> bytes:
        """u32 count, u32 indices, f64 values; little-endian."""
        k = len(self.indices)
        return (
            np.array([k], dtype="<u4").tobytes()
            + self.indices.astype("<u4").tobytes()
            + self.values.astype("<f8").tobytes()
        )

    @classmethod
    def from_bytes(cls, buf: bytes, d: int) -> "SparseDelta":
        k = int(np.frombuffer(buf[:4], dtype="<u4")[0])
        if len(buf) != 4 + 12 * k:
            raise ValueError(f"expected {4 + 12 * k} bytes, got {len(buf)}")
        idx = np.frombuffer(buf[4 : 4 + 4 * k], dtype="<u4").astype(np.int64)
        vals = np.frombuffer(buf[4 + 4 * k :], dtype="<f8").astype(np.float64)
        return cls(idx, vals, d)


def n_kept(theta: float, d: int) -> int:
    """k = ceil(theta * d), at least 1 and at most d."""
    if not 0 < theta <= 1:
        raise ValueError(f"compression ratio must be in (0, 1], got {theta}")
    # round away float noise such as 0.1 * 30 = 3.0000000000000004
    return min(d, max(1, math.ceil(round(theta * d, 9))))


def top_k(x: np.ndarray, theta: float) -> SparseDelta:
    """Keep the ceil(theta*d) largest-magnitude entries; ties go to lower index."""
    d = x.shape[0]
    if d < 1 or not np.all(np.isfinite(x)):
        raise ValueError("x must be a finite, non-empty vector")
    k = n_kept(theta, d)
    if k == d:
        idx = np.arange(d)
    else:
        order = np.argsort(-np.abs(x), kind="stable")
        idx = np.sort(order[:k])
    return SparseDelta(idx, x[idx].copy(), d)


def random_k(x: np.ndarray, theta: float, rng: np.random.Generator) -> SparseDelta:
    """Keep k = ceil(theta*d) coordinates drawn uniformly without replacement."""
    d = x.shape[0]
    k = n_kept(theta, d)
    idx = np.arange(d) if k == d else np.sort(rng.choice(d, size=k, replace=False))
    return SparseDelta(idx, x[idx].copy(), d)


def apply_sparse(base: np.ndarray, delta: SparseDelta, scale: float = 1.0) -> np.ndarray:
    if delta.d != base.shape[0]:
        raise ValueError(f"delta length {delta.d} does not match base length {base.shape[0]}")
    out = base.copy()
    out[delta.indices] += scale * delta.values
    return out
