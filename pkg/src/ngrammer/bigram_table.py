"""Trainable bigram embedding table with sparse per-row Adagrad updates.

Lookups participate in the gradient tape but produce a SparseGrad touching
only the (row, head) pairs that appeared in the batch; rows never looked
up stay bit-identical to their initialization. Lookup on a table that is
not being updated is concurrent-reader safe; adagrad_update requires an
exclusive writer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ngrammer.tensor import NumericError, Tensor

__all__ = ["BigramTable", "SparseGrad", "init_table", "lookup", "adagrad_update"]

TABLE_MAGIC = b"NGRAMTB1"


@dataclass
class SparseGrad:
    """Gradients keyed by unique (row, head) pairs, duplicates pre-summed."""

    rows: np.ndarray  # (m,) int64
    heads: np.ndarray  # (m,) int64
    values: np.ndarray  # (m, d_b) float64

    @classmethod
    def from_entries(cls, rows, heads, values, h: int):
        """Coalesce possibly-duplicated (row, head) contributions."""
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        heads = np.asarray(heads, dtype=np.int64).reshape(-1)
        values = np.asarray(values, dtype=np.float64).reshape(rows.size, -1)
        key = rows * h + heads
        uniq, inverse = np.unique(key, return_inverse=True)
        summed = np.zeros((uniq.size, values.shape[1]), dtype=np.float64)
        np.add.at(summed, inverse, values)
        return cls(rows=uniq // h, heads=uniq % h, values=summed)

    def merge(self, other: "SparseGrad", h: int) -> "SparseGrad":
        return SparseGrad.from_entries(
            np.concatenate([self.rows, other.rows]),
            np.concatenate([self.heads, other.heads]),
            np.concatenate([self.values, other.values]),
            h,
        )

    def as_dict(self):
        return {
            (int(r), int(j)): self.values[i].copy()
            for i, (r, j) in enumerate(zip(self.rows, self.heads))
        }

    def sq_norm(self) -> float:
        return float((self.values * self.values).sum())


class BigramTable:
    """Embedding rows (v, h, d_b) plus matching Adagrad accumulators."""

    def __init__(self, weights, acc=None):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 3:
            raise ValueError(f"weights must be (v, h, d_b), got shape {weights.shape}")
        self.weights = weights
        if acc is None:
            acc = np.zeros_like(weights)
        else:
            acc = np.asarray(acc, dtype=np.float64)
            if acc.shape != weights.shape or (acc < 0).any():
                raise ValueError("accumulators must be nonnegative and weight-shaped")
        self.acc = acc
        self.sparse_grad = None  # populated by backward through lookup

    @property
    def v(self):
        return self.weights.shape[0]

    @property
    def h(self):
        return self.weights.shape[1]

    @property
    def d_b(self):
        return self.weights.shape[2]

    def to_bytes(self) -> bytes:
        v, h, d_b = self.weights.shape
        return (
            TABLE_MAGIC
            + struct.pack("<III", v, h, d_b)
            + self.weights.astype("<f8").tobytes(order="C")
            + self.acc.astype("<f8").tobytes(order="C")
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BigramTable":
        if raw[:8] != TABLE_MAGIC:
            raise ValueError("bad bigram-table header magic")
        v, h, d_b = struct.unpack_from("<III", raw, 8)
        off = 8 + 12
        n = v * h * d_b
        weights = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(v, h, d_b)
        acc = np.frombuffer(raw, dtype="<f8", count=n, offset=off + 8 * n).reshape(v, h, d_b)
        return cls(weights.copy(), acc.copy())


def init_table(v: int, h: int, d_b: int, seed: int, scale: float = None) -> BigramTable:
    """Gaussian init with std `scale` (default d_b^-1/2); accumulators zero."""
    if v < 1 or h < 1 or d_b < 1:
        raise ValueError(f"extents must be >= 1, got {(v, h, d_b)}")
    if scale is None:
        scale = d_b**-0.5
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    return BigramTable(rng.normal(0.0, scale, size=(v, h, d_b)))


def lookup(table: BigramTable, ids, tape=None) -> Tensor:
    """Per-head row selection: out[..., i, j, :] = weights[ids[..., i, j], j, :].

    Backward coalesces duplicate (row, head) contributions into
    table.sparse_grad (merging if several lookups share a tape).
    """
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ValueError(f"lookup ids must be integers, got dtype {ids.dtype}")
    if ids.ndim < 2 or ids.shape[-1] != table.h:
        raise ValueError(f"ids must end in a head axis of {table.h}, got shape {ids.shape}")
    if ids.size:
        lo, hi = int(ids.min()), int(ids.max())
        if lo < 0 or hi >= table.v:
            bad = lo if lo < 0 else hi
            raise IndexError(f"bigram id {bad} out of range for table with {table.v} rows")
    heads = np.arange(table.h)
    out = Tensor(table.weights[ids, heads], tape)  # (..., h, d_b)
    if tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            flat_ids = ids.reshape(-1, table.h)
            grad = SparseGrad.from_entries(
                flat_ids.reshape(-1),
                np.tile(heads, flat_ids.shape[0]),
                g.reshape(-1, table.d_b),
                table.h,
            )
            if table.sparse_grad is None:
                table.sparse_grad = grad
            else:
                table.sparse_grad = table.sparse_grad.merge(grad, table.h)

        tape.record("bigram_lookup", back)
    return out


def adagrad_update(table: BigramTable, grad: SparseGrad, lr: float, eps: float = 1e-10):
    """Adagrad on exactly the touched rows: acc += g^2; w -= lr*g/sqrt(acc+eps)."""
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if grad is None or grad.rows.size == 0:
        return
    if not np.isfinite(grad.values).all():
        bad = int(grad.rows[np.where(~np.isfinite(grad.values))[0][0]])
        raise NumericError(f"non-finite gradient for bigram row {bad}")
    r, j = grad.rows, grad.heads
    table.acc[r, j] += grad.values * grad.values
    table.weights[r, j] -= lr * grad.values / np.sqrt(table.acc[r, j] + eps)
