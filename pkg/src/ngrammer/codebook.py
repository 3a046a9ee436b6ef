"""Per-head cluster centers trained by streaming k-means.

The codebook quantizes per-head embedding slices to the nearest center.
Clustering consumes detached activations: no gradient flows through the
assignments. A frozen codebook is immutable and safe for concurrent
readers; kmeans_step requires exclusive access.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "Codebook",
    "FrozenCodebookError",
    "assign",
    "kmeans_step",
    "init_from_batch",
    "freeze",
    "quantization_error",
]

CODEBOOK_MAGIC = b"NGRAMCB1"

# cap the (n, k, h, d) distance workspace at ~32 MB of float64
_CHUNK_BUDGET = 1 << 22


class FrozenCodebookError(RuntimeError):
    """Mutation attempted on a frozen codebook."""


class Codebook:
    """k centers per head, shape (k, h, d), with per-center assignment counts."""

    def __init__(self, centers, counts=None, frozen=False):
        centers = np.asarray(centers, dtype=np.float64)
        if centers.ndim != 3:
            raise ValueError(f"centers must be (k, h, d), got shape {centers.shape}")
        if not np.isfinite(centers).all():
            raise ValueError("centers must be finite")
        self.centers = centers
        k, h, _ = centers.shape
        if counts is None:
            counts = np.zeros((k, h), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (k, h) or (counts < 0).any():
                raise ValueError(f"counts must be nonnegative with shape ({k}, {h})")
        self.counts = counts
        self.frozen = bool(frozen)
        self._fingerprint = None

    @property
    def k(self):
        return self.centers.shape[0]

    @property
    def h(self):
        return self.centers.shape[1]

    @property
    def d(self):
        return self.centers.shape[2]

    def to_bytes(self) -> bytes:
        k, h, d = self.centers.shape
        return (
            CODEBOOK_MAGIC
            + struct.pack("<III", k, h, d)
            + self.centers.astype("<f8").tobytes(order="C")
            + self.counts.astype("<u8").tobytes(order="C")
        )

    @classmethod
    def from_bytes(cls, raw: bytes, frozen=False) -> "Codebook":
        if raw[:8] != CODEBOOK_MAGIC:
            raise ValueError("bad codebook header magic")
        k, h, d = struct.unpack_from("<III", raw, 8)
        off = 8 + 12
        n = k * h * d
        centers = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(k, h, d)
        counts = np.frombuffer(raw, dtype="<u8", count=k * h, offset=off + 8 * n).reshape(k, h)
        return cls(centers.copy(), counts.copy(), frozen=frozen)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path, frozen=False) -> "Codebook":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read(), frozen=frozen)

    def fingerprint(self) -> int:
        """FNV-1a 64-bit digest of the serialized codebook; cached once frozen."""
        if self._fingerprint is not None:
            return self._fingerprint
        from ngrammer.latent import fnv1a64

        fp = fnv1a64(self.to_bytes())
        if self.frozen:
            self._fingerprint = fp
        return fp


def _fold(x, h, d):
    """Validate trailing (h, d) dims and flatten any leading dims to one."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3 or x.shape[-2] != h or x.shape[-1] != d:
        raise ValueError(f"expected input shaped (..., l, {h}, {d}), got {x.shape}")
    return x.reshape(-1, h, d), x.shape[:-2]


def assign(codebook: Codebook, x):
    """Nearest-center IDs per position and head; ties break to the smallest index.

    x is (l, h, d) (leading batch dims allowed); returns int64 IDs shaped
    like x without the feature axis.
    """
    flat, lead = _fold(x, codebook.h, codebook.d)
    n, h, d = flat.shape
    k = codebook.k
    z = np.empty((n, h), dtype=np.int64)
    step = max(1, _CHUNK_BUDGET // max(1, k * h * d))
    for lo in range(0, n, step):
        blk = flat[lo : lo + step]
        diff = blk[:, None, :, :] - codebook.centers[None, :, :, :]  # (n', k, h, d)
        dist = (diff * diff).sum(axis=-1)  # (n', k, h)
        z[lo : lo + step] = dist.argmin(axis=1)
    return z.reshape(lead + (h,))


def kmeans_step(codebook: Codebook, x, lr: float):
    """Assign the batch, then move each assigned center toward its samples.

    Applies c <- c + lr*(x - c) per assigned sample in position order
    (computed per center via the equivalent geometric-weight form), with no
    smoothing or averaging. Counts increase by assignments even when lr=0.
    Returns the assignments made before the centers moved.
    """
    if codebook.frozen:
        raise FrozenCodebookError("cannot run k-means on a frozen codebook")
    lr = float(lr)
    if lr < 0:
        raise ValueError(f"k-means learning rate must be >= 0, got {lr}")
    flat, lead = _fold(x, codebook.h, codebook.d)
    z = assign(codebook, flat)  # (n, h), pre-update centers
    decay = 1.0 - lr
    for j in range(codebook.h):
        zj = z[:, j]
        if zj.size == 0:
            continue
        order = np.argsort(zj, kind="stable")  # groups by center, position order kept
        sorted_ids = zj[order]
        uniq, starts = np.unique(sorted_ids, return_index=True)
        bounds = np.append(starts, zj.size)
        for u, lo, hi in zip(uniq, bounds[:-1], bounds[1:]):
            idx = order[lo:hi]
            m = idx.size
            # sequential c <- (1-lr)c + lr*x_t collapses to geometric weights
            w = lr * decay ** np.arange(m - 1, -1, -1, dtype=np.float64)
            codebook.centers[u, j] = decay**m * codebook.centers[u, j] + w @ flat[idx, j]
            codebook.counts[u, j] += m
    return z.reshape(lead + (codebook.h,))


def init_from_batch(x, k: int, seed: int) -> Codebook:
    """Seeded sample-without-replacement initialization from one batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3:
        raise ValueError(f"expected (l, h, d) input, got shape {x.shape}")
    flat = x.reshape(-1, x.shape[-2], x.shape[-1])
    n, h, d = flat.shape
    if n < k:
        raise ValueError(f"need at least k={k} positions to initialize, got {n}")
    centers = np.empty((k, h, d), dtype=np.float64)
    for j in range(h):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(j,))))
        idx = rng.choice(n, size=k, replace=False)
        centers[:, j, :] = flat[idx, j, :]
    return Codebook(centers)


def freeze(codebook: Codebook) -> Codebook:
    """Mark the codebook immutable (idempotent); assignment stays available."""
    codebook.frozen = True
    codebook.fingerprint()  # cache the digest while the bytes are final
    return codebook


def quantization_error(codebook: Codebook, x) -> float:
    """Mean squared distance from each (position, head) slice to its center."""
    flat, _ = _fold(x, codebook.h, codebook.d)
    if flat.shape[0] == 0:
        return 0.0
    z = assign(codebook, flat)
    picked = codebook.centers[z, np.arange(codebook.h)]  # (n, h, d)
    return float(((flat - picked) ** 2).sum(axis=-1).mean())
