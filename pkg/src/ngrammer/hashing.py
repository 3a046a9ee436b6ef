"""Bigram IDs over latent codes and per-head universal hashing into [v].

Pure integer arithmetic throughout; every operation here is deterministic
given its seed and safe for unrestricted concurrent use.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = ["HashFamily", "bigram_ids", "make_hash_family", "hash_to_vocab", "is_prime"]

MAX_CLUSTERS = 1 << 16  # keeps k^2 arithmetic exact in 64-bit

# Deterministic Miller-Rabin witness set, exact for n < 3.3e24.
_MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin primality test (exact for 64-bit inputs)."""
    if n < 2:
        return False
    for w in _MR_WITNESSES:
        if n == w:
            return True
        if n % w == 0:
            return False
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for w in _MR_WITNESSES:
        x = pow(w, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def bigram_ids(z, k: int):
    """Combine adjacent latent IDs into bigram IDs in [k^2].

    Position 0 keeps its uni-gram latent; position i >= 1 becomes
    z_i + k * z_{i-1}. The position axis is the second-to-last, so leading
    batch dims are allowed on top of the (l, h) contract shape.
    """
    z = np.asarray(z)
    if z.dtype.kind not in "iu":
        raise ValueError(f"latent ids must be integers, got dtype {z.dtype}")
    if z.ndim < 2:
        raise ValueError(f"latent ids must be at least (l, h), got shape {z.shape}")
    if not 1 <= k <= MAX_CLUSTERS:
        raise ValueError(f"cluster count {k} outside [1, {MAX_CLUSTERS}]")
    if z.size and (z.min() < 0 or z.max() >= k):
        bad = int(z.min()) if z.min() < 0 else int(z.max())
        raise ValueError(f"latent id {bad} out of range [0, {k})")
    b = z.astype(np.int64, copy=True)
    b[..., 1:, :] += k * z[..., :-1, :].astype(np.int64)
    return b


@dataclass(frozen=True)
class HashFamily:
    """Per-head (p, r, s) parameters for ((r*b + s) mod p) mod v."""

    k: int
    v: int
    h: int
    seed: int
    p: tuple
    r: tuple
    s: tuple

    def __post_init__(self):
        if not (len(self.p) == len(self.r) == len(self.s) == self.h):
            raise ValueError("hash family needs one (p, r, s) triple per head")
        for j in range(self.h):
            pj, rj, sj = self.p[j], self.r[j], self.s[j]
            if not is_prime(pj) or pj <= self.k * self.k:
                raise ValueError(f"head {j}: modulus {pj} is not a prime > k^2")
            if not 1 <= rj < pj:
                raise ValueError(f"head {j}: multiplier {rj} outside [1, {pj})")
            if not 0 <= sj <= pj - 2:
                raise ValueError(f"head {j}: offset {sj} outside [0, {pj - 2}]")

    def to_bytes(self) -> bytes:
        head = struct.pack("<4Q", self.k, self.v, self.h, self.seed)
        body = b"".join(
            struct.pack("<3Q", self.p[j], self.r[j], self.s[j]) for j in range(self.h)
        )
        return head + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "HashFamily":
        k, v, h, seed = struct.unpack_from("<4Q", raw, 0)
        trips = [struct.unpack_from("<3Q", raw, 32 + 24 * j) for j in range(h)]
        return cls(
            k=k,
            v=v,
            h=h,
            seed=seed,
            p=tuple(t[0] for t in trips),
            r=tuple(t[1] for t in trips),
            s=tuple(t[2] for t in trips),
        )


def make_hash_family(k: int, v: int, h: int, seed: int) -> HashFamily:
    """Draw per-head hash parameters, reproducibly from (seed, k, v, h).

    Each head's prime is uniform over the primes in (k^2, 2k^2]; the window
    is nonempty by Bertrand's postulate. Heads draw from independent
    seeded streams.
    """
    if k < 1 or v < 1 or h < 1:
        raise ValueError(f"k, v, h must be >= 1, got {(k, v, h)}")
    if k > MAX_CLUSTERS:
        raise ValueError(f"cluster count {k} above {MAX_CLUSTERS}")
    ps, rs, ss = [], [], []
    ksq = k * k
    for j in range(h):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(j,))))
        while True:
            cand = int(rng.integers(ksq + 1, 2 * ksq + 1))
            if is_prime(cand):
                break
        p = cand
        r = int(rng.integers(1, p))
        s = int(rng.integers(0, p - 1))
        ps.append(p)
        rs.append(r)
        ss.append(s)
    return HashFamily(k=k, v=v, h=h, seed=seed, p=tuple(ps), r=tuple(rs), s=tuple(ss))


def hash_to_vocab(b, fam: HashFamily):
    """Map bigram IDs to [v] via ((r_j * b + s_j) mod p_j) mod v per head.

    Arithmetic is exact: the vectorized int64 path is used only when
    r_j * b + s_j cannot overflow; otherwise falls back to Python integers.
    """
    b = np.asarray(b)
    if b.dtype.kind not in "iu":
        raise ValueError(f"bigram ids must be integers, got dtype {b.dtype}")
    if b.ndim < 2 or b.shape[-1] != fam.h:
        raise ValueError(f"bigram ids must end in a head axis of {fam.h}, got shape {b.shape}")
    out = np.empty_like(b, dtype=np.int64)
    for j in range(fam.h):
        p, r, s = fam.p[j], fam.r[j], fam.s[j]
        bj = b[..., j]
        if bj.size:
            lo, hi = int(bj.min()), int(bj.max())
            if lo < 0 or hi >= p:
                bad = lo if lo < 0 else hi
                raise ValueError(f"head {j}: bigram id {bad} outside [0, {p})")
        if r * (p - 1) + s < (1 << 63):
            out[..., j] = (r * bj.astype(np.int64) + s) % p % fam.v
        else:
            flat = [(r * int(x) + s) % p % fam.v for x in bj.reshape(-1)]
            out[..., j] = np.asarray(flat, dtype=np.int64).reshape(bj.shape)
    return out
