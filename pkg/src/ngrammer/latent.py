"""Serving-side latent cache and cluster inspection.

Once the codebook is frozen, the token-to-latent map is fixed, so one
O(vocab * k) pass caches every token's per-head latents. Serving then
retrieves latents in O(1) per token instead of an O(k) distance scan.
The cache is immutable after build and safe for concurrent readers; a
64-bit digest of the codebook bytes guards against stale caches.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ngrammer.codebook import Codebook, assign, freeze, init_from_batch

__all__ = [
    "LatentCache",
    "ClusterReport",
    "fnv1a64",
    "build_cache",
    "inspect_clusters",
    "bench_latent_paths",
]

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit digest."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class LatentCache:
    """Per-token latent IDs (vocab, h) keyed to one frozen codebook."""

    latents: np.ndarray  # (vocab, h) int64
    fingerprint: int
    k: int

    @property
    def vocab(self) -> int:
        return self.latents.shape[0]

    @property
    def h(self) -> int:
        return self.latents.shape[1]

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"NGRAM-CACHE v1 {self.vocab} {self.h} {self.k} {self.fingerprint:016x}\n")
            for tid in range(self.vocab):
                zs = " ".join(str(int(z)) for z in self.latents[tid])
                f.write(f"{tid}\t{zs}\n")

    @classmethod
    def load(cls, path) -> "LatentCache":
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().split()
            if header[:2] != ["NGRAM-CACHE", "v1"] or len(header) != 6:
                raise ValueError("bad latent-cache header")
            vocab, h, k = int(header[2]), int(header[3]), int(header[4])
            fingerprint = int(header[5], 16)
            latents = np.zeros((vocab, h), dtype=np.int64)
            for line in f:
                tid, _, rest = line.partition("\t")
                latents[int(tid)] = [int(x) for x in rest.split()]
        if latents.size and (latents.min() < 0 or latents.max() >= k):
            raise ValueError(f"cache holds latent ids outside [0, {k})")
        return cls(latents=latents, fingerprint=fingerprint, k=k)


def build_cache(embedding_table, codebook: Codebook) -> LatentCache:
    """Assign every vocabulary row once; requires a frozen codebook.

    embedding_table is (vocab, h*d); each row is reshaped to (h, d) and
    quantized exactly as the layer would at serving time.
    """
    if not codebook.frozen:
        raise RuntimeError("latent cache requires a frozen codebook")
    table = np.asarray(embedding_table, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] != codebook.h * codebook.d:
        raise ValueError(
            f"embedding table must be (vocab, {codebook.h * codebook.d}), got {table.shape}"
        )
    vocab = table.shape[0]
    if vocab == 0:
        latents = np.zeros((0, codebook.h), dtype=np.int64)
    else:
        latents = assign(codebook, table.reshape(vocab, 1, codebook.h, codebook.d))
        latents = latents.reshape(vocab, codebook.h)
    return LatentCache(latents=latents, fingerprint=codebook.fingerprint(), k=codebook.k)


@dataclass(frozen=True)
class ClusterReport:
    """Inverted index (head, cluster) -> token strings, with coverage stats."""

    buckets: dict  # (head, cluster) -> list[str]
    vocab: int
    h: int
    k: int

    def sizes(self, head: int):
        """Tokens per cluster for one head, dense over [k]."""
        out = np.zeros(self.k, dtype=np.int64)
        for (j, c), toks in self.buckets.items():
            if j == head:
                out[c] = len(toks)
        return out

    def top_clusters(self, head: int, n: int):
        """Largest clusters of one head as (cluster, tokens) pairs."""
        mine = [(c, toks) for (j, c), toks in self.buckets.items() if j == head]
        mine.sort(key=lambda item: (-len(item[1]), item[0]))
        return mine[:n]

    def to_tsv(self, top_n: int = None) -> str:
        """head TAB cluster TAB count TAB comma-joined tokens, one per bucket."""
        lines = []
        for j in range(self.h):
            rows = self.top_clusters(j, top_n if top_n is not None else self.k)
            for c, toks in rows:
                lines.append(f"{j}\t{c}\t{len(toks)}\t{','.join(toks)}")
        return "\n".join(lines) + ("\n" if lines else "")


def inspect_clusters(cache: LatentCache, token_strings) -> ClusterReport:
    """Group token strings by their (head, cluster) assignment."""
    token_strings = list(token_strings)
    if len(token_strings) != cache.vocab:
        raise ValueError(
            f"got {len(token_strings)} token strings for a vocabulary of {cache.vocab}"
        )
    buckets = {}
    for tid, name in enumerate(token_strings):
        for j in range(cache.h):
            key = (j, int(cache.latents[tid, j]))
            buckets.setdefault(key, []).append(name)
    return ClusterReport(buckets=buckets, vocab=cache.vocab, h=cache.h, k=cache.k)


def _time_loop(fn, args_iter, repeats: int = 3) -> float:
    """Best-of-n wall time per call, in nanoseconds."""
    best = float("inf")
    args = list(args_iter)
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        for a in args:
            fn(a)
        dt = (time.perf_counter_ns() - t0) / max(1, len(args))
        best = min(best, dt)
    return best


def bench_latent_paths(k_values, tokens: int, h: int = 8, d: int = 8, vocab: int = 4096, seed: int = 0):
    """Per-token cost of the O(k) scan path vs the O(1) cached path.

    For each k a frozen codebook is built over a synthetic embedding table,
    the two paths are checked for identical latents, then each is timed over
    `tokens` single-token retrievals. Returns rows of
    (k, scan_ns_per_token, cached_ns_per_token).
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    table = rng.normal(0.0, 1.0, size=(vocab, h * d))
    token_stream = rng.integers(0, vocab, size=tokens)
    rows = []
    for k in k_values:
        if k > vocab:
            raise ValueError(f"k={k} exceeds the synthetic vocabulary {vocab}")
        cb = freeze(init_from_batch(table.reshape(vocab, h, d), k, seed))
        cache = build_cache(table, cb)
        slices = table.reshape(vocab, 1, h, d)
        # correctness gate before timing
        scan_all = assign(cb, table.reshape(vocab, 1, h, d)).reshape(vocab, h)
        if not np.array_equal(scan_all, cache.latents):
            raise AssertionError(f"scan and cache disagree for k={k}")
        scan_ns = _time_loop(lambda t: assign(cb, slices[t]), token_stream)
        cached_ns = _time_loop(lambda t: cache.latents[t], token_stream)
        rows.append({"k": int(k), "scan_ns": scan_ns, "cached_ns": cached_ns})
    return rows
