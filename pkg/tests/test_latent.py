import numpy as np
import pytest

from ngrammer.codebook import Codebook, assign, freeze, init_from_batch, kmeans_step
from ngrammer.latent import (
    LatentCache,
    bench_latent_paths,
    build_cache,
    fnv1a64,
    inspect_clusters,
)


def frozen_book(seed=0, k=6, h=2, d=4, n=64):
    rng = np.random.default_rng(seed)
    return freeze(init_from_batch(rng.normal(size=(n, h, d)), k, seed)), rng


def test_fnv1a64_known_vectors():
    # published FNV-1a 64-bit test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_cache_matches_fresh_assignment_exhaustively():
    cb, rng = frozen_book()
    emb = rng.normal(size=(50, 8))
    cache = build_cache(emb, cb)
    assert cache.vocab == 50 and cache.h == 2 and cache.k == 6
    for t in range(50):
        z = assign(cb, emb[t].reshape(1, 2, 4))
        assert np.array_equal(cache.latents[t], z[0])


def test_cache_requires_frozen_codebook():
    rng = np.random.default_rng(1)
    cb = init_from_batch(rng.normal(size=(20, 2, 4)), 4, 0)
    with pytest.raises(RuntimeError, match="frozen"):
        build_cache(rng.normal(size=(10, 8)), cb)


def test_cache_empty_vocab():
    cb, _ = frozen_book(seed=2)
    cache = build_cache(np.zeros((0, 8)), cb)
    assert cache.vocab == 0
    assert cache.fingerprint == cb.fingerprint()


def test_cache_rebuild_bitwise_identical(tmp_path):
    cb, rng = frozen_book(seed=3)
    emb = rng.normal(size=(30, 8))
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    build_cache(emb, cb).save(a)
    build_cache(emb, cb).save(b)
    assert a.read_bytes() == b.read_bytes()


def test_cache_file_roundtrip_and_header(tmp_path):
    cb, rng = frozen_book(seed=4)
    emb = rng.normal(size=(12, 8))
    cache = build_cache(emb, cb)
    path = tmp_path / "cache.txt"
    cache.save(path)
    first = path.read_text().splitlines()[0].split()
    assert first == ["NGRAM-CACHE", "v1", "12", "2", "6", f"{cb.fingerprint():016x}"]
    back = LatentCache.load(path)
    assert np.array_equal(back.latents, cache.latents)
    assert back.fingerprint == cache.fingerprint
    assert back.k == cache.k


def test_fingerprint_rejects_single_byte_mutations():
    cb, _ = frozen_book(seed=5)
    raw = bytearray(cb.to_bytes())
    fp = fnv1a64(bytes(raw))
    rng = np.random.default_rng(5)
    for pos in rng.integers(0, len(raw), size=200):
        mutated = bytearray(raw)
        mutated[pos] ^= 0xA5
        assert fnv1a64(bytes(mutated)) != fp


def test_report_is_a_partition_per_head():
    cb, rng = frozen_book(seed=6, k=5, h=3, d=4)
    emb = rng.normal(size=(40, 12))
    cache = build_cache(emb, cb)
    names = [f"tok{i}" for i in range(40)]
    report = inspect_clusters(cache, names)
    for j in range(3):
        seen = []
        for (head, _), toks in report.buckets.items():
            if head == j:
                seen.extend(toks)
        assert sorted(seen) == sorted(names)  # disjoint union covers the vocab
        assert report.sizes(j).sum() == 40


def test_report_token_appears_once_per_head():
    cb, rng = frozen_book(seed=7)
    emb = rng.normal(size=(25, 8))
    report = inspect_clusters(build_cache(emb, cb), [str(i) for i in range(25)])
    counts = {}
    for (head, _), toks in report.buckets.items():
        for t in toks:
            counts[(head, t)] = counts.get((head, t), 0) + 1
    assert set(counts.values()) == {1}


def test_report_length_mismatch():
    cb, rng = frozen_book(seed=8)
    cache = build_cache(rng.normal(size=(10, 8)), cb)
    with pytest.raises(ValueError, match="10"):
        inspect_clusters(cache, ["a", "b"])


def test_planted_groups_are_separated():
    # 3 groups of identical rows: trained k-means must keep them apart
    rng = np.random.default_rng(9)
    h, d = 2, 4
    anchors = rng.normal(size=(3, h * d)) * 3.0
    emb = np.repeat(anchors, 10, axis=0)  # 30 tokens, 3 planted groups
    x = emb.reshape(30, h, d)
    cb = init_from_batch(x, 4, seed=1)
    for _ in range(50):
        kmeans_step(cb, x, lr=0.05)
    freeze(cb)
    cache = build_cache(emb, cb)
    report = inspect_clusters(cache, [f"g{i // 10}_{i % 10}" for i in range(30)])
    for j in range(h):
        assignments = {tuple(cache.latents[i * 10 : (i + 1) * 10, j]) for i in range(3)}
        for a in assignments:
            assert len(set(a)) == 1  # identical rows share a cluster
    distinct = {tuple(cache.latents[i * 10]) for i in range(3)}
    assert len(distinct) == 3  # no two groups collide on every head


def test_top_clusters_ordering():
    cb, rng = frozen_book(seed=10)
    emb = rng.normal(size=(40, 8))
    report = inspect_clusters(build_cache(emb, cb), [str(i) for i in range(40)])
    tops = report.top_clusters(0, 3)
    sizes = [len(toks) for _, toks in tops]
    assert sizes == sorted(sizes, reverse=True)
    tsv = report.to_tsv(top_n=2)
    assert tsv.count("\n") == 2 * 2  # two rows per head


def test_bench_paths_agree_and_report_rows():
    rows = bench_latent_paths([8, 32], tokens=200, h=2, d=4, vocab=64, seed=0)
    assert [r["k"] for r in rows] == [8, 32]
    for r in rows:
        assert r["scan_ns"] > 0 and r["cached_ns"] > 0
    # the cached path must not scale with k even in this tiny setting
    assert rows[1]["cached_ns"] < rows[0]["cached_ns"] * 3
