"""Acceptance criteria A1-A8, one test per criterion.

Each test prints one `[A#] PASS (...)` line (visible under `pytest -s` or
in the captured output summary) and asserts both the functional result and
the stated wall-clock budget.
"""

import json
import time

import numpy as np
import pytest

from ngrammer.cli import main
from ngrammer.codebook import assign, freeze, init_from_batch, kmeans_step
from ngrammer.corpus import gen_corpus
from ngrammer.hashing import bigram_ids, hash_to_vocab, make_hash_family
from ngrammer.latent import bench_latent_paths, build_cache, inspect_clusters
from ngrammer.layer import (
    NGrammerConfig,
    NGrammerState,
    ngrammer_forward,
    ngrammer_forward_cached,
)
from ngrammer.lm import ModelConfig, TrainConfig, build_model, evaluate_ppl, train
from ngrammer.tensor import (
    Tape,
    Tensor,
    add,
    concat_last,
    cross_entropy_with_logits,
    finite_diff_check,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    scale,
    softmax,
    transpose,
    tsum,
)


class budget:
    """Context manager asserting the criterion's wall-clock budget."""

    def __init__(self, name, seconds):
        self.name = name
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, *rest):
        elapsed = time.perf_counter() - self.t0
        if exc_type is None:
            print(f"\n[{self.name}] PASS ({elapsed:.1f}s / budget {self.seconds}s)")
            assert elapsed < self.seconds, f"{self.name} exceeded its {self.seconds}s budget"
        else:
            print(f"\n[{self.name}] FAIL ({elapsed:.1f}s)")
        return False


def test_a1_formula_oracles():
    """Bigram and hash formulas match brute-force evaluation exactly."""
    with budget("A1", 10):
        rng = np.random.default_rng(1001)
        checked = 0
        fam_count = 0
        while checked < 100_000:
            k = int(rng.integers(2, 400))
            h = int(rng.integers(1, 6))
            l = int(rng.integers(1, 120))
            fam = make_hash_family(k, int(rng.integers(2, 5000)), h, fam_count)
            fam_count += 1
            z = rng.integers(0, k, size=(l, h))
            b = bigram_ids(z, k)
            ids = hash_to_vocab(b, fam)
            for j in range(h):
                p, r, s, v = fam.p[j], fam.r[j], fam.s[j], fam.v
                for i in range(l):
                    expect_b = int(z[i, j]) if i == 0 else int(z[i, j]) + k * int(z[i - 1, j])
                    assert int(b[i, j]) == expect_b
                    assert int(ids[i, j]) == ((r * expect_b + s) % p) % v
            checked += l * h


def test_a2_universality():
    """Empirical collision rate of the hash family stays near 1/v."""
    with budget("A2", 60):
        k, v, pairs, families = 32, 1024, 100_000, 200
        rng = np.random.default_rng(1002)
        collisions = 0
        total = 0
        for seed in range(families):
            fam = make_hash_family(k, v, 1, seed)
            a = rng.integers(0, k * k, size=pairs)
            b = (a + rng.integers(1, k * k, size=pairs)) % (k * k)  # distinct from a
            ha = hash_to_vocab(a.reshape(-1, 1), fam)[:, 0]
            hb = hash_to_vocab(b.reshape(-1, 1), fam)[:, 0]
            collisions += int((ha == hb).sum())
            total += pairs
        rate = collisions / total
        p0 = 2.0 / v
        sigma = float(np.sqrt(p0 * (1.0 - p0) / total))
        assert rate <= p0 + 3.0 * sigma, f"collision rate {rate} vs bound {p0 + 3 * sigma}"


def test_a3_gradient_suite():
    """Every op, the layer, and the full tiny model beat finite differences."""
    with budget("A3", 120):
        rng = np.random.default_rng(1003)
        w_fixed = Tensor(rng.normal(size=(5, 4)))
        gain = Tensor(rng.normal(1.0, 0.1, size=4))
        bias = Tensor(rng.normal(0.0, 0.1, size=4))
        suffix = Tensor(rng.normal(size=4))
        targets = rng.integers(0, 4, size=3)
        probes = {
            "matmul": (lambda x: tsum(matmul(x, w_fixed)), (3, 5)),
            "matmul_batched": (lambda x: tsum(matmul(x, transpose(x, (0, 2, 1)))), (2, 3, 4)),
            "add": (lambda x: tsum(mul(add(x, x), x)), (3, 4)),
            "add_suffix": (lambda x: tsum(mul(add(x, suffix), x)), (3, 4)),
            "scale": (lambda x: tsum(mul(scale(x, 2.5), x)), (3, 4)),
            "mul": (lambda x: tsum(mul(x, x)), (3, 4)),
            "concat": (lambda x: tsum(mul(concat_last(x, x), concat_last(x, x))), (3, 4)),
            "reshape": (lambda x: tsum(mul(reshape(x, (12,)), reshape(x, (12,)))), (3, 4)),
            "transpose": (lambda x: tsum(mul(transpose(x, (1, 0)), transpose(x, (1, 0)))), (3, 4)),
            "softmax": (lambda x: tsum(mul(softmax(x), Tensor(w_fixed.data[:3, :]))), (3, 4)),
            "gelu": (lambda x: tsum(mul(gelu(x), Tensor(w_fixed.data[:3, :]))), (3, 4)),
            "layer_norm": (
                lambda x: tsum(mul(layer_norm(x, gain, bias), layer_norm(x, gain, bias))),
                (3, 4),
            ),
            "cross_entropy": (lambda x: cross_entropy_with_logits(x, targets), (3, 4)),
            "gather": (lambda x: tsum(mul(x, x)), (6, 4)),
        }
        for name, (f, shape) in probes.items():
            err = finite_diff_check(f, Tensor(rng.normal(size=shape)))
            assert err < 1e-6, f"op {name}: finite-difference error {err}"

        # the full augmentation layer, gradient w.r.t. its input
        ng_cfg = NGrammerConfig(k=4, v=32, h=2, d=6, d_b=3, seed=3)
        cb = freeze(init_from_batch(rng.normal(size=(32, 2, 6)), 4, 3))
        state = NGrammerState.create(ng_cfg, cb)

        def layer_loss(x):
            out = ngrammer_forward(state, x, training=False)
            return tsum(mul(out, out))

        err = finite_diff_check(layer_loss, Tensor(rng.normal(size=(5, 2, 6))))
        assert err < 1e-6, f"layer forward: finite-difference error {err}"

        # end-to-end: 2 blocks, width 64, n-gram layer on, 50 sampled params
        cfg = ModelConfig(
            layers=2, width=64, heads=4, ffn_mult=4, vocab=128, seq_len=16,
            ngrammer=NGrammerConfig(k=32, v=512, h=4, d=12, d_b=4, seed=5),
        )
        model = build_model(cfg, seed=5)
        from ngrammer.lm import freeze_model

        freeze_model(model)
        x = rng.integers(0, cfg.vocab, size=(2, 16))
        y = rng.integers(0, cfg.vocab, size=(2, 16))
        tape = Tape()
        model.attach(tape)
        loss = model.loss(x, y, training=False)
        tape.backward(loss)
        grads = {
            k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for k, p in model.params.items()
        }
        model.attach(None)
        flat = [(k, i) for k in sorted(model.params) for i in range(model.params[k].data.size)]
        h = 1e-5
        worst = 0.0
        for pick in rng.choice(len(flat), size=50, replace=False):
            k, i = flat[pick]
            p = model.params[k]
            orig = p.data.flat[i]
            p.data.flat[i] = orig + h
            up = model.loss(x, y, training=False).item()
            p.data.flat[i] = orig - h
            dn = model.loss(x, y, training=False).item()
            p.data.flat[i] = orig
            numeric = (up - dn) / (2 * h)
            worst = max(worst, abs(grads[k].flat[i] - numeric) / max(1.0, abs(numeric)))
        assert worst < 1e-5, f"end-to-end gradient error {worst}"


def test_a4_mechanism_benefit_at_desk_scale():
    """The augmented model beats the matched-width control on order-2 data."""
    with budget("A4", 30 * 60):
        steps, batch, seq_len = 5000, 8, 32
        corpus = gen_corpus(256, order2_seed=11, groups=64, topics=8)
        assert corpus.entropy_gap >= 0.3, f"corpus gap {corpus.entropy_gap} below 0.3"

        def run(with_layer, seed):
            ng = (
                NGrammerConfig(k=64, v=4096, h=4, d=12, d_b=4, seed=seed)
                if with_layer
                else None
            )
            cfg = ModelConfig(
                layers=2, width=64, heads=4, ffn_mult=4, vocab=256,
                seq_len=seq_len, ngrammer=ng,
            )
            assert ng is None or ng.bigram_dim_fraction == 0.25  # d_b = 25% of width
            model = build_model(cfg, seed=seed)
            log = train(model, corpus, TrainConfig(batch=batch, steps=steps, seed=seed))
            ppl = evaluate_ppl(model, corpus.heldout_stream(16384))
            return ppl, log

        ratios = []
        for seed in (101, 202, 303):
            ppl_ngram, log_ngram = run(True, seed)
            ppl_ctrl, _ = run(False, seed)
            ratios.append(ppl_ngram / ppl_ctrl)
            print(
                f"  seed {seed}: augmented PP {ppl_ngram:.2f} vs control PP {ppl_ctrl:.2f} "
                f"(ratio {ppl_ngram / ppl_ctrl:.3f})"
            )
            # training loss falls by >= 1 nat from step 0 by step 3000
            drop = log_ngram[0]["loss"] - float(
                np.mean([r["loss"] for r in log_ngram[2950:3000]])
            )
            assert drop >= 1.0, f"seed {seed}: loss drop {drop} below 1 nat at step 3000"
        med = float(np.median(ratios))
        assert med <= 0.95, f"median perplexity ratio {med} above 0.95"


def test_a5_cache_equivalence_and_constant_serving():
    """Cached serving is exact and O(1) while the scan path grows with k."""
    with budget("A5", 5 * 60):
        rng = np.random.default_rng(1005)
        ng_cfg = NGrammerConfig(k=16, v=128, h=2, d=8, d_b=4, seed=7)
        vocab = 80
        emb = rng.normal(size=(vocab, 16))
        cb = freeze(init_from_batch(emb.reshape(vocab, 2, 8), 16, 7))
        state = NGrammerState.create(ng_cfg, cb)
        cache = build_cache(emb, cb)
        for _ in range(1000):
            tokens = rng.integers(0, vocab, size=12)
            x = Tensor(emb[tokens].reshape(12, 2, 8))
            plain = ngrammer_forward(state, x, training=False)
            cached = ngrammer_forward_cached(state, tokens, cache, x)
            assert np.array_equal(plain.data, cached.data)

        rows = bench_latent_paths([256, 4096], tokens=3000, h=8, d=8, vocab=4096, seed=7)
        scan_ratio = rows[1]["scan_ns"] / rows[0]["scan_ns"]
        cached_ratio = rows[1]["cached_ns"] / rows[0]["cached_ns"]
        print(
            f"  scan {rows[0]['scan_ns']:.0f} -> {rows[1]['scan_ns']:.0f} ns/token "
            f"(x{scan_ratio:.1f}); cached {rows[0]['cached_ns']:.0f} -> "
            f"{rows[1]['cached_ns']:.0f} ns/token (x{cached_ratio:.2f})"
        )
        assert scan_ratio >= 4.0, f"scan path grew only {scan_ratio:.2f}x from k=256 to 4096"
        assert cached_ratio <= 1.5, f"cached path grew {cached_ratio:.2f}x"


def test_a6_kmeans_recovers_separated_gaussians():
    """Streaming k-means lands on the true centers and agrees with Lloyd."""
    with budget("A6", 30):
        true = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])  # min distance 1.0
        rng = np.random.default_rng(0)
        pool = (
            true[rng.integers(0, 3, size=4096)] + rng.normal(0, 0.05, size=(4096, 2))
        ).reshape(-1, 1, 2)
        cb = init_from_batch(pool[:64], 3, seed=0)
        lloyd = cb.centers[:, 0, :].copy()
        for step in range(2000):
            lo = (step * 64) % 4096
            kmeans_step(cb, pool[lo : lo + 64], lr=1e-3)
        learned = cb.centers[:, 0, :]

        flat = pool[:, 0, :]
        for _ in range(500):  # independent full-batch Lloyd oracle, same init
            d = ((flat[:, None, :] - lloyd[None, :, :]) ** 2).sum(-1)
            zz = d.argmin(axis=1)
            stepped = np.array(
                [flat[zz == c].mean(axis=0) if (zz == c).any() else lloyd[c] for c in range(3)]
            )
            if np.allclose(stepped, lloyd, atol=1e-13):
                break
            lloyd = stepped

        matched = set()
        for t in true:
            dists = np.linalg.norm(learned - t, axis=1)
            assert dists.min() < 0.05, f"no learned center within 0.05 of {t}"
            matched.add(int(dists.argmin()))
        assert len(matched) == 3, "learned centers do not cover distinct true centers"
        for c in range(3):
            assert np.linalg.norm(learned[c] - lloyd[c]) < 0.05, "disagrees with Lloyd oracle"


def test_a7_cluster_report_separates_planted_groups():
    """Cluster inspection keeps five planted token groups apart."""
    with budget("A7", 10):
        rng = np.random.default_rng(1007)
        h, d, per_group = 2, 6, 12
        anchors = rng.normal(size=(5, h * d)) * 3.0
        emb = np.repeat(anchors, per_group, axis=0)  # 60 tokens, 5 planted groups
        x = emb.reshape(-1, h, d)
        cb = init_from_batch(x, 8, seed=2)
        for _ in range(100):
            kmeans_step(cb, x, lr=0.05)
        freeze(cb)
        cache = build_cache(emb, cb)
        names = [f"g{i // per_group}_tok{i % per_group}" for i in range(60)]
        report = inspect_clusters(cache, names)
        for j in range(h):
            assert report.sizes(j).sum() == 60  # partition per head
        signatures = [tuple(cache.latents[g * per_group]) for g in range(5)]
        assert len(set(signatures)) == 5, "two planted groups share a cluster on every head"


def test_a8_cmd_train_is_deterministic(tmp_path):
    """Two identical runs produce byte-identical metrics files."""
    with budget("A8", 10 * 60):
        cfg = {
            "seed": 17,
            "model": {
                "layers": 2, "width": 32, "heads": 2, "ffn_mult": 2,
                "vocab": 128, "seq_len": 16,
            },
            "ngrammer": {"k": 16, "v": 512, "h": 2, "d": 12, "d_b": 4},
            "train": {"batch": 4, "steps": 200, "warmup": 50},
            "data": {"groups": 32, "topics": 8, "heldout": 4096},
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        assert main(["train", str(path), "--out", str(tmp_path / "one")]) == 0
        assert main(["train", str(path), "--out", str(tmp_path / "two")]) == 0
        one = (tmp_path / "one" / "metrics.json").read_bytes()
        two = (tmp_path / "two" / "metrics.json").read_bytes()
        assert one == two, "metrics files differ between identical runs"
        ck1 = (tmp_path / "one" / "checkpoint.bin").read_bytes()
        ck2 = (tmp_path / "two" / "checkpoint.bin").read_bytes()
        assert ck1 == ck2, "checkpoints differ between identical runs"
