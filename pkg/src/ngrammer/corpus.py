"""Seeded order-2 Markov corpora with analytically known entropy rates.

Each next token depends on the two previous tokens through a transition
tensor with Dirichlet-sampled rows. Optionally the rows are tied across
token groups, which plants recoverable cluster structure in the context
while keeping every row an ordinary Dirichlet draw. Training and held-out
streams come from disjoint seeded sample paths.
"""

from __future__ import annotations

import numpy as np

__all__ = ["SyntheticCorpus", "gen_corpus"]


class SyntheticCorpus:
    """Order-2 chain plus its stationary pair distribution and entropy rates."""

    def __init__(self, transitions, seed: int, group_of=None, length: int = 1 << 16):
        """transitions: (C, C, V) rows over next-token ids, where contexts are
        (group_of[prev2], group_of[prev]) pairs; group_of defaults to identity
        (C == V). `length` is the default stream length."""
        t = np.asarray(transitions, dtype=np.float64)
        if t.ndim != 3 or t.shape[0] != t.shape[1]:
            raise ValueError(f"transitions must be (C, C, V), got {t.shape}")
        if not np.allclose(t.sum(axis=-1), 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")
        if (t < 0).any():
            raise ValueError("transition rows must be nonnegative")
        self.vocab = t.shape[2]
        if group_of is None:
            if t.shape[0] != self.vocab:
                raise ValueError("without groups, contexts must range over the vocabulary")
            group_of = np.arange(self.vocab)
        group_of = np.asarray(group_of, dtype=np.int64)
        if group_of.shape != (self.vocab,) or group_of.min() < 0 or group_of.max() >= t.shape[0]:
            raise ValueError("group_of must map every token to a context group")
        self.transitions = t  # (G, G, V)
        self.group_of = group_of
        self.seed = seed
        self.length = int(length)
        self._cum = np.cumsum(t, axis=-1)
        self._pair_pi = self._stationary_pairs()
        self.entropy_rate = self._entropy_order2()
        self.entropy_rate_order1 = self._entropy_order1()

    # -- analytic quantities ------------------------------------------------

    def _stationary_pairs(self):
        """Stationary distribution over (prev2, prev1) token pairs."""
        v, g = self.vocab, self.group_of
        if self.transitions.shape[0] == v and np.array_equal(g, np.arange(v)):
            rows = self.transitions  # identity grouping: avoid a large copy
        else:
            rows = self.transitions[:, g, :]  # (G, V, V): P(next | group(prev2), prev1)
        pi = np.full((v, v), 1.0 / (v * v))
        for _ in range(5000):
            by_group = np.zeros((self.transitions.shape[0], v))
            np.add.at(by_group, g, pi)  # (G, V): mass of (group(prev2), prev1)
            step = np.einsum("ub,ubc->bc", by_group, rows)
            # lazy step kills periodicity in degenerate (permutation) chains
            new = 0.5 * pi + 0.5 * step
            if np.abs(new - pi).sum() < 1e-13:
                pi = new
                break
            pi = new
        return pi / pi.sum()

    def _row(self, a, b):
        return self.transitions[self.group_of[a], self.group_of[b]]

    def _entropy_order2(self) -> float:
        """H(next | prev1, prev2) in nats under the stationary distribution."""
        t = self.transitions  # (G, G, V)
        with np.errstate(divide="ignore", invalid="ignore"):
            row_h = -np.where(t > 0, t * np.log(t), 0.0).sum(axis=-1)  # (G, G)
        g = self.group_of
        pair_mass = np.zeros_like(row_h)
        np.add.at(pair_mass, (g[:, None].repeat(self.vocab, 1), g[None, :].repeat(self.vocab, 0)), self._pair_pi)
        return float((pair_mass * row_h).sum())

    def _entropy_order1(self) -> float:
        """H(next | prev1): the best any order-1 predictor can reach."""
        v, g = self.vocab, self.group_of
        by_group = np.zeros((self.transitions.shape[0], v))
        np.add.at(by_group, g, self._pair_pi)  # mass of (group(prev2), prev1)
        joint = np.einsum("ub,ubc->bc", by_group, self.transitions[:, g, :])  # P(prev1, next)
        marg = joint.sum(axis=-1, keepdims=True)
        cond = np.divide(joint, marg, out=np.zeros_like(joint), where=marg > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            row_h = -np.where(cond > 0, cond * np.log(cond), 0.0).sum(axis=-1)
        return float((marg[:, 0] * row_h).sum())

    @property
    def entropy_gap(self) -> float:
        """Nats an order-2 predictor saves over the best order-1 predictor."""
        return self.entropy_rate_order1 - self.entropy_rate

    # -- sampling -----------------------------------------------------------

    def sample(self, length: int, stream: str) -> np.ndarray:
        """Seeded token stream; distinct `stream` labels give disjoint paths."""
        if length < 2:
            raise ValueError(f"stream length must be >= 2, got {length}")
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=tuple(stream.encode())))
        )
        out = np.empty(length, dtype=np.int64)
        # start the pair from the stationary distribution
        flat = self._pair_pi.reshape(-1)
        start = rng.choice(flat.size, p=flat)
        out[0], out[1] = divmod(start, self.vocab)
        u = rng.random(length)
        g = self.group_of
        for i in range(2, length):
            cum = self._cum[g[out[i - 2]], g[out[i - 1]]]
            out[i] = np.searchsorted(cum, u[i], side="right")
        np.clip(out, 0, self.vocab - 1, out=out)
        return out

    def train_stream(self, length: int = None) -> np.ndarray:
        return self.sample(self.length if length is None else length, "train")

    def heldout_stream(self, length: int = None) -> np.ndarray:
        return self.sample(self.length if length is None else length, "heldout")

    def ideal_cross_entropy(self, stream_tokens) -> float:
        """Mean -log P(next | two previous) of the true chain on a stream."""
        s = np.asarray(stream_tokens)
        if s.size < 3:
            raise ValueError("need at least 3 tokens")
        g = self.group_of
        probs = self.transitions[g[s[:-2]], g[s[1:-1]], s[2:]]
        return float(-np.log(probs).mean())


def gen_corpus(
    vocab: int,
    order2_seed: int,
    length: int = 1 << 16,
    alpha: float = 0.1,
    groups=None,
    topics=None,
) -> SyntheticCorpus:
    """Dirichlet(alpha)-row order-2 chain.

    `groups` ties transition rows across token groups, planting cluster
    structure in the contexts. `topics` (requires groups) additionally draws
    only that many distinct rows and maps each group pair to one of them,
    which caps the rank of the order-2 signal while keeping every row an
    ordinary Dirichlet draw.
    """
    if vocab < 2:
        raise ValueError(f"vocabulary must be >= 2, got {vocab}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(order2_seed)))
    if groups is None:
        if topics is not None:
            raise ValueError("topics requires groups")
        t = rng.dirichlet(np.full(vocab, alpha), size=(vocab, vocab))
        return SyntheticCorpus(t, seed=order2_seed, length=length)
    if not 1 <= groups <= vocab:
        raise ValueError(f"groups must be in [1, {vocab}], got {groups}")
    if topics is None:
        t = rng.dirichlet(np.full(vocab, alpha), size=(groups, groups))
    else:
        if not 1 <= topics <= groups * groups:
            raise ValueError(f"topics must be in [1, {groups * groups}], got {topics}")
        rows = rng.dirichlet(np.full(vocab, alpha), size=topics)
        topic_map = rng.integers(0, topics, size=(groups, groups))
        t = rows[topic_map]
    group_of = np.arange(vocab) % groups
    return SyntheticCorpus(t, seed=order2_seed, group_of=group_of, length=length)
