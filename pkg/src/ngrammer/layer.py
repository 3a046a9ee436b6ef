"""The latent n-gram augmentation layer.

Pipeline per forward: quantize the per-head input slices to latent IDs
(running one k-means step on the same batch while training), combine
adjacent latents into bigram IDs, hash them into the bigram vocabulary,
look up trainable bigram embeddings, then layer-normalize both streams
independently and concatenate along the feature axis. No gradient flows
through the discrete assignments.

Frozen states support a token-keyed latent cache that replaces the O(k)
distance scan with an O(1) lookup, producing bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ngrammer.bigram_table import BigramTable, init_table, lookup
from ngrammer.codebook import Codebook, assign, kmeans_step
from ngrammer.hashing import HashFamily, bigram_ids, hash_to_vocab, make_hash_family
from ngrammer.tensor import Tensor, concat_last, layer_norm

__all__ = [
    "NGrammerConfig",
    "NGrammerState",
    "StaleCacheError",
    "ngrammer_forward",
    "ngrammer_forward_cached",
    "resolve_position",
]


class StaleCacheError(RuntimeError):
    """Latent cache does not match the codebook it is used with."""


@dataclass(frozen=True)
class NGrammerConfig:
    """Shape and training knobs for one layer instance."""

    k: int  # clusters per head
    v: int  # bigram vocabulary
    h: int  # heads
    d: int  # per-head uni-gram dim
    d_b: int  # per-head bigram dim
    seed: int = 0
    eps_ln: float = 1e-5
    kmeans_lr: float = 1e-3

    def __post_init__(self):
        for name in ("k", "v", "h", "d", "d_b"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def width_out(self) -> int:
        return self.h * (self.d + self.d_b)

    @property
    def bigram_dim_fraction(self) -> float:
        """Bigram share of the downstream width (the reporting convention)."""
        return self.h * self.d_b / self.width_out


@dataclass
class NGrammerState:
    """Everything one layer owns: codebook, hash family, table, LN params."""

    cfg: NGrammerConfig
    codebook: Codebook
    hash_family: HashFamily
    table: BigramTable
    ln_uni_gain: Tensor
    ln_uni_bias: Tensor
    ln_bi_gain: Tensor
    ln_bi_bias: Tensor
    mode: str = "training"  # "training" | "frozen"

    def __post_init__(self):
        if self.mode not in ("training", "frozen"):
            raise ValueError(f"mode must be 'training' or 'frozen', got {self.mode!r}")
        if self.mode == "frozen" and not self.codebook.frozen:
            raise ValueError("frozen mode requires a frozen codebook")
        cb = self.codebook
        if (cb.k, cb.h, cb.d) != (self.cfg.k, self.cfg.h, self.cfg.d):
            raise ValueError(
                f"codebook shape {(cb.k, cb.h, cb.d)} does not match config "
                f"{(self.cfg.k, self.cfg.h, self.cfg.d)}"
            )

    @classmethod
    def create(cls, cfg: NGrammerConfig, codebook: Codebook) -> "NGrammerState":
        return cls(
            cfg=cfg,
            codebook=codebook,
            hash_family=make_hash_family(cfg.k, cfg.v, cfg.h, cfg.seed),
            table=init_table(cfg.v, cfg.h, cfg.d_b, cfg.seed + 1),
            ln_uni_gain=Tensor(np.ones(cfg.d)),
            ln_uni_bias=Tensor(np.zeros(cfg.d)),
            ln_bi_gain=Tensor(np.ones(cfg.d_b)),
            ln_bi_bias=Tensor(np.zeros(cfg.d_b)),
            mode="frozen" if codebook.frozen else "training",
        )

    def ln_params(self):
        return {
            "ln_uni.gain": self.ln_uni_gain,
            "ln_uni.bias": self.ln_uni_bias,
            "ln_bi.gain": self.ln_bi_gain,
            "ln_bi.bias": self.ln_bi_bias,
        }


def _check_input(state: NGrammerState, x: Tensor):
    cfg = state.cfg
    if x.ndim < 3 or x.shape[-2] != cfg.h or x.shape[-1] != cfg.d:
        raise ValueError(
            f"layer input must be (..., l, {cfg.h}, {cfg.d}), got {x.shape}"
        )
    if not np.isfinite(x.data).all():
        raise ValueError("layer input must be finite")


def _augment(state: NGrammerState, x: Tensor, z) -> Tensor:
    cfg = state.cfg
    b = bigram_ids(z, cfg.k)
    ids = hash_to_vocab(b, state.hash_family)
    y = lookup(state.table, ids, x.tape)  # (..., l, h, d_b)
    xn = layer_norm(x, state.ln_uni_gain, state.ln_uni_bias, cfg.eps_ln)
    yn = layer_norm(y, state.ln_bi_gain, state.ln_bi_bias, cfg.eps_ln)
    return concat_last(xn, yn)  # (..., l, h, d + d_b)


def ngrammer_forward(state: NGrammerState, x: Tensor, training=None) -> Tensor:
    """Augment (l, h, d) inputs to (l, h, d + d_b); leading batch dims allowed.

    While training, the same detached batch also drives one k-means step
    (assignments are taken before the centers move). Gradients reach x and
    the LN parameters densely and the bigram table sparsely; none reach the
    codebook.
    """
    _check_input(state, x)
    if training is None:
        training = state.mode == "training"
    if training:
        z = kmeans_step(state.codebook, x.data, state.cfg.kmeans_lr)
    else:
        z = assign(state.codebook, x.data)
    return _augment(state, x, z)


def ngrammer_forward_cached(state: NGrammerState, token_ids, cache, x: Tensor) -> Tensor:
    """forward() with latents read from a token-keyed cache in O(1) per token.

    Requires a frozen state and a cache built from the same codebook and the
    embedding table that produced x; output is bit-identical to the scan path.
    """
    if state.mode != "frozen" or not state.codebook.frozen:
        raise ValueError("cached forward requires a frozen layer state")
    if cache.fingerprint != state.codebook.fingerprint():
        raise StaleCacheError(
            f"cache fingerprint {cache.fingerprint:#018x} does not match codebook "
            f"{state.codebook.fingerprint():#018x}"
        )
    _check_input(state, x)
    token_ids = np.asarray(token_ids)
    if token_ids.shape != x.shape[:-2]:
        raise ValueError(
            f"token ids {token_ids.shape} do not match input positions {x.shape[:-2]}"
        )
    z = cache.latents[token_ids]  # (..., l, h)
    return _augment(state, x, z)


def resolve_position(position, n_blocks: int) -> int:
    """Map a layer-position name to the block index the layer comes after.

    0 means the embedding output (the default); "begin"/"mid"/"end" follow
    the after-first/after-middle/after-last convention; an integer n means
    after block n.
    """
    if n_blocks < 1:
        raise ValueError(f"model needs at least one block, got {n_blocks}")
    named = {
        "embedding": 0,
        "begin": 1,
        "mid": max(1, n_blocks // 2),
        "end": n_blocks,
    }
    if isinstance(position, str):
        if position not in named:
            raise ValueError(
                f"unknown layer position {position!r}; expected one of "
                f"{sorted(named)} or an integer"
            )
        return named[position]
    idx = int(position)
    if not 0 <= idx <= n_blocks:
        raise ValueError(f"layer position {idx} outside [0, {n_blocks}]")
    return idx
