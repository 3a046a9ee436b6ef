"""Desk-scale decoder-only transformer with the latent n-gram layer.

Pre-layer-norm causal blocks with a gated-GELU feed-forward, learned
absolute positions, and an untied output projection. Dense parameters
train with Adam under global-norm clipping; the bigram table trains with
sparse Adagrad on the shared warmup-then-constant schedule; the codebook
trains by one mini-batch k-means step per training step. Training is
single threaded over one tape per step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ngrammer.bigram_table import adagrad_update
from ngrammer.codebook import freeze, init_from_batch
from ngrammer.layer import (
    NGrammerConfig,
    NGrammerState,
    ngrammer_forward,
    ngrammer_forward_cached,
    resolve_position,
)
from ngrammer.tensor import (
    NumericError,
    Tape,
    Tensor,
    add,
    cross_entropy_with_logits,
    embedding_gather,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    scale,
    softmax,
    transpose,
)

__all__ = [
    "DataError",
    "ModelConfig",
    "TrainConfig",
    "Model",
    "build_model",
    "train",
    "evaluate_ppl",
    "freeze_model",
    "clip_global_norm",
]

_NEG_MASK = -1e30  # additive causal mask; exp underflows to exactly 0


class DataError(ValueError):
    """A data stream or split cannot serve the requested operation."""


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    width: int = 64  # model width downstream of the n-gram insertion
    heads: int = 4
    ffn_mult: int = 4
    vocab: int = 256
    seq_len: int = 32
    ngrammer: NGrammerConfig | None = None
    position: str | int = "embedding"  # where the n-gram layer is inserted
    position_scheme: str = "learned-absolute"

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.ffn_mult < 1:
            raise ValueError("layers, heads and ffn_mult must be >= 1")
        if self.vocab < 2 or self.seq_len < 2:
            raise ValueError("vocab must be >= 2 and seq_len >= 2")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.position_scheme != "learned-absolute":
            raise ValueError(f"unsupported position scheme {self.position_scheme!r}")
        ins = resolve_position(self.position, self.layers)
        if self.ngrammer is not None:
            ng = self.ngrammer
            if ng.width_out != self.width:
                raise ValueError(
                    f"h*(d+d_b) = {ng.width_out} must equal the model width {self.width}"
                )
            if ins > 0 and (ng.h * ng.d) % self.heads != 0:
                raise ValueError(
                    f"upstream width {ng.h * ng.d} not divisible by heads {self.heads}"
                )

    @property
    def insertion(self) -> int:
        return resolve_position(self.position, self.layers)

    @property
    def embed_width(self) -> int:
        if self.ngrammer is None:
            return self.width
        return self.ngrammer.h * self.ngrammer.d

    def block_width(self, i: int) -> int:
        if self.ngrammer is None or i >= self.insertion:
            return self.width
        return self.embed_width


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 8
    steps: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-10
    clip_norm: float = 5.0
    warmup: int = 100  # constant schedule after linear warmup
    table_lr: float = 0.1
    seed: int = 0
    freeze_at_end: bool = True

    def schedule(self, step: int) -> float:
        if self.warmup <= 0:
            return 1.0
        return min(1.0, (step + 1) / self.warmup)


class Model:
    """Parameter store plus the per-step forward graph."""

    def __init__(self, cfg: ModelConfig, seed: int, params, ngram: NGrammerState | None):
        self.cfg = cfg
        self.seed = seed
        self.params = params  # name -> Tensor, fixed creation order
        self.ngram = ngram
        self._masks = {}

    # -- plumbing ------------------------------------------------------------

    def attach(self, tape):
        """Point every dense parameter at the step's tape and clear gradients."""
        for p in self.params.values():
            p.tape = tape
            p.grad = None
        if self.ngram is not None:
            self.ngram.table.sparse_grad = None

    def num_params(self) -> int:
        n = sum(p.data.size for p in self.params.values())
        if self.ngram is not None:
            n += self.ngram.table.weights.size
        return n

    def _mask(self, l: int) -> Tensor:
        if l not in self._masks:
            m = np.triu(np.full((l, l), _NEG_MASK), k=1)
            self._masks[l] = Tensor(m)
        return self._masks[l]

    # -- forward -------------------------------------------------------------

    def _attention(self, x: Tensor, i: int) -> Tensor:
        p = self.params
        nb, l, w = x.shape
        heads = self.cfg.heads
        dh = w // heads
        a = layer_norm(x, p[f"block{i}.attn.ln.gain"], p[f"block{i}.attn.ln.bias"])
        q = add(matmul(a, p[f"block{i}.attn.wq"]), p[f"block{i}.attn.bq"])
        k = add(matmul(a, p[f"block{i}.attn.wk"]), p[f"block{i}.attn.bk"])
        v = add(matmul(a, p[f"block{i}.attn.wv"]), p[f"block{i}.attn.bv"])
        q = transpose(reshape(q, (nb, l, heads, dh)), (0, 2, 1, 3))
        k = transpose(reshape(k, (nb, l, heads, dh)), (0, 2, 1, 3))
        v = transpose(reshape(v, (nb, l, heads, dh)), (0, 2, 1, 3))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), dh**-0.5)
        att = softmax(add(scores, self._mask(l)))
        ctx = matmul(att, v)  # (nb, heads, l, dh)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (nb, l, w))
        return add(matmul(ctx, p[f"block{i}.attn.wo"]), p[f"block{i}.attn.bo"])

    def _ffn(self, x: Tensor, i: int) -> Tensor:
        p = self.params
        a = layer_norm(x, p[f"block{i}.ffn.ln.gain"], p[f"block{i}.ffn.ln.bias"])
        u = add(matmul(a, p[f"block{i}.ffn.wu"]), p[f"block{i}.ffn.bu"])
        g = gelu(add(matmul(a, p[f"block{i}.ffn.wg"]), p[f"block{i}.ffn.bg"]))
        return add(matmul(mul(g, u), p[f"block{i}.ffn.wo"]), p[f"block{i}.ffn.bo"])

    def _block(self, x: Tensor, i: int) -> Tensor:
        x = add(x, self._attention(x, i))
        return add(x, self._ffn(x, i))

    def _insert_ngram(self, x: Tensor, tokens, training, latent_cache) -> Tensor:
        ng = self.ngram
        nb, l, _ = x.shape
        x4 = reshape(x, (nb, l, ng.cfg.h, ng.cfg.d))
        if latent_cache is not None:
            w = ngrammer_forward_cached(ng, tokens, latent_cache, x4)
        else:
            w = ngrammer_forward(ng, x4, training=training)
        return reshape(w, (nb, l, self.cfg.width))

    def forward(self, tokens, training=False, latent_cache=None) -> Tensor:
        """Next-token logits, (batch, l, vocab); attach() the step's tape first."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        nb, l = tokens.shape
        if l > self.cfg.seq_len:
            raise ValueError(f"sequence length {l} exceeds configured {self.cfg.seq_len}")
        cfg = self.cfg
        p = self.params
        ins = cfg.insertion
        if latent_cache is not None and (self.ngram is None or ins != 0):
            raise ValueError("latent cache requires the n-gram layer at the embedding")
        positions = embedding_gather(p["pos_emb"], np.arange(l))  # (l, pos width)
        x = embedding_gather(p["tok_emb"], tokens)  # (nb, l, embed width)
        if self.ngram is not None and ins == 0:
            # layer input is the bare token embedding, so the token-keyed
            # latent cache stays exact; positions join afterwards
            x = self._insert_ngram(x, tokens, training, latent_cache)
            x = add(x, positions)
        else:
            x = add(x, positions)
        for i in range(cfg.layers):
            if self.ngram is not None and ins == i and ins > 0:
                x = self._insert_ngram(x, tokens, training, latent_cache)
            x = self._block(x, i)
        if self.ngram is not None and ins == cfg.layers and ins > 0:
            x = self._insert_ngram(x, tokens, training, latent_cache)
        x = layer_norm(x, p["final_ln.gain"], p["final_ln.bias"])
        return add(matmul(x, p["out.w"]), p["out.b"])

    def loss(self, tokens, targets, training=False, latent_cache=None) -> Tensor:
        logits = self.forward(tokens, training, latent_cache)
        targets = np.asarray(targets)
        if targets.ndim == 1:
            targets = targets[None, :]
        return cross_entropy_with_logits(logits, targets)


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Deterministic init; the codebook starts from the token-embedding rows."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    params = {}

    def normal(name, shape, std):
        params[name] = Tensor(rng.normal(0.0, std, size=shape))

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape))

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape))

    emb_w = cfg.embed_width
    # small embedding init: training movement, not the random init, should
    # dominate the geometry the codebook clusters
    normal("tok_emb", (cfg.vocab, emb_w), 0.1)
    pos_w = cfg.width if (cfg.ngrammer is not None and cfg.insertion == 0) else emb_w
    normal("pos_emb", (cfg.seq_len, pos_w), 0.1)
    for i in range(cfg.layers):
        w = cfg.block_width(i)
        hidden = cfg.ffn_mult * w
        ones(f"block{i}.attn.ln.gain", (w,))
        zeros(f"block{i}.attn.ln.bias", (w,))
        for proj in ("wq", "wk", "wv", "wo"):
            normal(f"block{i}.attn.{proj}", (w, w), w**-0.5)
        for b in ("bq", "bk", "bv", "bo"):
            zeros(f"block{i}.attn.{b}", (w,))
        ones(f"block{i}.ffn.ln.gain", (w,))
        zeros(f"block{i}.ffn.ln.bias", (w,))
        normal(f"block{i}.ffn.wu", (w, hidden), w**-0.5)
        zeros(f"block{i}.ffn.bu", (hidden,))
        normal(f"block{i}.ffn.wg", (w, hidden), w**-0.5)
        zeros(f"block{i}.ffn.bg", (hidden,))
        normal(f"block{i}.ffn.wo", (hidden, w), hidden**-0.5)
        zeros(f"block{i}.ffn.bo", (w,))
    ones("final_ln.gain", (cfg.width,))
    zeros("final_ln.bias", (cfg.width,))
    # small output scale keeps the initial softmax near uniform
    normal("out.w", (cfg.width, cfg.vocab), 1.0 / cfg.width)
    zeros("out.b", (cfg.vocab,))

    ngram = None
    if cfg.ngrammer is not None:
        ng = cfg.ngrammer
        if cfg.vocab < ng.k:
            raise ValueError(
                f"token vocabulary {cfg.vocab} must be >= k={ng.k} to seed the codebook"
            )
        rows = params["tok_emb"].data.reshape(cfg.vocab, ng.h, ng.d)
        codebook = init_from_batch(rows, ng.k, ng.seed)
        ngram = NGrammerState.create(ng, codebook)
        for name, tensor in ngram.ln_params().items():
            params[f"ngrammer.{name}"] = tensor
    return Model(cfg, seed, params, ngram)


def freeze_model(model: Model) -> Model:
    """Fix the token-to-latent mapping; required before evaluation/serving."""
    if model.ngram is not None:
        freeze(model.ngram.codebook)
        model.ngram.mode = "frozen"
    return model


def clip_global_norm(grads, max_norm: float, sparse=None):
    """Scale dense grads (and a SparseGrad, if any) so the joint norm <= max_norm.

    Returns the pre-clip global norm. Never increases the norm.
    """
    sq = sum(float((g * g).sum()) for g in grads.values())
    if sparse is not None:
        sq += sparse.sq_norm()
    norm = float(np.sqrt(sq))
    if norm > max_norm and norm > 0:
        c = max_norm / norm
        for g in grads.values():
            g *= c
        if sparse is not None:
            sparse.values *= c
    return norm


class AdamState:
    """Bias-corrected Adam over a dict of named dense parameters."""

    def __init__(self, params, beta1, beta2, eps):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def update(self, params, grads, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(model: Model, corpus, tcfg: TrainConfig):
    """Run the full pipeline for tcfg.steps; returns the per-step log.

    Log records are dicts with step, loss, grad_norm (pre-clip, joint over
    dense and sparse grads) and wall_ms. Raises NumericError on a
    non-finite loss, naming the step.
    """
    cfg = model.cfg
    l = cfg.seq_len
    need = tcfg.steps * tcfg.batch * l + 1
    stream = corpus.train_stream(need)
    if stream.size < need:
        raise DataError(f"training stream has {stream.size} tokens, need {need}")
    adam = AdamState(model.params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    log = []
    for step in range(tcfg.steps):
        t0 = time.perf_counter()
        base = step * tcfg.batch * l
        x = stream[base : base + tcfg.batch * l].reshape(tcfg.batch, l)
        y = stream[base + 1 : base + 1 + tcfg.batch * l].reshape(tcfg.batch, l)
        tape = Tape()
        model.attach(tape)
        loss = model.loss(x, y, training=True)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericError(f"non-finite loss {loss_val} at step {step}")
        tape.backward(loss)
        grads = {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in model.params.items()
        }
        sparse = model.ngram.table.sparse_grad if model.ngram is not None else None
        norm = clip_global_norm(grads, tcfg.clip_norm, sparse)
        sched = tcfg.schedule(step)
        adam.update(model.params, grads, tcfg.lr * sched)
        if sparse is not None and tcfg.table_lr * sched > 0:
            adagrad_update(model.ngram.table, sparse, tcfg.table_lr * sched)
        log.append(
            {
                "step": step,
                "loss": loss_val,
                "grad_norm": norm,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
        )
    if tcfg.freeze_at_end:
        freeze_model(model)
    return log


def evaluate_ppl(model: Model, stream, batch: int = 8, latent_cache=None) -> float:
    """exp(mean next-token cross entropy in nats) over a held-out stream."""
    if model.ngram is not None and model.ngram.mode != "frozen":
        raise ValueError("evaluation requires a frozen model")
    stream = np.asarray(stream)
    l = model.cfg.seq_len
    windows = (stream.size - 1) // l
    if windows <= 0:
        raise DataError(f"held-out stream of {stream.size} tokens has no full window")
    model.attach(None)
    total = 0.0
    count = 0
    for lo in range(0, windows, batch):
        nb = min(batch, windows - lo)
        base = lo * l
        x = stream[base : base + nb * l].reshape(nb, l)
        y = stream[base + 1 : base + 1 + nb * l].reshape(nb, l)
        loss = model.loss(x, y, training=False, latent_cache=latent_cache)
        total += loss.item() * (nb * l)
        count += nb * l
    return float(np.exp(total / count))
