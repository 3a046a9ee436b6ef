"""Dense float64 tensors with a per-step reverse-mode gradient tape.

Values live in numpy arrays. Each differentiable op optionally records a
backward closure on a Tape; the tape is rebuilt for every training step
(define-by-run). Tensors without a tape are plain values: forward
evaluation on them is read-only and safe for concurrent callers, while
recording onto a Tape requires exclusive access to that tape.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "NumericError",
    "Tensor",
    "Tape",
    "matmul",
    "add",
    "scale",
    "mul",
    "concat_last",
    "reshape",
    "transpose",
    "softmax",
    "gelu",
    "layer_norm",
    "embedding_gather",
    "cross_entropy_with_logits",
    "tsum",
    "finite_diff_check",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class Tensor:
    """A dense float64 array, optionally tracked by a Tape."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None  # same shape as data once touched by backward
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        return self.data.copy()

    def accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        taped = "taped" if self.tape is not None else "constant"
        return f"Tensor(shape={self.data.shape}, {taped})"


class Tape:
    """Execution-ordered record of ops; reverse iteration drives backprop.

    A node's inputs always precede it in `nodes`, so walking the list
    backwards visits every consumer before its producers.
    """

    def __init__(self):
        self.nodes = []  # (op kind, backward closure), execution order

    def record(self, kind, backward_fn):
        self.nodes.append((kind, backward_fn))

    def backward(self, root: Tensor):
        if root.tape is not self:
            raise ValueError("root tensor was not recorded on this tape")
        root.grad = np.ones_like(root.data)
        for _, fn in reversed(self.nodes):
            fn()


def _tape_of(*parents):
    tape = None
    for p in parents:
        if isinstance(p, Tensor) and p.tape is not None:
            if tape is None:
                tape = p.tape
            elif tape is not p.tape:
                raise ValueError("operands were recorded on different tapes")
    return tape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; `b` may be 2-d and shared over the batch dims of `a`."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner-dimension mismatch: {ad.shape} x {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul batch-dimension mismatch: {ad.shape} x {bd.shape}")
    tape = _tape_of(a, b)
    out = Tensor(ad @ bd, tape)
    if tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            if a.tape is not None:
                a.accumulate(g @ np.swapaxes(bd, -1, -2))
            if b.tape is not None:
                if bd.ndim == 2 and ad.ndim > 2:
                    # shared weight: fold batch dims before contracting
                    b.accumulate(ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
                else:
                    b.accumulate(np.swapaxes(ad, -1, -2) @ g)

        tape.record("matmul", back)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may be a trailing-shape slice broadcast over `a`."""
    ad, bd = a.data, b.data
    suffix = False
    if ad.shape != bd.shape:
        if ad.ndim > bd.ndim and ad.shape[ad.ndim - bd.ndim :] == bd.shape:
            suffix = True
        else:
            raise ValueError(f"add shape mismatch: {ad.shape} + {bd.shape}")
    tape = _tape_of(a, b)
    out = Tensor(ad + bd, tape)
    if tape is not None:
        lead = tuple(range(ad.ndim - bd.ndim))

        def back():
            g = out.grad
            if g is None:
                return
            if a.tape is not None:
                a.accumulate(g)
            if b.tape is not None:
                b.accumulate(g.sum(axis=lead) if suffix else g)

        tape.record("add", back)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    tape = _tape_of(a)
    out = Tensor(a.data * s, tape)
    if tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            if a.tape is not None:
                a.accumulate(g * s)

        tape.record("scale", back)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ValueError(f"mul shape mismatch: {ad.shape} * {bd.shape}")
    tape = _tape_of(a, b)
    out = Tensor(ad * bd, tape)
    if tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            if a.tape is not None:
                a.accumulate(g * bd)
            if b.tape is not None:
                b.accumulate(g * ad)

        tape.record("mul", back)
    return out


def concat_last(*parts: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if not parts:
        raise ValueError("concat_last needs at least one tensor")
    lead = parts[0].data.shape[:-1]
    for p in parts:
        if p.data.shape[:-1] != lead:
            raise ValueError(
                f"concat_last leading-shape mismatch: {p.data.shape} vs {parts[0].data.shape}"
            )
    tape = _tape_of(*parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1), tape)
    if tape is not None:
        widths = [p.data.shape[-1] for p in parts]

        def back():
            g = out.grad
            if g is None:
                return
            off = 0
            for p, w in zip(parts, widths):
                if p.tape is not None:
                    p.accumulate(g[..., off : off + w])
                off += w

        tape.record("concat_last", back)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    tape = _tape_of(a)
    out = Tensor(a.data.reshape(shape), tape)
    if tape is not None:
        orig = a.data.shape

        def back():
            g = out.grad
            if g is None:
                return
            if a.tape is not None:
                a.accumulate(g.reshape(orig))

        tape.record("reshape", back)
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    tape = _tape_of(a)
    out = Tensor(np.transpose(a.data, axes), tape)
    if tape is not None:
        inv = tuple(np.argsort(axes))

        def back():
            g = out.grad
            if g is None:
                return
            if a.tape is not None:
                a.accumulate(np.transpose(g, inv))

        tape.record("transpose", back)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.data.shape[-1] == 0:
        raise ValueError("softmax over an empty last axis")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)
    tape = _tape_of(x)
    out = Tensor(y, tape)
    if tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            if x.tape is not None:
                x.accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

        tape.record("softmax", back)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    tape = _tape_of(x)
    out = Tensor(x.data * phi_cdf, tape)
    if tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            if x.tape is not None:
                pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
                x.accumulate(g * (phi_cdf + x.data * pdf))

        tape.record("gelu", back)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each last-axis slice (biased variance), then an affine map."""
    n = x.data.shape[-1]
    if n == 0:
        raise ValueError(f"layer_norm over an empty last axis: shape {x.data.shape}")
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ValueError(
            f"layer_norm gain/bias must have shape ({n},), got {gain.data.shape}/{bias.data.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mean) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    tape = _tape_of(x, gain, bias)
    out = Tensor(gain.data * xhat + bias.data, tape)
    if tape is not None:
        lead = tuple(range(x.data.ndim - 1))

        def back():
            g = out.grad
            if g is None:
                return
            if bias.tape is not None:
                bias.accumulate(g.sum(axis=lead))
            if gain.tape is not None:
                gain.accumulate((g * xhat).sum(axis=lead))
            if x.tape is not None:
                dxhat = g * gain.data
                x.accumulate(
                    inv
                    * (
                        dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                    )
                )

        tape.record("layer_norm", back)
    return out


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Select rows of `table`; backward scatter-adds into the touched rows only."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ValueError(f"gather ids must be integers, got dtype {ids.dtype}")
    rows = table.data.shape[0]
    if ids.size:
        lo, hi = int(ids.min()), int(ids.max())
        if lo < 0 or hi >= rows:
            bad = lo if lo < 0 else hi
            raise IndexError(f"gather id {bad} out of range for table with {rows} rows")
    tape = _tape_of(table)
    out = Tensor(table.data[ids], tape)
    if tape is not None:
        tail = table.data.shape[1:]

        def back():
            g = out.grad
            if g is None:
                return
            if table.tape is not None:
                buf = np.zeros_like(table.data)
                np.add.at(buf, ids.reshape(-1), g.reshape((-1,) + tail))
                table.accumulate(buf)

        tape.record("embedding_gather", back)
    return out


def cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood (nats) of integer targets under logits."""
    t = np.asarray(targets)
    if t.dtype.kind not in "iu":
        raise ValueError(f"targets must be integers, got dtype {t.dtype}")
    if t.shape != logits.data.shape[:-1]:
        raise ValueError(
            f"targets shape {t.shape} does not match logits positions {logits.data.shape[:-1]}"
        )
    vocab = logits.data.shape[-1]
    n = t.size
    if n == 0:
        raise ValueError("cross entropy over zero positions")
    if t.min() < 0 or t.max() >= vocab:
        raise IndexError(f"target id out of range for {vocab} classes")
    flat = logits.data.reshape(n, vocab)
    tf = t.reshape(n)
    m = flat.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=-1))
    loss = (lse - flat[np.arange(n), tf]).mean()
    tape = _tape_of(logits)
    out = Tensor(loss, tape)
    if tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            if logits.tape is not None:
                p = np.exp(flat - lse[:, None])
                p[np.arange(n), tf] -= 1.0
                logits.accumulate((float(g) / n) * p.reshape(logits.data.shape))

        tape.record("cross_entropy", back)
    return out


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    tape = _tape_of(x)
    out = Tensor(x.data.sum(), tape)
    if tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            if x.tape is not None:
                x.accumulate(np.full_like(x.data, float(g)))

        tape.record("tsum", back)
    return out


def finite_diff_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the taped gradient of f and central differences.

    The numeric side evaluates f value-only (no tape) at x +- h*e_i per
    coordinate; the relative error denominator is max(1, |numeric|).
    """
    if not (0.0 < h <= 1e-3):
        raise ValueError(f"step size must be in (0, 1e-3], got {h}")
    base = x.data

    tape = Tape()
    xt = Tensor(base.copy(), tape)
    out = f(xt)
    if out.data.size != 1:
        raise ValueError(f"f must be scalar-valued, got shape {out.data.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("f produced a non-finite value at the base point")
    tape.backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    def value_at(arr):
        v = float(f(Tensor(arr)).data)
        if not np.isfinite(v):
            raise NumericError("f produced a non-finite value during differencing")
        return v

    worst = 0.0
    for i in range(base.size):
        xp = base.copy()
        xp.flat[i] += h
        xm = base.copy()
        xm.flat[i] -= h
        numeric = (value_at(xp) - value_at(xm)) / (2.0 * h)
        err = abs(float(analytic.flat[i]) - numeric) / max(1.0, abs(numeric))
        if err > worst:
            worst = err
    return worst
