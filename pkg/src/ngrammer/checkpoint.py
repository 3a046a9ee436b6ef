"""Single-file checkpoints: a manifest plus concatenated binary segments.

Layout: magic line, u64 manifest length, manifest JSON (sorted keys), then
raw segment bytes back to back. The codebook and bigram-table segments use
their own magic-tagged formats; dense parameters and the layer's LN
parameters are stored as named float64 tensors. All integers and floats
are little-endian; checkpoint bytes are deterministic for a given model.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ngrammer.bigram_table import BigramTable
from ngrammer.codebook import Codebook
from ngrammer.hashing import HashFamily
from ngrammer.layer import NGrammerConfig, NGrammerState
from ngrammer.lm import Model, ModelConfig, build_model

__all__ = ["save_checkpoint", "load_checkpoint", "model_config_to_dict", "model_config_from_dict"]

MAGIC = b"NGRAMCKPT1\n"


def model_config_to_dict(cfg: ModelConfig) -> dict:
    ng = None
    if cfg.ngrammer is not None:
        ng = {
            "k": cfg.ngrammer.k,
            "v": cfg.ngrammer.v,
            "h": cfg.ngrammer.h,
            "d": cfg.ngrammer.d,
            "d_b": cfg.ngrammer.d_b,
            "seed": cfg.ngrammer.seed,
            "eps_ln": cfg.ngrammer.eps_ln,
            "kmeans_lr": cfg.ngrammer.kmeans_lr,
        }
    return {
        "layers": cfg.layers,
        "width": cfg.width,
        "heads": cfg.heads,
        "ffn_mult": cfg.ffn_mult,
        "vocab": cfg.vocab,
        "seq_len": cfg.seq_len,
        "position": cfg.position,
        "position_scheme": cfg.position_scheme,
        "ngrammer": ng,
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    ng = d.get("ngrammer")
    return ModelConfig(
        layers=d["layers"],
        width=d["width"],
        heads=d["heads"],
        ffn_mult=d["ffn_mult"],
        vocab=d["vocab"],
        seq_len=d["seq_len"],
        position=d["position"],
        position_scheme=d.get("position_scheme", "learned-absolute"),
        ngrammer=NGrammerConfig(**ng) if ng is not None else None,
    )


def _pack_named_tensors(tensors: dict) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def _unpack_named_tensors(raw: bytes) -> dict:
    (count,) = struct.unpack_from("<I", raw, 0)
    off = 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    return out


def save_checkpoint(path, model: Model, run_config: dict = None):
    ln_names = {k for k in model.params if k.startswith("ngrammer.")}
    dense = {k: p.data for k, p in model.params.items() if k not in ln_names}
    segments = {"dense": _pack_named_tensors(dense)}
    fingerprints = {}
    if model.ngram is not None:
        segments["codebook"] = model.ngram.codebook.to_bytes()
        segments["hash_family"] = model.ngram.hash_family.to_bytes()
        segments["table"] = model.ngram.table.to_bytes()
        segments["ngram_ln"] = _pack_named_tensors(
            {k: model.params[k].data for k in sorted(ln_names)}
        )
        fingerprints["codebook"] = f"{model.ngram.codebook.fingerprint():016x}"
    offsets = {}
    off = 0
    for name in sorted(segments):
        offsets[name] = [off, len(segments[name])]
        off += len(segments[name])
    manifest = {
        "format": "ngrammer-checkpoint-v1",
        "model_config": model_config_to_dict(model.cfg),
        "seed": model.seed,
        "frozen": bool(model.ngram is not None and model.ngram.codebook.frozen),
        "segments": offsets,
        "fingerprints": fingerprints,
        "run_config": run_config,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in sorted(segments):
            f.write(segments[name])


def load_checkpoint(path):
    """Rebuild the model exactly; returns (model, manifest)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError("bad checkpoint magic")
    (mlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    base = len(MAGIC) + 8
    manifest = json.loads(raw[base : base + mlen].decode("utf-8"))
    seg_base = base + mlen

    def seg(name):
        off, length = manifest["segments"][name]
        return raw[seg_base + off : seg_base + off + length]

    cfg = model_config_from_dict(manifest["model_config"])
    model = build_model(cfg, manifest["seed"])
    dense = _unpack_named_tensors(seg("dense"))
    for k, arr in dense.items():
        model.params[k].data[...] = arr
    if model.ngram is not None:
        frozen = manifest["frozen"]
        codebook = Codebook.from_bytes(seg("codebook"), frozen=frozen)
        fam = HashFamily.from_bytes(seg("hash_family"))
        table = BigramTable.from_bytes(seg("table"))
        for k, arr in _unpack_named_tensors(seg("ngram_ln")).items():
            model.params[k].data[...] = arr
        state = model.ngram
        state.codebook = codebook
        state.hash_family = fam
        state.table = table
        state.mode = "frozen" if frozen else "training"
        expect = manifest["fingerprints"].get("codebook")
        if expect is not None and f"{codebook.fingerprint():016x}" != expect:
            raise ValueError("codebook fingerprint mismatch in checkpoint")
    return model, manifest
