"""Command-line front end: train, eval, ablate-position, build-cache, inspect, bench.

Runs are driven by a strict JSON config (unknown keys rejected; every field
except the seed has a default), so a config file plus a seed reproduces a
run exactly. Flags carry only paths and overrides. Exit codes: 0 success,
2 configuration error, 3 numeric failure. All outputs are UTF-8 with LF
line endings; NGRAMMER_SEED overrides the config seed.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

from ngrammer.checkpoint import load_checkpoint, save_checkpoint
from ngrammer.corpus import gen_corpus
from ngrammer.latent import LatentCache, bench_latent_paths, build_cache, inspect_clusters
from ngrammer.layer import NGrammerConfig
from ngrammer.lm import (
    DataError,
    ModelConfig,
    TrainConfig,
    build_model,
    evaluate_ppl,
    train,
)
from ngrammer.tensor import NumericError

__all__ = ["RunConfig", "ConfigError", "load_config", "parse_config", "serialize_config", "main"]


class ConfigError(ValueError):
    """Configuration file cannot be parsed or validated."""


@dataclass(frozen=True)
class ModelSection:
    layers: int = 2
    width: int = 64
    heads: int = 4
    ffn_mult: int = 4
    vocab: int = 256
    seq_len: int = 32
    position: str = "embedding"


@dataclass(frozen=True)
class NgrammerSection:
    k: int = 64
    v: int = 4096
    h: int = 4
    d: int = 12
    d_b: int = 4
    kmeans_lr: float = 1e-3
    eps_ln: float = 1e-5


@dataclass(frozen=True)
class TrainSection:
    batch: int = 8
    steps: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-10
    clip_norm: float = 5.0
    warmup: int = 100
    table_lr: float = 0.1


@dataclass(frozen=True)
class DataSection:
    alpha: float = 0.1
    groups: int | None = 64
    topics: int | None = 8
    heldout: int = 16384
    corpus_seed: int | None = None  # defaults to the run seed


@dataclass(frozen=True)
class IoSection:
    out_dir: str = "runs/out"


@dataclass(frozen=True)
class RunConfig:
    seed: int
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    ngrammer: NgrammerSection | None = NgrammerSection()
    data: DataSection = DataSection()
    io: IoSection = IoSection()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": asdict(self.model),
            "train": asdict(self.train),
            "ngrammer": asdict(self.ngrammer) if self.ngrammer is not None else None,
            "data": asdict(self.data),
            "io": asdict(self.io),
        }


def _build_section(cls, raw, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    fields = cls.__dataclass_fields__
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in section {name!r}")
    kwargs = {}
    for key, value in raw.items():
        ann = str(fields[key].type)
        if value is None:
            if "None" not in ann:
                raise ConfigError(f"{name}.{key} may not be null")
            kwargs[key] = None
            continue
        if ann.startswith("int"):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}.{key} must be an integer, got {value!r}")
        elif ann.startswith("float"):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number, got {value!r}")
            value = float(value)
        elif ann.startswith("str") and not isinstance(value, str):
            raise ConfigError(f"{name}.{key} must be a string, got {value!r}")
        kwargs[key] = value
    return cls(**kwargs)


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    known = {"seed", "model", "train", "ngrammer", "data", "io"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} at the top level")
    if "seed" not in raw:
        raise ConfigError("field 'seed' is mandatory")
    seed = raw["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    ng_raw = raw.get("ngrammer", {})
    return RunConfig(
        seed=seed,
        model=_build_section(ModelSection, raw.get("model", {}), "model"),
        train=_build_section(TrainSection, raw.get("train", {}), "train"),
        ngrammer=None if ng_raw is None else _build_section(NgrammerSection, ng_raw, "ngrammer"),
        data=_build_section(DataSection, raw.get("data", {}), "data"),
        io=_build_section(IoSection, raw.get("io", {}), "io"),
    )


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    cfg = parse_config(raw)
    env_seed = os.environ.get("NGRAMMER_SEED")
    if env_seed is not None:
        try:
            cfg = RunConfig(**{**cfg.__dict__, "seed": int(env_seed)})
        except ValueError as e:
            raise ConfigError(f"NGRAMMER_SEED must be an integer, got {env_seed!r}") from e
    return cfg


def _model_config(cfg: RunConfig, position=None) -> ModelConfig:
    m = cfg.model
    ng = None
    if cfg.ngrammer is not None:
        g = cfg.ngrammer
        ng = NGrammerConfig(
            k=g.k, v=g.v, h=g.h, d=g.d, d_b=g.d_b,
            seed=cfg.seed, eps_ln=g.eps_ln, kmeans_lr=g.kmeans_lr,
        )
    try:
        return ModelConfig(
            layers=m.layers,
            width=m.width,
            heads=m.heads,
            ffn_mult=m.ffn_mult,
            vocab=m.vocab,
            seq_len=m.seq_len,
            ngrammer=ng,
            position=m.position if position is None else position,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        batch=t.batch, steps=t.steps, lr=t.lr, beta1=t.beta1, beta2=t.beta2,
        adam_eps=t.adam_eps, clip_norm=t.clip_norm, warmup=t.warmup,
        table_lr=t.table_lr, seed=cfg.seed,
    )


def _corpus(cfg: RunConfig):
    d = cfg.data
    seed = cfg.seed if d.corpus_seed is None else d.corpus_seed
    try:
        return gen_corpus(
            cfg.model.vocab, seed, alpha=d.alpha, groups=d.groups, topics=d.topics
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _train_once(cfg: RunConfig, out_dir: Path, position=None):
    corpus = _corpus(cfg)
    model = build_model(_model_config(cfg, position), cfg.seed)
    log = train(model, corpus, _train_config(cfg))
    ppl = evaluate_ppl(model, corpus.heldout_stream(cfg.data.heldout), batch=cfg.train.batch)
    if not math.isfinite(ppl):
        raise NumericError(f"non-finite held-out perplexity {ppl} after {len(log)} steps")
    lines = ["step\tloss\tgrad_norm\twall_ms"]
    for rec in log:
        lines.append(
            f"{rec['step']}\t{rec['loss']!r}\t{rec['grad_norm']!r}\t{rec['wall_ms']:.3f}"
        )
    _write(out_dir / "train_log.tsv", "\n".join(lines) + "\n")
    metrics = {
        "final_loss": log[-1]["loss"],
        "perplexity": ppl,
        "steps": len(log),
        "num_params": model.num_params(),
    }
    _write(out_dir / "metrics.json", json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    save_checkpoint(out_dir / "checkpoint.bin", model, run_config=cfg.to_dict())
    return model, ppl, metrics


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out if args.out else cfg.io.out_dir)
    _, ppl, metrics = _train_once(cfg, out_dir)
    print(f"trained {metrics['steps']} steps; final loss {metrics['final_loss']:.4f}; "
          f"held-out perplexity {ppl:.4f}")
    print(f"outputs in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    model, manifest = load_checkpoint(args.ckpt)
    run_cfg = manifest.get("run_config")
    if run_cfg is None:
        raise ConfigError("checkpoint carries no run config; cannot rebuild the corpus")
    cfg = parse_config(run_cfg)
    corpus = _corpus(cfg)
    cache = None
    if args.use_cache:
        cache = build_cache(
            model.params["tok_emb"].data, model.ngram.codebook
        ) if model.ngram is not None else None
        if cache is None:
            raise ConfigError("--use-cache requires a model with the n-gram layer")
    ppl = evaluate_ppl(
        model, corpus.heldout_stream(cfg.data.heldout), batch=cfg.train.batch, latent_cache=cache
    )
    print(f"perplexity\t{ppl!r}")
    return 0


def cmd_ablate_position(args) -> int:
    cfg = load_config(args.config)
    if cfg.ngrammer is None:
        raise ConfigError("ablate-position requires the n-gram layer to be enabled")
    out_dir = Path(args.out if args.out else cfg.io.out_dir)
    rows = []
    for position in ("embedding", "begin", "mid", "end"):
        _, ppl, _ = _train_once(cfg, out_dir / position, position=position)
        rows.append((position, ppl))
        print(f"{position}\t{ppl:.4f}")
    table = "position\tperplexity\n" + "".join(f"{p}\t{ppl!r}\n" for p, ppl in rows)
    _write(out_dir / "ablation.tsv", table)
    return 0


def cmd_build_cache(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    if model.ngram is None:
        raise ConfigError("checkpoint has no n-gram layer; nothing to cache")
    if model.cfg.insertion != 0:
        raise ConfigError("the latent cache requires the layer at the embedding position")
    cache = build_cache(model.params["tok_emb"].data, model.ngram.codebook)
    cache.save(args.out)
    print(f"cached {cache.vocab} tokens x {cache.h} heads -> {args.out}")
    return 0


def cmd_inspect(args) -> int:
    if args.cache:
        cache = LatentCache.load(args.cache)
    else:
        model, _ = load_checkpoint(args.ckpt)
        if model.ngram is None:
            raise ConfigError("checkpoint has no n-gram layer; nothing to inspect")
        cache = build_cache(model.params["tok_emb"].data, model.ngram.codebook)
    if args.names:
        names = Path(args.names).read_text(encoding="utf-8").splitlines()
    else:
        names = [f"t{i}" for i in range(cache.vocab)]
    report = inspect_clusters(cache, names)
    text = report.to_tsv(top_n=None if args.full else args.top)
    if args.out:
        _write(Path(args.out), text)
        print(f"report -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    k_values = [int(x) for x in args.k.split(",")]
    rows = bench_latent_paths(k_values, tokens=args.tokens, seed=args.seed)
    lines = ["k\tscan_ns_per_token\tcached_ns_per_token"]
    for r in rows:
        lines.append(f"{r['k']}\t{r['scan_ns']:.0f}\t{r['cached_ns']:.0f}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        _write(Path(args.out), text)
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ngrammer", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("config")
    t.add_argument("--out", default=None, help="output directory (default: io.out_dir)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its held-out stream")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--use-cache", action="store_true", help="serve latents from a token cache")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate-position", help="train the four layer-position variants")
    a.add_argument("config")
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_ablate_position)

    b = sub.add_parser("build-cache", help="write the token-to-latent cache file")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_build_cache)

    i = sub.add_parser("inspect", help="report token clusters per head")
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--cache")
    i.add_argument("--names", default=None, help="file with one token string per line")
    i.add_argument("--top", type=int, default=10, help="clusters per head to report")
    i.add_argument("--full", action="store_true", help="dump every cluster")
    i.add_argument("--out", default=None)
    i.set_defaults(fn=cmd_inspect)

    n = sub.add_parser("bench", help="time the O(k) scan path vs the cached path")
    n.add_argument("--k", default="256,4096", help="comma-separated cluster counts")
    n.add_argument("--tokens", type=int, default=2000)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--out", default=None)
    n.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (DataError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
