"""Command-line entry point: ``sfot {train,eval,sweep,ot}``.

Run settings come from a flat YAML file (see ``RunConfig``) and can be
overridden by flags.  Precedence: flag > file > default.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .corpus import Dataset, Vocabulary, load_parallel, synth_task
from .costs import CostKind, CostMode, FeatureSequence, LayerTag, build_cost
from .metrics import bleu, bleu_by_length, bleu_f1, default_bucket_edges, self_bleu, temperature_sweep
from .model import ModelConfig, SamplingPolicy, SeqModel, load_checkpoint, save_checkpoint
from .ot import IpotConfig, ipot_solve, ot_objective
from .training import METRIC_COLUMNS, DivergenceError, TrainConfig, evaluate, greedy_decode, train

logger = logging.getLogger("sfot")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    task: str = "copy"  # copy | reverse | file
    conditional: bool = True
    train_path: str | None = None
    dev_path: str | None = None
    test_path: str | None = None
    vocab_size: int = 20
    min_len: int = 5
    max_len: int = 30
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    data_seed: int = 1234
    min_freq: int = 1
    # model
    embed_dim: int = 64
    hidden_size: int = 64
    num_layers: int = 1
    # training
    objective: str = "mle"
    lam: float = 0.1
    cost: str = "contextual_ordered"
    beta: float = 0.1
    ss_ratio: float = 0.3
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    max_steps: int | None = None
    per_token: bool = False
    sample: str = "categorical"
    alpha: float = 1.0
    log_wall_time: bool = False
    # ipot
    ipot_epsilon: float = 0.1
    ipot_outer_iters: int = 50
    ipot_inner_iters: int = 1
    ipot_tol: float = 1e-9
    # evaluation
    eval_every: int = 0
    checkpoint_every: int = 0
    bleu_n: int = 4
    bucket_width: int = 10
    bucket_edges: list | None = None
    samples_per_alpha: int = 100
    alphas: list = field(default_factory=lambda: [1.0])
    gen_max_len: int = 64
    # run
    seed: int = 0
    out: str = "runs/default"

    KEY_ALIASES = {"lambda": "lam"}

    def validate(self):
        if self.task not in ("copy", "reverse", "file"):
            raise ConfigError(f"task: expected copy, reverse or file, got {self.task!r}")
        if self.task == "file" and not self.train_path:
            raise ConfigError("train_path is required when task is 'file'")
        try:
            self.train_config()
            self.model_config(max(self.vocab_size, 5))
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.bleu_n < 1:
            raise ConfigError("bleu_n must be >= 1")
        if any(float(a) <= 0 for a in self.alphas):
            raise ConfigError("alphas must be positive")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            objective=self.objective,
            lam=self.lam,
            cost=CostMode(self.cost, self.beta),
            ss_ratio=self.ss_ratio,
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            max_steps=self.max_steps,
            seed=self.seed,
            per_token=self.per_token,
            sample_policy=SamplingPolicy(self.sample, self.alpha),
            ipot=IpotConfig(self.ipot_epsilon, self.ipot_outer_iters, self.ipot_inner_iters, self.ipot_tol),
            log_wall_time=self.log_wall_time,
        )

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.embed_dim, self.hidden_size, self.num_layers, self.conditional)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path: str | None, overrides: dict | None = None) -> "RunConfig":
        values = {}
        if path:
            try:
                raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from None
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: config must be a mapping of keys to values")
            known = {f.name for f in dataclasses.fields(cls)}
            for key, value in raw.items():
                name = cls.KEY_ALIASES.get(key, key)
                if name not in known:
                    raise ConfigError(f"{path}: unknown config key {key!r}")
                values[name] = value
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls(**values).validate()


# ---------------------------------------------------------------- data


def load_data(cfg: RunConfig):
    """Return (vocab, train, dev, test) for the configured task."""
    if cfg.task in ("copy", "reverse"):
        vocab = Vocabulary.from_size(cfg.vocab_size)
        splits = [
            synth_task(cfg.task, cfg.vocab_size, cfg.min_len, cfg.max_len, n, cfg.data_seed + k, split)
            for k, (n, split) in enumerate(((cfg.n_train, "train"), (cfg.n_dev, "dev"), (cfg.n_test, "test")))
        ]
        if not cfg.conditional:
            splits = [Dataset([(None, t) for _, t in d.pairs], d.split_tag) for d in splits]
        return (vocab, *splits)
    train_data, vocab = load_parallel(cfg.train_path, conditional=cfg.conditional, split="train",
                                       min_freq=cfg.min_freq)
    dev = load_parallel(cfg.dev_path, vocab, cfg.conditional, "dev")[0] if cfg.dev_path else None
    test = load_parallel(cfg.test_path, vocab, cfg.conditional, "test")[0] if cfg.test_path else None
    return vocab, train_data, dev, test


def write_csv(path: Path, header, rows, cfg: RunConfig):
    """CSV with a header row and a trailing ``#`` metadata line."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            values = [row[h] for h in header] if isinstance(row, dict) else row
            writer.writerow([_fmt(v) for v in values])
        fh.write(f"# config_sha256={cfg.digest()} version={__version__}\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def write_json(path: Path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig) -> int:
    torch.manual_seed(cfg.seed)
    out = Path(cfg.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    vocab, train_data, dev, _ = load_data(cfg)
    vocab.save(out / "vocab.txt")
    model_config = cfg.model_config(len(vocab))

    def checkpoint(model, step):
        save_checkpoint(model, out / "checkpoints" / f"step_{step:07d}.ckpt", {"step": step})

    t0 = time.perf_counter()
    try:
        result = train(train_data, cfg.train_config(), model_config, dev=dev, eval_every=cfg.eval_every,
                       checkpoint_every=cfg.checkpoint_every, checkpoint_fn=checkpoint)
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    save_checkpoint(result.model, out / "model.ckpt", {"step": result.steps})
    write_csv(out / "metrics.csv", METRIC_COLUMNS, result.log, cfg)
    final = result.log[-1] if result.log else {}
    summary = {
        "version": __version__,
        "steps": result.steps,
        "final": {k: final.get(k) for k in ("mle_term", "ot_term", "total")},
        "train_eval": evaluate(result.model, Dataset(train_data.pairs[:200], "train")),
        "dev_eval": evaluate(result.model, dev) if dev is not None and len(dev) else None,
        "validation": result.validation,
        "wall_seconds": time.perf_counter() - t0,
        "config": cfg.as_dict(),
    }
    write_json(out / "summary.json", summary)
    return 0


def _load_model(cfg: RunConfig, checkpoint: str, vocab_size: int) -> SeqModel:
    model, _ = load_checkpoint(checkpoint, cfg.model_config(vocab_size))
    return model


def cmd_eval(cfg: RunConfig, checkpoint: str) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab, train_data, _, test = load_data(cfg)
    test = test if test is not None and len(test) else Dataset(train_data.pairs, "test")
    model = _load_model(cfg, checkpoint, len(vocab))
    hyps = greedy_decode(model, test)
    refs = test.targets
    report = bleu(hyps, refs, cfg.bleu_n)
    edges = cfg.bucket_edges or default_bucket_edges([len(r) for r in refs], cfg.bucket_width)
    rows = []
    for (lo, hi), rep, count in bleu_by_length(hyps, refs, edges, cfg.bleu_n):
        rows.append([lo, hi, count, None if rep is None else rep.score])
    write_csv(out / "bleu_by_length.csv", ("bucket_lo", "bucket_hi", "count", "bleu"), rows, cfg)
    result = {
        "bleu": report.score,
        "brevity_penalty": report.brevity_penalty,
        "precisions": list(report.precisions),
        "n": cfg.bleu_n,
        "exact_match": float(np.mean([h == r for h, r in zip(hyps, refs)])),
        "buckets": [dict(zip(("bucket_lo", "bucket_hi", "count", "bleu"), r)) for r in rows],
    }
    header = ["bleu", "exact_match"]
    values = [result["bleu"], result["exact_match"]]
    if not cfg.conditional and len(hyps) >= 2:
        sb = self_bleu(hyps, cfg.bleu_n)
        result["self_bleu"] = sb
        result["bleu_f1"] = bleu_f1(report.score, sb)
        header += ["self_bleu", "bleu_f1"]
        values += [sb, result["bleu_f1"]]
    write_csv(out / "eval.csv", header, [values], cfg)
    write_json(out / "eval.json", result)
    return 0


def cmd_sweep(cfg: RunConfig, checkpoint: str) -> int:
    if cfg.conditional:
        print("error: temperature sweeps need an unconditional model (conditional: false)", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab, train_data, _, test = load_data(cfg)
    eval_corpus = (test if test is not None and len(test) else train_data).targets
    model = _load_model(cfg, checkpoint, len(vocab))
    points, selected = temperature_sweep(model, eval_corpus, cfg.alphas, cfg.samples_per_alpha, cfg.seed,
                                         cfg.bleu_n, cfg.gen_max_len)
    rows = [[p.alpha, p.bleu, p.self_bleu, p.bleu_f1] for p in points]
    write_csv(out / "sweep.csv", ("alpha", "bleu", "self_bleu", "bleu_f1"), rows, cfg)
    write_csv(out / "sweep_plot.csv", ("alpha", "negative_bleu", "self_bleu"),
              [[p.alpha, -p.bleu, p.self_bleu] for p in points], cfg)
    write_json(out / "sweep.json", {"points": points, "selected_alpha": selected})
    print(f"selected alpha: {selected}")
    return 0


def read_sequence(path) -> list[str]:
    tokens = Path(path).read_text(encoding="utf-8").split()
    if not tokens:
        raise ConfigError(f"{path}: empty sequence")
    return tokens


def sequence_features(tokens_a, tokens_b, mode: CostMode, checkpoint: str | None, dim: int, seed: int):
    """Features for two token lists: a model's states or random per-type embeddings."""
    if checkpoint:
        model, _ = load_checkpoint(checkpoint)
        vocab_path = Path(checkpoint).parent / "vocab.txt"
        if not vocab_path.exists():
            raise ConfigError(f"{vocab_path} not found next to the checkpoint")
        vocab = Vocabulary.load(vocab_path)
        feats = []
        with torch.no_grad():
            for toks in (tokens_a, tokens_b):
                ids = torch.as_tensor([vocab.encode(toks)])
                if mode.layer is LayerTag.EMBEDDING:
                    vecs = model.embedding(ids)[0]
                else:
                    src = ids if model.config.conditional else None
                    vecs = model.forward_teacher(ids, source=src).hidden[0]
                feats.append(FeatureSequence(vecs.numpy(), mode.layer))
        return feats
    rng = np.random.default_rng(seed)
    types = sorted(set(tokens_a) | set(tokens_b))
    table = {t: rng.standard_normal(dim) for t in types}
    return [FeatureSequence(np.stack([table[t] for t in toks]), mode.layer) for toks in (tokens_a, tokens_b)]


def cmd_ot(args) -> int:
    mode = CostMode(args.cost or "vanilla", args.beta if args.beta is not None else 0.1)
    a, b = read_sequence(args.file_a), read_sequence(args.file_b)
    fa, fb = sequence_features(a, b, mode, args.checkpoint, args.dim, args.seed)
    C = build_cost(fa, fb, mode)
    plan = ipot_solve(C, config=IpotConfig(args.epsilon, args.iters))
    distance = ot_objective(C, plan)
    print(f"{distance:.12g}")
    if args.dump_plan:
        dump = {
            "reference": a,
            "generated": b,
            "cost_mode": mode.kind.value,
            "beta": mode.beta,
            "distance": distance,
            "cost": np.asarray(C).tolist(),
            "plan": plan.matrix.tolist(),
            "converged": plan.converged,
            "iterations": plan.n_iter,
        }
        write_json(Path(args.dump_plan), dump)
    return 0


# ---------------------------------------------------------------- argparse


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--objective", choices=("mle", "tfot", "sfot", "ss"))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--cost", choices=[k.value for k in CostKind])
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics, checkpoints and a summary")
    _common(p)

    p = sub.add_parser("eval", help="BLEU (overall and per length bucket) of greedy decodes")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="BLEU / Self-BLEU / BLEU-F1 across reverse temperatures")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alphas", help="comma-separated reverse temperatures")

    p = sub.add_parser("ot", help="OT distance between two whitespace-tokenized sequences")
    p.add_argument("file_a")
    p.add_argument("file_b")
    p.add_argument("--cost", choices=[k.value for k in CostKind])
    p.add_argument("--beta", type=float)
    p.add_argument("--checkpoint", help="take features from this model (vocab.txt must sit beside it)")
    p.add_argument("--random-embedding", action="store_true", help="random Gaussian vector per token type (default)")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--dump-plan", metavar="PATH", help="write cost and plan matrices as JSON")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "ot":
            return cmd_ot(args)
        overrides = {k: getattr(args, k) for k in ("seed", "objective", "lam", "beta", "cost", "out")}
        if getattr(args, "alphas", None):
            overrides["alphas"] = [float(a) for a in args.alphas.split(",")]
        cfg = RunConfig.load(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        return cmd_sweep(cfg, args.checkpoint)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
