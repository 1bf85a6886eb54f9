"""MLE, scheduled-sampling, TFOT and SFOT objectives and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import EOS, Dataset
from .costs import CostKind, CostMode, FeatureSequence, LayerTag, build_cost
from .model import DTYPE, DecodeTrace, ModelConfig, SamplingPolicy, SeqModel, pad_batch, sequence_log_prob
from .ot import IpotConfig, ipot_solve_batch

logger = logging.getLogger(__name__)

OBJECTIVES = ("mle", "tfot", "sfot", "scheduled_sampling")
METRIC_COLUMNS = ("step", "epoch", "objective", "mle_term", "ot_term", "total", "wall_ms")


class DivergenceError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


TRAIN_IPOT_ITERS = 50


@dataclass
class TrainConfig:
    objective: str = "mle"
    lam: float = 0.1
    cost: CostMode = field(default_factory=CostMode)
    ss_ratio: float = 0.3
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    per_token: bool = False
    sample_policy: SamplingPolicy = field(default_factory=SamplingPolicy)
    student_slack: int = 5
    # a per-step budget; the solver's own default is tuned for standalone accuracy
    ipot: IpotConfig = field(default_factory=lambda: IpotConfig(outer_iters=TRAIN_IPOT_ITERS))
    log_wall_time: bool = False

    def __post_init__(self):
        if self.objective == "ss":
            self.objective = "scheduled_sampling"
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.ss_ratio <= 1.0:
            raise ValueError(f"ss_ratio must lie in [0, 1], got {self.ss_ratio}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True)
class LossBreakdown:
    mle_term: float
    ot_term: float
    total: float


@dataclass
class Batch:
    """Padded targets (EOS appended) plus optional padded sources."""

    targets: torch.Tensor
    lengths: torch.Tensor
    sources: torch.Tensor | None = None
    src_lengths: torch.Tensor | None = None

    @classmethod
    def from_pairs(cls, pairs) -> "Batch":
        targets, lengths = pad_batch([list(t) + [EOS] for _, t in pairs])
        if pairs[0][0] is None:
            return cls(targets, lengths)
        sources, src_lengths = pad_batch([s for s, _ in pairs])
        return cls(targets, lengths, sources, src_lengths)

    def __len__(self):
        return self.targets.shape[0]


def make_optimizer(model: SeqModel, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=config.learning_rate)
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate)


def mle_loss(trace: DecodeTrace, targets, per_token: bool = False) -> torch.Tensor:
    """Batch-mean negative log-likelihood of ``targets`` under a teacher trace."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.dim() == 1:
        targets = targets.unsqueeze(0)
    if targets.shape != trace.tokens.shape:
        raise ValueError(f"trace shape {tuple(trace.tokens.shape)} does not match targets {tuple(targets.shape)}")
    nll = -sequence_log_prob(trace, targets)
    if per_token:
        nll = nll / trace.lengths.to(DTYPE)
    return nll.mean()


def ot_regularizer(ref_features: FeatureSequence, gen_features: FeatureSequence, mode: CostMode,
                   ipot: IpotConfig | None = None) -> torch.Tensor:
    """``<M*, C>`` with the IPOT plan M* held constant for differentiation."""
    return batch_ot([ref_features], [gen_features], mode, ipot)[0]


def batch_ot(refs, gens, mode: CostMode, ipot: IpotConfig | None = None, return_plans: bool = False):
    costs = [build_cost(r, g, mode) for r, g in zip(refs, gens)]
    rows = [c.shape[0] for c in costs]
    cols = [c.shape[1] for c in costs]
    stacked = np.zeros((len(costs), max(rows), max(cols)))
    for b, c in enumerate(costs):
        stacked[b, : rows[b], : cols[b]] = _to_numpy(c)
    plans = ipot_solve_batch(stacked, rows, cols, ipot)
    values = []
    for b, c in enumerate(costs):
        M = plans[b, : rows[b], : cols[b]]
        if isinstance(c, torch.Tensor):
            values.append((torch.from_numpy(M).to(c.dtype) * c).sum())
        else:
            values.append(torch.as_tensor(float(np.sum(M * c)), dtype=DTYPE))
    values = torch.stack(values)
    if return_plans:
        return values, [plans[b, : rows[b], : cols[b]] for b in range(len(costs))]
    return values


def _to_numpy(x):
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)


def _features(trace: DecodeTrace, b: int, layer: LayerTag, embedded=None) -> FeatureSequence:
    n = int(trace.lengths[b])
    if layer is LayerTag.EMBEDDING:
        vecs = (trace.embedded if embedded is None else embedded)[b, :n]
    else:
        vecs = trace.hidden[b, :n]
    return FeatureSequence(vecs, layer)


def _step_seed(config: TrainConfig, step: int) -> int:
    return (config.seed * 1_000_003 + step) % (2**63 - 1)


def compute_loss(model: SeqModel, batch: Batch, config: TrainConfig, step: int = 0,
                 objective: str | None = None):
    """Forward passes for one objective; returns (total tensor, LossBreakdown)."""
    objective = objective or config.objective
    seed = _step_seed(config, step)
    if objective == "scheduled_sampling":
        trace = model.forward_mixed(batch.targets, batch.lengths, config.ss_ratio, seed,
                                    batch.sources, batch.src_lengths, config.sample_policy)
    else:
        trace = model.forward_teacher(batch.targets, batch.lengths, batch.sources, batch.src_lengths)
    mle = mle_loss(trace, batch.targets, config.per_token)
    if objective in ("mle", "scheduled_sampling"):
        return mle, LossBreakdown(mle.item(), 0.0, mle.item())

    layer = config.cost.layer
    ref_emb = model.embedding(batch.targets)
    refs = [_features(trace, b, layer, ref_emb) for b in range(len(batch))]
    if objective == "sfot":
        max_len = int(batch.lengths.max()) + config.student_slack
        student = model.forward_student(max_len, config.sample_policy, seed, batch.sources,
                                        batch.src_lengths, batch_size=len(batch))
        gens = [_features(student, b, layer) for b in range(len(batch))]
    else:
        gens = [_features(trace, b, layer) for b in range(len(batch))]

    if config.lam == 0:
        with torch.no_grad():
            ot = batch_ot(refs, gens, config.cost, config.ipot).mean()
        total = mle
    else:
        ot = batch_ot(refs, gens, config.cost, config.ipot).mean()
        total = mle + config.lam * ot
    breakdown = LossBreakdown(mle.item(), ot.item(), mle.item() + config.lam * ot.item())
    return total, breakdown


def _apply(model, optimizer, batch, config, step, objective) -> LossBreakdown:
    optimizer.zero_grad(set_to_none=True)
    total, breakdown = compute_loss(model, batch, config, step, objective)
    if not np.isfinite(breakdown.total):
        raise DivergenceError(f"non-finite loss at step {step}: {breakdown}")
    if total.requires_grad:
        total.backward()
    optimizer.step()
    return breakdown


def mle_step(model, optimizer, batch, config, step=0) -> LossBreakdown:
    return _apply(model, optimizer, batch, config, step, "mle")


def sfot_step(model, optimizer, batch, config, step=0) -> LossBreakdown:
    """MLE on the teacher pass plus lambda times OT between reference and one student sample."""
    return _apply(model, optimizer, batch, config, step, "sfot")


def tfot_step(model, optimizer, batch, config, step=0) -> LossBreakdown:
    return _apply(model, optimizer, batch, config, step, "tfot")


def scheduled_sampling_step(model, optimizer, batch, config, step=0) -> LossBreakdown:
    return _apply(model, optimizer, batch, config, step, "scheduled_sampling")


STEP_FUNCTIONS = {
    "mle": mle_step,
    "sfot": sfot_step,
    "tfot": tfot_step,
    "scheduled_sampling": scheduled_sampling_step,
}


@dataclass
class TrainResult:
    model: SeqModel
    log: list[dict]
    validation: list[dict]
    steps: int
    wall_seconds: float


def train(corpus: Dataset, config: TrainConfig, model_config: ModelConfig | None = None,
          model: SeqModel | None = None, dev: Dataset | None = None, eval_every: int = 0,
          on_step=None, checkpoint_every: int = 0, checkpoint_fn=None) -> TrainResult:
    """Shuffled minibatch training, deterministic given ``config.seed``.

    Stops after ``config.epochs`` or ``config.max_steps``, whichever is
    first; if only ``max_steps`` matters set ``epochs`` large.
    """
    if len(corpus) == 0:
        raise ValueError("training corpus is empty")
    torch.set_num_threads(1)
    if model is None:
        if model_config is None:
            raise ValueError("need a model or a model_config")
        model = SeqModel(model_config, seed=config.seed)
    if model.config.conditional != corpus.conditional:
        raise ValueError("model conditioning does not match the corpus")
    optimizer = make_optimizer(model, config)
    step_fn = STEP_FUNCTIONS[config.objective]
    rng = np.random.default_rng(config.seed)
    log, validation = [], []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(order), config.batch_size):
            pairs = [corpus.pairs[i] for i in order[start : start + config.batch_size]]
            tic = time.perf_counter()
            breakdown = step_fn(model, optimizer, Batch.from_pairs(pairs), config, step)
            step += 1
            row = {
                "step": step,
                "epoch": epoch,
                "objective": config.objective,
                "mle_term": breakdown.mle_term,
                "ot_term": breakdown.ot_term,
                "total": breakdown.total,
                "wall_ms": round((time.perf_counter() - tic) * 1000, 3) if config.log_wall_time else "",
            }
            log.append(row)
            if on_step is not None:
                on_step(row)
            if dev is not None and eval_every and step % eval_every == 0:
                validation.append({"step": step, **evaluate(model, dev)})
            if checkpoint_fn is not None and checkpoint_every and step % checkpoint_every == 0:
                checkpoint_fn(model, step)
            if config.max_steps is not None and step >= config.max_steps:
                return TrainResult(model, log, validation, step, time.perf_counter() - t0)
    return TrainResult(model, log, validation, step, time.perf_counter() - t0)


def greedy_decode(model: SeqModel, dataset: Dataset, max_len: int | None = None,
                  batch_size: int = 64) -> list[list[int]]:
    """Student-forcing greedy outputs for every example, EOS stripped."""
    outputs = []
    policy = SamplingPolicy("greedy")
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            pairs = dataset.pairs[start : start + batch_size]
            batch = Batch.from_pairs(pairs)
            n = max_len or int(batch.lengths.max()) + 5
            trace = model.forward_student(n, policy, 0, batch.sources, batch.src_lengths, batch_size=len(pairs))
            for b in range(len(pairs)):
                seq = trace.sequence(b)
                outputs.append(seq[:-1] if seq and seq[-1] == EOS else seq)
    return outputs


def token_accuracy(hypothesis, reference) -> float:
    """Fraction of reference positions reproduced at the same position."""
    hits = sum(1 for i, tok in enumerate(reference) if i < len(hypothesis) and hypothesis[i] == tok)
    return hits / len(reference)


def evaluate(model: SeqModel, dataset: Dataset) -> dict:
    from .metrics import bleu

    hyps = greedy_decode(model, dataset)
    refs = dataset.targets
    return {
        "exact_match": float(np.mean([h == r for h, r in zip(hyps, refs)])),
        "token_accuracy": float(np.mean([token_accuracy(h, r) for h, r in zip(hyps, refs)])),
        "bleu": bleu(hyps, refs, 4, smooth=True).score,
    }
