"""Desk-scale length-bucket comparison of training objectives on the copy task."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .corpus import Dataset, synth_task
from .costs import CostMode
from .model import ModelConfig, SeqModel
from .training import TrainConfig, greedy_decode, token_accuracy, train

DEFAULT_EDGES = (5, 10, 15, 20, 25, 30)


def bucket_accuracy(model: SeqModel, data: Dataset, edges=DEFAULT_EDGES) -> list[float]:
    """Mean student-forcing token accuracy per reference-length bucket.

    Buckets are half-open except the last, which includes its upper edge.
    Empty buckets give NaN.
    """
    hyps = greedy_decode(model, data)
    sums = np.zeros(len(edges) - 1)
    counts = np.zeros(len(edges) - 1)
    for hyp, ref in zip(hyps, data.targets):
        k = min(int(np.searchsorted(edges, len(ref), side="right")) - 1, len(sums) - 1)
        if k < 0:
            continue
        sums[k] += token_accuracy(hyp, ref)
        counts[k] += 1
    with np.errstate(invalid="ignore"):
        return (sums / counts).tolist()


@dataclass
class ExposureBiasRun:
    seed: int
    mle: list[float]
    sfot: list[float]

    @property
    def gap(self) -> np.ndarray:
        return np.asarray(self.sfot) - np.asarray(self.mle)

    @property
    def gap_non_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.gap) >= 0))


def exposure_bias_experiment(seeds=(0, 1, 2), steps: int = 3000, vocab_size: int = 20, n_train: int = 2000,
                             n_test: int = 1000, min_len: int = 5, max_len: int = 30,
                             hidden: int = 64, base: TrainConfig | None = None,
                             sfot_overrides: dict | None = None, edges=DEFAULT_EDGES, data_seed: int = 1234):
    """Train MLE and SFOT for the same step budget per seed and compare bucket accuracy."""
    train_data = synth_task("copy", vocab_size, min_len, max_len, n_train, data_seed)
    test_data = synth_task("copy", vocab_size, min_len, max_len, n_test, data_seed + 2, "test")
    base = base or TrainConfig(batch_size=32, epochs=10**6, learning_rate=0.01)
    sfot_overrides = {"lam": 0.1, "cost": CostMode("contextual_ordered", 0.1), **(sfot_overrides or {})}
    model_config = ModelConfig(vocab_size, hidden, hidden, conditional=True)
    runs = []
    for seed in seeds:
        acc = {}
        for objective in ("mle", "sfot"):
            extra = sfot_overrides if objective == "sfot" else {}
            config = dataclasses.replace(base, objective=objective, seed=seed, max_steps=steps, **extra)
            result = train(train_data, config, model_config)
            acc[objective] = bucket_accuracy(result.model, test_data, edges)
        runs.append(ExposureBiasRun(seed, acc["mle"], acc["sfot"]))
    return runs
