"""scikit-learn style front end for training and decoding."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import EOS, RESERVED, Dataset
from .costs import CostMode
from .model import ModelConfig
from .ot import IpotConfig
from .training import Batch, TrainConfig, evaluate, greedy_decode, train


def check_sequences(X, vocab_size: int | None = None, name: str = "X") -> list[list[int]]:
    """Validate a collection of token-id sequences and return plain lists."""
    if X is None or len(X) == 0:
        raise ValueError(f"{name} must contain at least one sequence")
    out = []
    for i, seq in enumerate(X):
        seq = [int(t) for t in seq]
        if not seq:
            raise ValueError(f"{name}[{i}] is empty")
        if min(seq) < 0 or (vocab_size is not None and max(seq) >= vocab_size):
            raise ValueError(f"{name}[{i}] has token ids outside [0, {vocab_size})")
        out.append(seq)
    return out


class OTSequenceModel(BaseEstimator):
    """GRU sequence model trained with MLE, scheduled sampling, TFOT or SFOT.

    ``fit(X, y)`` learns ``y`` conditioned on ``X``; ``fit(X)`` learns ``X``
    as an unconditional language model.  ``predict`` decodes greedily with
    student forcing.
    """

    def __init__(self, objective="sfot", lam=0.1, cost="contextual_ordered", beta=0.1, ss_ratio=0.3,
                 embed_dim=64, hidden_size=64, num_layers=1, optimizer="adam", learning_rate=1e-3,
                 batch_size=32, epochs=1, max_steps=None, ipot_epsilon=0.1, ipot_iters=50,
                 vocab_size=None, seed=0):
        self.objective = objective
        self.lam = lam
        self.cost = cost
        self.beta = beta
        self.ss_ratio = ss_ratio
        self.embed_dim = embed_dim
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.ipot_epsilon = ipot_epsilon
        self.ipot_iters = ipot_iters
        self.vocab_size = vocab_size
        self.seed = seed

    def _train_config(self) -> TrainConfig:
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
            ipot=IpotConfig(epsilon=self.ipot_epsilon, outer_iters=self.ipot_iters),
            seed=self.seed,
        )

    def fit(self, X, y=None):
        X = check_sequences(X)
        if y is not None:
            y = check_sequences(y, name="y")
            if len(X) != len(y):
                raise ValueError(f"X and y have different lengths ({len(X)} vs {len(y)})")
            pairs = list(zip(X, y))
        else:
            pairs = [(None, x) for x in X]
        seen = max(max(max(s) for s in X), max(max(s) for s in y) if y is not None else 0)
        vocab_size = self.vocab_size or max(seen + 1, len(RESERVED) + 1)
        if seen >= vocab_size:
            raise ValueError(f"token id {seen} exceeds vocab_size={vocab_size}")
        model_config = ModelConfig(vocab_size, self.embed_dim, self.hidden_size, self.num_layers,
                                   conditional=y is not None)
        result = train(Dataset(pairs), self._train_config(), model_config)
        self.model_ = result.model
        self.log_ = result.log
        self.n_steps_ = result.steps
        self.conditional_ = y is not None
        return self

    def predict(self, X=None, max_len=None):
        """Greedy student-forcing decode; one output per source in ``X``."""
        check_is_fitted(self, "model_")
        if self.conditional_:
            X = check_sequences(X, self.model_.config.vocab_size)
            data = Dataset([(x, [EOS]) for x in X])
            return greedy_decode(self.model_, data, max_len=max_len or max(map(len, X)) + 5)
        n = 1 if X is None else int(X)
        data = Dataset([(None, [EOS])] * n)
        return greedy_decode(self.model_, data, max_len=max_len or 64)

    def score(self, X, y=None):
        """Corpus BLEU-4 of greedy decodes against the references."""
        check_is_fitted(self, "model_")
        if self.conditional_:
            pairs = list(zip(check_sequences(X), check_sequences(y, name="y")))
        else:
            pairs = [(None, x) for x in check_sequences(X)]
        return evaluate(self.model_, Dataset(pairs))["bleu"]

    def log_prob(self, X, y=None):
        """Per-sequence log-likelihood (EOS included) under teacher forcing."""
        check_is_fitted(self, "model_")
        pairs = list(zip(X, y)) if self.conditional_ else [(None, x) for x in X]
        batch = Batch.from_pairs(pairs)
        with torch.no_grad():
            lp = self.model_.log_prob(batch.targets, batch.lengths, batch.sources, batch.src_lengths)
        return np.asarray(lp)
