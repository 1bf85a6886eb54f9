"""BLEU, Self-BLEU, BLEU-F1, length-bucketed BLEU and temperature sweeps."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch

from .corpus import EOS
from .model import SamplingPolicy, SeqModel

__all__ = [
    "BleuReport",
    "SweepPoint",
    "bleu",
    "sentence_bleu",
    "self_bleu",
    "bleu_f1",
    "bleu_by_length",
    "default_bucket_edges",
    "temperature_sweep",
    "select_alpha",
]


@dataclass(frozen=True)
class BleuReport:
    n: int
    score: float
    brevity_penalty: float
    precisions: tuple[float, ...]


@dataclass(frozen=True)
class SweepPoint:
    alpha: float
    bleu: float
    self_bleu: float
    bleu_f1: float


def _ngrams(seq, k):
    return Counter(tuple(seq[i : i + k]) for i in range(len(seq) - k + 1))


def _is_multi(ref) -> bool:
    return len(ref) > 0 and isinstance(ref[0], (list, tuple))


class _References:
    """Max n-gram counts and lengths over a set of references for one hypothesis."""

    def __init__(self, refs, n):
        if not refs:
            raise ValueError("need at least one reference")
        self.lengths = sorted(len(r) for r in refs)
        self.max_counts = [Counter() for _ in range(n)]
        for r in refs:
            for k in range(n):
                for g, c in _ngrams(r, k + 1).items():
                    if c > self.max_counts[k][g]:
                        self.max_counts[k][g] = c

    def closest_length(self, c: int) -> int:
        # ties go to the shorter reference
        return min(self.lengths, key=lambda r: (abs(r - c), r))


def _stats(hyp, refs: _References, n):
    matches, totals = [], []
    for k in range(n):
        counts = _ngrams(hyp, k + 1)
        matches.append(sum(min(c, refs.max_counts[k][g]) for g, c in counts.items()))
        totals.append(max(len(hyp) - k, 0))
    return np.array(matches), np.array(totals), len(hyp), refs.closest_length(len(hyp))


def _score(matches, totals, hyp_len, ref_len, n, smooth) -> BleuReport:
    matches = matches.astype(np.float64)
    totals = totals.astype(np.float64)
    if smooth:
        # add-one on orders >= 2 that have no matches
        fix = (np.arange(n) >= 1) & (matches == 0)
        matches = matches + fix
        totals = totals + fix
    precisions = np.divide(matches, totals, out=np.zeros(n), where=totals > 0)
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    if np.any(precisions == 0):
        score = 0.0
    else:
        score = bp * math.exp(np.mean(np.log(precisions)))
    return BleuReport(n, float(min(score, 1.0)), bp, tuple(float(p) for p in precisions))


def bleu(hypotheses, references, n: int = 4, smooth: bool = False) -> BleuReport:
    """Corpus-level BLEU-n.

    ``references[i]`` is either one token sequence or a list of them.
    Precisions are clipped, pooled over the corpus and combined by geometric
    mean, then scaled by the brevity penalty.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches = np.zeros(n, dtype=np.int64)
    totals = np.zeros(n, dtype=np.int64)
    c = r = 0
    for hyp, ref in zip(hypotheses, references):
        refs = _References(ref if _is_multi(ref) else [ref], n)
        m, t, hl, rl = _stats(list(hyp), refs, n)
        matches += m
        totals += t
        c += hl
        r += rl
    return _score(matches, totals, c, r, n, smooth)


def sentence_bleu(hypothesis, references, n: int = 4, smooth: bool = False) -> float:
    return bleu([hypothesis], [list(references)], n, smooth).score


def self_bleu(corpus, n: int = 4, smooth: bool = False) -> float:
    """Mean BLEU of each sentence against all the others; higher is less diverse."""
    corpus = [list(s) for s in corpus]
    if len(corpus) < 2:
        raise ValueError("Self-BLEU needs at least two sentences")
    scores = [
        sentence_bleu(s, corpus[:i] + corpus[i + 1 :], n, smooth) for i, s in enumerate(corpus)
    ]
    return float(np.mean(scores))


def bleu_f1(bleu_score: float, self_bleu_score: float) -> float:
    """Harmonic mean of BLEU and 1 - Self-BLEU."""
    for name, v in (("bleu", bleu_score), ("self_bleu", self_bleu_score)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    diversity = 1.0 - self_bleu_score
    denom = bleu_score + diversity
    if denom == 0:
        return 0.0
    return 2.0 * bleu_score * diversity / denom


def default_bucket_edges(lengths, width: int = 10) -> list[int]:
    hi = max(lengths)
    edges = list(range(0, hi + 1, width))
    if edges[-1] < hi:
        edges.append(edges[-1] + width)
    if len(edges) < 2:
        edges.append(width)
    return edges


def bleu_by_length(hypotheses, references, bucket_edges, n: int = 4, smooth: bool = False):
    """BLEU per reference-length bucket.

    Buckets are ``[e_k, e_{k+1})`` except the last, which also includes its
    upper edge.  Returns ``(bounds, report or None, count)`` per bucket.
    """
    edges = list(bucket_edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be strictly increasing with at least two entries")
    members = [[] for _ in range(len(edges) - 1)]
    for i, ref in enumerate(references):
        length = len(ref[0]) if _is_multi(ref) else len(ref)
        if not edges[0] <= length <= edges[-1]:
            raise ValueError(f"reference length {length} outside bucket range [{edges[0]}, {edges[-1]}]")
        k = min(int(np.searchsorted(edges, length, side="right")) - 1, len(members) - 1)
        members[k].append(i)
    out = []
    for k, idx in enumerate(members):
        bounds = (edges[k], edges[k + 1])
        if not idx:
            out.append((bounds, None, 0))
            continue
        report = bleu([hypotheses[i] for i in idx], [references[i] for i in idx], n, smooth)
        out.append((bounds, report, len(idx)))
    return out


def sample_sequences(model: SeqModel, count: int, alpha: float, seed: int, max_len: int,
                     batch_size: int = 64) -> list[list[int]]:
    """Unconditional student-forcing samples at reverse temperature ``alpha``."""
    policy = SamplingPolicy("categorical", alpha)
    out = []
    with torch.no_grad():
        for k, start in enumerate(range(0, count, batch_size)):
            b = min(batch_size, count - start)
            trace = model.forward_student(max_len, policy, seed + k, batch_size=b)
            for i in range(b):
                s = trace.sequence(i)
                out.append(s[:-1] if s and s[-1] == EOS else s)
    return out


def temperature_sweep(model: SeqModel, eval_corpus, alphas, samples_per_alpha: int = 100,
                      seed: int = 0, n: int = 4, max_len: int = 64, smooth: bool = False):
    """Quality/diversity at each reverse temperature.

    Returns ``(points sorted by alpha, alpha with the highest BLEU-F1)``.
    """
    alphas = sorted(float(a) for a in alphas)
    if not alphas or any(a <= 0 for a in alphas):
        raise ValueError("alphas must be a non-empty list of positive values")
    refs = _References([list(s) for s in eval_corpus], n)
    points = []
    for a in alphas:
        samples = sample_sequences(model, samples_per_alpha, a, seed, max_len)
        quality = float(np.mean([_score(*_stats(s, refs, n), n, smooth).score for s in samples]))
        diversity = self_bleu(samples, n, smooth)
        points.append(SweepPoint(a, quality, diversity, bleu_f1(quality, diversity)))
    return points, select_alpha(points)


def select_alpha(points) -> float:
    return max(points, key=lambda p: p.bleu_f1).alpha
