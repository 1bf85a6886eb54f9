"""Vocabularies, datasets and synthetic copy/reverse tasks."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

START, EOS, PAD, UNK = 0, 1, 2, 3
RESERVED = ("<s>", "</s>", "<pad>", "<unk>")
MAX_LEN = 64


class Vocabulary:
    """Token <-> id map with fixed reserved ids 0..3."""

    def __init__(self, tokens=()):
        self.id_to_token = list(RESERVED)
        self.token_to_id = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self.token_to_id[token]

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def encode(self, tokens) -> list[int]:
        if isinstance(tokens, str):
            tokens = tokens.split()
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"{path}: vocabulary must start with the reserved header {RESERVED}")
        return cls(lines[len(RESERVED):])

    @classmethod
    def from_size(cls, vocab_size: int) -> "Vocabulary":
        """Symbolic vocabulary ``t4 .. t{V-1}`` used by the synthetic tasks."""
        return cls(f"t{i}" for i in range(len(RESERVED), vocab_size))


def build_vocab(lines, min_freq: int = 1) -> Vocabulary:
    lines = list(lines)
    counts = Counter(tok for line in lines for tok in line.split())
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    # frequency-descending, ties alphabetical, so ids do not depend on line order
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class Dataset:
    """(source, target) pairs; ``source`` is None for unconditional data."""

    pairs: list[tuple[list[int] | None, list[int]]]
    split_tag: str = "train"
    truncated: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.split_tag not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {self.split_tag!r}")
        has_src = {src is not None for src, _ in self.pairs}
        if len(has_src) > 1:
            raise ValueError("dataset mixes conditional and unconditional examples")

    def __len__(self):
        return len(self.pairs)

    @property
    def conditional(self) -> bool:
        return bool(self.pairs) and self.pairs[0][0] is not None

    @property
    def sources(self):
        return [s for s, _ in self.pairs]

    @property
    def targets(self):
        return [t for _, t in self.pairs]

    def save(self, path, vocab: Vocabulary):
        lines = []
        for src, tgt in self.pairs:
            text = " ".join(vocab.decode(tgt))
            if src is not None:
                text = " ".join(vocab.decode(src)) + "\t" + text
            lines.append(text)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_parallel(path, vocab: Vocabulary | None = None, conditional: bool = True,
                  split: str = "train", max_len: int = MAX_LEN,
                  min_freq: int = 1) -> tuple[Dataset, Vocabulary]:
    """Read ``source<TAB>target`` lines (or bare target lines) into a Dataset.

    Builds a vocabulary from the file when none is given.
    """
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise ValueError(f"{path}: not valid UTF-8 ({e})") from None
    raw = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if conditional:
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: missing TAB separator")
            src, tgt = line.split("\t", 1)
            raw.append((src, tgt))
        else:
            raw.append((None, line))
    if vocab is None:
        vocab = build_vocab([s for s, _ in raw if s] + [t for _, t in raw], min_freq)
    truncated = 0
    pairs = []
    for src, tgt in raw:
        enc = []
        for side in (src, tgt):
            if side is None:
                enc.append(None)
                continue
            ids = vocab.encode(side)
            if len(ids) > max_len:
                ids = ids[:max_len]
                truncated += 1
            enc.append(ids)
        pairs.append(tuple(enc))
    if truncated:
        logger.warning("%s: truncated %d sequence(s) to %d tokens", path, truncated, max_len)
    return Dataset(pairs, split_tag=split, truncated=truncated), vocab


def synth_task(kind: str, vocab_size: int, min_len: int, max_len: int, n_examples: int,
               seed: int, split: str = "train") -> Dataset:
    """Random source sequences with target = source (copy) or reversed (reverse)."""
    if kind not in ("copy", "reverse"):
        raise ValueError(f"unknown task {kind!r}")
    if vocab_size <= len(RESERVED):
        raise ValueError(f"vocab_size must exceed the {len(RESERVED)} reserved ids")
    if not 1 <= min_len <= max_len:
        raise ValueError(f"invalid length bounds [{min_len}, {max_len}]")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_examples):
        n = int(rng.integers(min_len, max_len + 1))
        src = rng.integers(len(RESERVED), vocab_size, size=n).tolist()
        tgt = list(src) if kind == "copy" else src[::-1]
        pairs.append((src, tgt))
    return Dataset(pairs, split_tag=split)
