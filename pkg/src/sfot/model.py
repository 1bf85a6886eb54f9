"""Small GRU sequence model with teacher- and student-forcing decoders.

Every decoding mode goes through :meth:`SeqModel._decode`, one cell step at
a time, so a student pass that happens to emit the ground truth reproduces
the teacher pass bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .corpus import EOS, PAD, START

__all__ = [
    "ModelConfig",
    "SamplingPolicy",
    "DecodeTrace",
    "SeqModel",
    "pad_batch",
    "gradients",
    "save_checkpoint",
    "load_checkpoint",
]

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"SFOTCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_size: int = 64
    num_layers: int = 1
    conditional: bool = False
    init_scale: float = 0.1

    def __post_init__(self):
        if self.vocab_size <= EOS + 1:
            raise ValueError("vocab_size too small to hold the reserved tokens")
        if min(self.embed_dim, self.hidden_size, self.num_layers) < 1:
            raise ValueError("embed_dim, hidden_size and num_layers must be positive")


@dataclass(frozen=True)
class SamplingPolicy:
    """``greedy`` takes the argmax; ``categorical`` samples softmax(alpha * logits)."""

    kind: str = "categorical"
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("greedy", "categorical"):
            raise ValueError(f"unknown sampling kind {self.kind!r}")
        if not self.alpha > 0:
            raise ValueError(f"reverse temperature must be > 0, got {self.alpha}")

    def choose(self, logits: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
        if self.kind == "greedy":
            return logits.argmax(-1)
        probs = torch.softmax(self.alpha * logits.detach(), dim=-1)
        return torch.multinomial(probs, 1, generator=generator).squeeze(-1)


@dataclass
class DecodeTrace:
    """Batched decoder output.

    ``tokens`` (B, T) are the emitted tokens, ``logits`` (B, T, V) the
    per-step scores, ``hidden`` (B, T, H) the top-layer states that produced
    them and ``embedded`` (B, T, d) the embeddings of the emitted tokens.
    Row ``b`` is valid up to ``lengths[b]``.
    """

    tokens: torch.Tensor
    logits: torch.Tensor
    hidden: torch.Tensor
    embedded: torch.Tensor
    lengths: torch.Tensor
    mode: str

    def __len__(self):
        return self.tokens.shape[0]

    def sequence(self, b: int) -> list[int]:
        return self.tokens[b, : int(self.lengths[b])].tolist()

    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)


def pad_batch(seqs, pad: int = PAD) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad a list of token lists into a (B, T) LongTensor plus lengths."""
    seqs = [list(s) for s in seqs]
    if not seqs or any(len(s) == 0 for s in seqs):
        raise ValueError("sequences must be non-empty")
    T = max(len(s) for s in seqs)
    out = torch.full((len(seqs), T), pad, dtype=torch.long)
    for b, s in enumerate(seqs):
        out[b, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out, torch.as_tensor([len(s) for s in seqs], dtype=torch.long)


class SeqModel(nn.Module):
    """Embedding -> stacked GRU cells -> linear output, optional GRU encoder.

    The encoder shares the embedding table and hands its final per-layer
    states to the decoder as the initial state.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        V, d, H, L = config.vocab_size, config.embed_dim, config.hidden_size, config.num_layers
        self.embedding = nn.Embedding(V, d)
        self.decoder = nn.ModuleList([nn.GRUCell(d if i == 0 else H, H) for i in range(L)])
        if config.conditional:
            self.encoder = nn.ModuleList([nn.GRUCell(d if i == 0 else H, H) for i in range(L)])
        self.output = nn.Linear(H, V)
        self.to(DTYPE)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        s = self.config.init_scale
        with torch.no_grad():
            for _, p in sorted(self.named_parameters()):
                p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * s - s)

    def _check_tokens(self, tokens: torch.Tensor):
        if tokens.numel() == 0:
            raise ValueError("empty input sequence")
        if int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab_size:
            raise ValueError("token index out of vocabulary")

    def _cell(self, cells, x, h):
        new = []
        for cell, h_l in zip(cells, h):
            x = cell(x, h_l)
            new.append(x)
        return new

    def encode(self, source, src_lengths=None) -> list[torch.Tensor]:
        """Initial decoder state, per layer; zeros for unconditional models."""
        H, L = self.config.hidden_size, self.config.num_layers
        if not self.config.conditional:
            B = 1 if source is None else int(source)
            return [torch.zeros(B, H, dtype=DTYPE) for _ in range(L)]
        if source is None or isinstance(source, int):
            raise ValueError("conditional model needs a source sequence")
        self._check_tokens(source)
        B, S = source.shape
        if src_lengths is None:
            src_lengths = torch.full((B,), S, dtype=torch.long)
        h = [torch.zeros(B, H, dtype=DTYPE) for _ in range(L)]
        emb = self.embedding(source)
        for t in range(S):
            new = self._cell(self.encoder, emb[:, t], h)
            keep = (t < src_lengths).unsqueeze(-1)
            h = [torch.where(keep, n, o) for n, o in zip(new, h)]
        return h

    def _decode(self, h, steps: int, feed: Callable, emit: Callable, stop_at_eos: bool) -> DecodeTrace:
        """Shared decoding loop.

        ``feed(t, prev_emitted)`` returns the token ids consumed at step t,
        ``emit(t, logits)`` the ids emitted at step t.  Emitted ids are
        detached constants; gradients flow through embeddings and states.
        """
        B = h[0].shape[0]
        prev = torch.full((B,), START, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        lengths = torch.full((B,), steps, dtype=torch.long)
        tokens, logits, hidden = [], [], []
        for t in range(steps):
            inp = feed(t, prev)
            h = self._cell(self.decoder, self.embedding(inp), h)
            step_logits = self.output(h[-1])
            out = emit(t, step_logits).detach()
            tokens.append(out)
            logits.append(step_logits)
            hidden.append(h[-1])
            prev = out
            if stop_at_eos:
                newly = (out == EOS) & ~done
                lengths = torch.where(newly, torch.full_like(lengths, t + 1), lengths)
                done |= newly
                if bool(done.all()):
                    break
        if stop_at_eos:
            lengths = torch.clamp(lengths, max=len(tokens))
        tokens = torch.stack(tokens, 1)
        return DecodeTrace(
            tokens=tokens,
            logits=torch.stack(logits, 1),
            hidden=torch.stack(hidden, 1),
            embedded=self.embedding(tokens),
            lengths=lengths,
            mode="",
        )

    def forward_teacher(self, targets, lengths=None, source=None, src_lengths=None) -> DecodeTrace:
        """Step t consumes ground-truth token t-1 (START at t=0); emits the argmax."""
        targets = torch.as_tensor(targets, dtype=torch.long)
        if targets.dim() == 1:
            targets = targets.unsqueeze(0)
        self._check_tokens(targets)
        B, T = targets.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        h = self.encode(source if self.config.conditional else B, src_lengths)
        shifted = torch.cat([torch.full((B, 1), START, dtype=torch.long), targets[:, :-1]], 1)
        trace = self._decode(h, T, lambda t, prev: shifted[:, t], lambda t, lg: lg.argmax(-1), False)
        trace.lengths = lengths.clone()
        trace.mode = "teacher"
        return trace

    def forward_student(self, max_len: int, policy: SamplingPolicy = SamplingPolicy(), seed: int = 0,
                        source=None, src_lengths=None, batch_size: int = 1,
                        emit: Callable | None = None) -> DecodeTrace:
        """Step t consumes the model's own token t-1; halts at EOS or max_len.

        One trajectory per batch row, deterministic given ``seed``.  ``emit``
        overrides the sampler (used to force a prefix).
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.config.conditional:
            source = torch.as_tensor(source, dtype=torch.long)
            if source.dim() == 1:
                source = source.unsqueeze(0)
            h = self.encode(source, src_lengths)
        else:
            h = self.encode(batch_size)
        gen = torch.Generator().manual_seed(int(seed))
        emit = emit or (lambda t, lg: policy.choose(lg, gen))
        trace = self._decode(h, max_len, lambda t, prev: prev, emit, True)
        trace.mode = "student"
        return trace

    def forward_mixed(self, targets, lengths, ratio: float, seed: int, source=None, src_lengths=None,
                      policy: SamplingPolicy = SamplingPolicy()) -> DecodeTrace:
        """Scheduled-sampling pass: each step feeds the model's previous sample
        with probability ``ratio``, otherwise the ground-truth token."""
        targets = torch.as_tensor(targets, dtype=torch.long)
        B, T = targets.shape
        h = self.encode(source if self.config.conditional else B, src_lengths)
        gen = torch.Generator().manual_seed(int(seed))
        coins = torch.rand((B, T), generator=gen, dtype=DTYPE) < ratio
        shifted = torch.cat([torch.full((B, 1), START, dtype=torch.long), targets[:, :-1]], 1)

        def feed(t, prev):
            if t == 0:
                return shifted[:, 0]
            return torch.where(coins[:, t], prev, shifted[:, t])

        trace = self._decode(h, T, feed, lambda t, lg: policy.choose(lg, gen), False)
        trace.lengths = lengths.clone()
        trace.mode = "mixed"
        return trace

    def log_prob(self, targets, lengths=None, source=None, src_lengths=None) -> torch.Tensor:
        """Per-sequence sum of log p(x_t | x_<t, y) under teacher forcing."""
        trace = self.forward_teacher(targets, lengths, source, src_lengths)
        return sequence_log_prob(trace, torch.as_tensor(targets).reshape(trace.tokens.shape))


def sequence_log_prob(trace: DecodeTrace, targets: torch.Tensor) -> torch.Tensor:
    lp = trace.log_probs().gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    mask = torch.arange(targets.shape[1]).unsqueeze(0) < trace.lengths.unsqueeze(1)
    return (lp * mask).sum(1)


def gradients(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar loss w.r.t. every named parameter."""
    loss = torch.as_tensor(loss)
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if torch.isnan(loss).any():
        raise FloatingPointError("loss is NaN")
    named = list(model.named_parameters())
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for (n, p), g in zip(named, grads)}


def save_checkpoint(model: SeqModel, path, extra: dict | None = None):
    """Write parameters as little-endian float64 blocks behind a JSON manifest."""
    state = model.state_dict()
    tensors, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "tensors": tensors,
        "extra": extra or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, config: ModelConfig | None = None) -> tuple[SeqModel, dict]:
    """Read a checkpoint; if ``config`` is given, shapes must agree with it."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    manifest = json.loads(data[start : start + hlen].decode("utf-8"))
    stored = ModelConfig(**manifest["config"])
    if config is not None and config != stored:
        raise ValueError(f"{path}: checkpoint config {stored} does not match {config}")
    model = SeqModel(stored)
    values = np.frombuffer(data, dtype="<f8", offset=start + hlen)
    state = model.state_dict()
    loaded = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in state:
            raise ValueError(f"{path}: unexpected tensor {name}")
        block = values[entry["offset"] : entry["offset"] + entry["count"]].reshape(entry["shape"])
        if tuple(block.shape) != tuple(state[name].shape):
            raise ValueError(f"{path}: shape mismatch for {name}: {block.shape} vs {tuple(state[name].shape)}")
        loaded[name] = torch.from_numpy(block.copy()).to(DTYPE)
    missing = set(state) - set(loaded)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(loaded)
    return model, manifest.get("extra", {})
