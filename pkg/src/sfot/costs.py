"""Ground-cost matrices between reference and generated token features.

Functions accept either numpy arrays or torch tensors and return the same
kind, so costs built from model states stay differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

__all__ = [
    "LayerTag",
    "CostKind",
    "CostMode",
    "FeatureSequence",
    "cosine_cost",
    "order_penalty_matrix",
    "build_cost",
]


class LayerTag(str, Enum):
    EMBEDDING = "embedding"
    CONTEXTUAL = "contextual"


class CostKind(str, Enum):
    VANILLA = "vanilla"
    CONTEXTUAL = "contextual"
    CONTEXTUAL_ORDERED = "contextual_ordered"


@dataclass(frozen=True)
class CostMode:
    kind: CostKind = CostKind.CONTEXTUAL_ORDERED
    beta: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "kind", CostKind(self.kind))
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")

    @property
    def layer(self) -> LayerTag:
        return LayerTag.EMBEDDING if self.kind is CostKind.VANILLA else LayerTag.CONTEXTUAL


@dataclass(frozen=True)
class FeatureSequence:
    """T x d feature rows, one per token, tagged with the layer they came from."""

    vectors: object
    layer_tag: LayerTag = LayerTag.CONTEXTUAL

    def __post_init__(self):
        object.__setattr__(self, "layer_tag", LayerTag(self.layer_tag))
        object.__setattr__(self, "vectors", _as_matrix(self.vectors))
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0:
            raise ValueError(f"features must be a non-empty T x d matrix, got {tuple(self.vectors.shape)}")

    def __len__(self):
        return self.vectors.shape[0]


def _as_matrix(x):
    return x if isinstance(x, (torch.Tensor, np.ndarray)) else np.asarray(x, dtype=np.float64)


def _row_norms(x):
    return (x * x).sum(-1) ** 0.5


def cosine_cost(a, b):
    """``C[i, j] = 1 - cos(a_i, b_j)``; zero rows are rejected."""
    a = _as_matrix(getattr(a, "vectors", a))
    b = _as_matrix(getattr(b, "vectors", b))
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    na, nb = _row_norms(a), _row_norms(b)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("zero-norm feature row; cosine cost is undefined")
    a_hat = a / na[..., None]
    b_hat = b / nb[..., None]
    return 1.0 - a_hat @ b_hat.T


def order_penalty_matrix(T: int, T_prime: int, beta: float) -> np.ndarray:
    """Inverse-difference-moment kernel ``beta / ((i/T - j/T')^2 + 1)``.

    Positions are 1-based and each is normalized by its own sequence
    length.  The result is subtracted from the base cost.
    """
    if T < 1 or T_prime < 1:
        raise ValueError("sequence lengths must be >= 1")
    if not beta >= 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    i = np.arange(1, T + 1) / T
    j = np.arange(1, T_prime + 1) / T_prime
    return beta / ((i[:, None] - j[None, :]) ** 2 + 1.0)


def build_cost(ref_features: FeatureSequence, gen_features: FeatureSequence, mode: CostMode):
    for name, feats in (("reference", ref_features), ("generated", gen_features)):
        if feats.layer_tag is not mode.layer:
            raise ValueError(
                f"{mode.kind.value} cost needs {mode.layer.value} features, "
                f"got {feats.layer_tag.value} {name} features"
            )
    C = cosine_cost(ref_features.vectors, gen_features.vectors)
    if mode.kind is CostKind.CONTEXTUAL_ORDERED:
        P = order_penalty_matrix(len(ref_features), len(gen_features), mode.beta)
        if isinstance(C, torch.Tensor):
            P = torch.as_tensor(P, dtype=C.dtype, device=C.device)
        C = C - P
    return C
