"""Discrete optimal transport between two token sequences.

The main entry point is :func:`ipot_solve`, a proximal-point solver whose
inner loop is a single Sinkhorn balancing pass.  :func:`exact_ot_oracle`
and :func:`sinkhorn_solve` exist to cross-check it.

All arithmetic is carried out in float64 regardless of the caller's dtype.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

__all__ = [
    "IpotConfig",
    "TransportPlan",
    "check_simplex",
    "uniform_weights",
    "ipot_solve",
    "ipot_solve_batch",
    "ot_objective",
    "exact_ot_oracle",
    "sinkhorn_solve",
]

MAX_EXHAUSTIVE = 8


@dataclass(frozen=True)
class IpotConfig:
    """Settings for :func:`ipot_solve`.

    ``epsilon`` is the proximal parameter (step size ``1/epsilon``);
    ``inner_iters`` is the number of Sinkhorn passes per proximal step.
    Iteration stops once both the max-abs plan change between outer steps
    and the row-marginal error drop below ``convergence_tol``.
    """

    epsilon: float = 0.1
    outer_iters: int = 1000
    inner_iters: int = 1
    convergence_tol: float = 1e-9

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.outer_iters < 1:
            raise ValueError(f"outer_iters must be >= 1, got {self.outer_iters}")
        if self.inner_iters < 1:
            raise ValueError(f"inner_iters must be >= 1, got {self.inner_iters}")
        if not self.convergence_tol > 0:
            raise ValueError(f"convergence_tol must be > 0, got {self.convergence_tol}")


@dataclass
class TransportPlan:
    """A coupling matrix together with the marginals it was solved for."""

    matrix: np.ndarray
    u: np.ndarray
    p: np.ndarray
    n_iter: int = 0
    converged: bool = True
    history: list[float] = field(default_factory=list)

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)

    @property
    def shape(self):
        return self.matrix.shape

    def marginal_error(self) -> float:
        rows = np.abs(self.matrix.sum(axis=1) - self.u).max()
        cols = np.abs(self.matrix.sum(axis=0) - self.p).max()
        return float(max(rows, cols))

    def is_monotone(self, slack: float = 1e-12) -> bool:
        """True if the objective never increased after the first outer step."""
        h = np.asarray(self.history[1:])
        return bool(np.all(np.diff(h) <= slack)) if h.size > 1 else True


def uniform_weights(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one support point")
    return np.full(n, 1.0 / n)


def check_simplex(w, name: str = "weights", tol: float = 1e-9) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError(f"{name} must be finite and nonnegative")
    if abs(w.sum() - 1.0) > tol:
        raise ValueError(f"{name} must sum to 1 (got {w.sum():.12g})")
    return w


def _prepare(cost, u, p):
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2 or C.size == 0:
        raise ValueError(f"cost must be a non-empty 2-D matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    u = uniform_weights(C.shape[0]) if u is None else check_simplex(u, "u")
    p = uniform_weights(C.shape[1]) if p is None else check_simplex(p, "p")
    if C.shape != (u.size, p.size):
        raise ValueError(f"cost shape {C.shape} does not match marginals ({u.size}, {p.size})")
    return C, u, p


def ot_objective(cost, plan) -> float:
    """Frobenius product ``<M, C> = Tr(M^T C)``."""
    C = np.asarray(cost, dtype=np.float64)
    M = np.asarray(plan, dtype=np.float64)
    if C.shape != M.shape:
        raise ValueError(f"shape mismatch: cost {C.shape} vs plan {M.shape}")
    return float(np.sum(M * C))


def ipot_solve(cost, u=None, p=None, config: IpotConfig | None = None) -> TransportPlan:
    """Approximate the optimal coupling of ``u`` and ``p`` under ``cost``.

    Marginals default to uniform.  Each outer step solves the entropic
    problem proximal to the previous plan, so the result approaches the
    unregularized optimum rather than a smoothed one.
    """
    config = config or IpotConfig()
    C, u, p = _prepare(cost, u, p)
    A = np.exp(-C / config.epsilon)
    M = np.ones_like(C)
    sigma = np.full(C.shape[1], 1.0 / C.shape[1])
    history = []
    converged = False
    for t in range(1, config.outer_iters + 1):
        Q = A * M
        for _ in range(config.inner_iters):
            delta = u / (Q @ sigma)
            sigma = p / (Q.T @ delta)
        M_next = delta[:, None] * Q * sigma[None, :]
        change = np.abs(M_next - M).max()
        M = M_next
        history.append(float(np.sum(M * C)))
        row_err = np.abs(M.sum(axis=1) - u).max()
        if max(change, row_err) < config.convergence_tol:
            converged = True
            break
    if not np.all(np.isfinite(M)):
        raise FloatingPointError("IPOT produced non-finite plan entries; increase epsilon")
    return TransportPlan(M, u, p, n_iter=t, converged=converged, history=history)


def ipot_solve_batch(costs: np.ndarray, rows, cols, config: IpotConfig | None = None) -> np.ndarray:
    """Run :func:`ipot_solve` on a padded batch of cost matrices at once.

    ``costs`` has shape (B, T, T'); example ``b`` occupies the leading
    ``rows[b] x cols[b]`` block and carries uniform marginals on it.  Padded
    entries of the returned plans are exactly zero.
    """
    config = config or IpotConfig()
    C = np.asarray(costs, dtype=np.float64)
    B, T, Tp = C.shape
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    row_mask = np.arange(T)[None, :] < rows[:, None]
    col_mask = np.arange(Tp)[None, :] < cols[:, None]
    u = row_mask / rows[:, None]
    p = col_mask / cols[:, None]
    C = np.where(row_mask[:, :, None] & col_mask[:, None, :], C, 0.0)
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    A = np.exp(-C / config.epsilon)
    M = (row_mask[:, :, None] & col_mask[:, None, :]).astype(np.float64)
    sigma = p.copy()
    active = np.ones(B, dtype=bool)
    for _ in range(config.outer_iters):
        Q = A * M
        for _ in range(config.inner_iters):
            delta = _safe_div(u, np.einsum("btj,bj->bt", Q, sigma))
            sigma = _safe_div(p, np.einsum("btj,bt->bj", Q, delta))
        M_next = delta[:, :, None] * Q * sigma[:, None, :]
        change = np.abs(M_next - M).max(axis=(1, 2))
        row_err = np.abs(M_next.sum(axis=2) - u).max(axis=1)
        # converged examples keep their plan frozen
        M = np.where(active[:, None, None], M_next, M)
        active &= np.maximum(change, row_err) >= config.convergence_tol
        if not active.any():
            break
    return M


def _safe_div(num, den):
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=num > 0)
    return out


def exact_ot_oracle(cost, u=None, p=None, method: str = "auto") -> tuple[np.ndarray, float]:
    """Exact optimal plan and value for small instances.

    Square problems with uniform marginals are solved by enumerating every
    permutation (the optimum sits on a scaled permutation matrix).  Anything
    else goes through a linear program.
    """
    C, u, p = _prepare(cost, u, p)
    T, Tp = C.shape
    uniform_square = T == Tp and np.allclose(u, 1.0 / T) and np.allclose(p, 1.0 / T)
    if method == "auto":
        method = "exhaustive" if uniform_square and T <= MAX_EXHAUSTIVE else "lp"
    if method == "exhaustive":
        if not uniform_square:
            raise ValueError("exhaustive mode needs a square cost with uniform marginals")
        if T > MAX_EXHAUSTIVE:
            raise ValueError(f"instance too large for exhaustive search (T={T} > {MAX_EXHAUSTIVE})")
        perms = np.array(list(itertools.permutations(range(T))))
        totals = C[np.arange(T), perms].sum(axis=1)
        best = int(np.argmin(totals))
        plan = np.zeros_like(C)
        plan[np.arange(T), perms[best]] = 1.0 / T
        return plan, float(totals[best] / T)
    if method != "lp":
        raise ValueError(f"unknown method {method!r}")
    if abs(u.sum() - p.sum()) > 1e-9:
        raise ValueError("infeasible marginals: total masses differ")
    A_eq = np.vstack([np.kron(np.eye(T), np.ones(Tp)), np.kron(np.ones(T), np.eye(Tp))])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([u, p]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise ValueError(f"linear program failed: {res.message}")
    plan = res.x.reshape(T, Tp)
    return plan, float(res.fun)


def sinkhorn_solve(cost, u=None, p=None, reg: float = 0.1, iters: int = 1000) -> TransportPlan:
    """Entropy-regularized coupling by alternating row/column scaling.

    Raises ``FloatingPointError`` when ``exp(-C/reg)`` underflows instead of
    clamping, since a zeroed kernel row silently breaks the marginals.
    """
    if not reg > 0:
        raise ValueError(f"reg must be > 0, got {reg}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    C, u, p = _prepare(cost, u, p)
    with np.errstate(under="ignore"):
        K = np.exp(-(C - C.min()) / reg)
    if np.any(K == 0) or np.any(K < np.finfo(np.float64).tiny):
        raise FloatingPointError(f"Sinkhorn kernel underflows at reg={reg}; use a larger reg")
    a = np.ones_like(u)
    b = np.ones_like(p)
    history = []
    for _ in range(iters):
        a = u / (K @ b)
        b = p / (K.T @ a)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise FloatingPointError("Sinkhorn scaling overflowed")
    M = a[:, None] * K * b[None, :]
    history.append(float(np.sum(M * C)))
    return TransportPlan(M, u, p, n_iter=iters, history=history)
