"""Task-weight solvers: min-norm (MGDA), task-oriented min-norm, MinMax and Uniform.

Min-norm solvers parameterize the weights as ``softmax(alpha)`` and run a
fixed number of plain gradient steps on ``alpha``.  The ``alpha`` logits live
in a :class:`SolverState` so that an attack can warm start every outer
iteration from the previous solution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .simplex import (
    TaskStatus,
    entropy_unachieved_grad,
    omega_closed_form_grad,
    project_simplex,
)


@dataclass(frozen=True)
class SolverConfig:
    inner_steps: int = 10
    lr_w: float = 0.005
    lam: float = 100.0
    entropy_coeff: float = 0.0
    warm_start: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.inner_steps < 1:
            raise DomainError("inner_steps must be positive")
        if self.lr_w <= 0:
            raise DomainError("lr_w must be positive")
        if self.lam < 0 or self.entropy_coeff < 0:
            raise DomainError("lam and entropy_coeff must be non-negative")


@dataclass
class SolverState:
    alpha: np.ndarray

    @classmethod
    def uniform(cls, m: int, dtype="float64") -> "SolverState":
        return cls(np.full(m, 1.0 / m, dtype=dtype))

    def copy(self) -> "SolverState":
        return SolverState(self.alpha.copy())


def softmax(alpha: np.ndarray) -> np.ndarray:
    e = np.exp(alpha - alpha.max())
    return e / e.sum()


def gram(gradients) -> np.ndarray:
    """Pairwise inner products of per-task gradients."""
    rows = []
    d = None
    for i, g in enumerate(gradients):
        g = np.asarray(g, dtype=np.float64).ravel()
        if d is None:
            d = g.size
        if g.size != d or d == 0:
            raise DomainError(f"gradient {i} has length {g.size}, expected {d}")
        if not np.all(np.isfinite(g)):
            raise DomainError(f"gradient {i} has non-finite entries")
        rows.append(g)
    if not rows:
        raise DomainError("need at least one gradient")
    G = np.stack(rows)
    m = len(rows)
    Q = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            Q[i, j] = Q[j, i] = G[i] @ G[j]
    return Q


def _descend(Q, state, cfg, status=None, lam=0.0, trace=None):
    dtype = np.dtype(cfg.dtype)
    Q = np.asarray(Q, dtype=dtype)
    m = Q.shape[0]
    if state is None or not cfg.warm_start:
        alpha = np.full(m, 1.0 / m, dtype=dtype)
    else:
        if state.alpha.shape != (m,):
            raise DomainError(f"solver state has {state.alpha.size} logits for {m} tasks")
        alpha = state.alpha.astype(dtype, copy=True)
    lr = dtype.type(cfg.lr_w)
    two = dtype.type(2.0)
    use_omega = lam > 0 and status is not None and not status.all_achieved
    use_entropy = cfg.entropy_coeff > 0 and status is not None
    for _ in range(cfg.inner_steps):
        w = softmax(alpha)
        if trace is not None:
            trace.append(w.copy())
        grad_w = two * (Q @ w)
        if use_omega:
            grad_w = grad_w + dtype.type(lam) * omega_closed_form_grad(w, status).astype(dtype)
        if use_entropy:
            grad_w = grad_w + dtype.type(cfg.entropy_coeff) * entropy_unachieved_grad(w, status).astype(dtype)
        # chain rule through softmax: J^T v = w * (v - <w, v>)
        alpha = alpha - lr * (w * (grad_w - w @ grad_w))
    return softmax(alpha), SolverState(alpha)


def solve_moo(Q, state: SolverState | None, cfg: SolverConfig = SolverConfig(), trace=None):
    """Approximate ``argmin_{w in simplex} w^T Q w`` by gradient descent on softmax logits.

    Returns the weights and the updated state.  When ``trace`` is a list, the
    weights in effect at every inner step (before its update) are appended.
    """
    return _descend(Q, state, cfg, trace=trace)


def solve_tamoo(Q, status: TaskStatus, state: SolverState | None,
                cfg: SolverConfig = SolverConfig(), trace=None):
    """Min-norm weights regularized towards the unachieved tasks.

    Minimizes ``w^T Q w + lam * Omega(w)`` (plus ``entropy_coeff`` times the
    entropy of the unachieved weights when enabled).  ``Omega`` is dropped
    when every task is achieved.
    """
    return _descend(Q, state, cfg, status=status, lam=cfg.lam, trace=trace)


def solve_minmax(losses, gamma: float) -> np.ndarray:
    """Exact minimizer of ``sum(w * losses) + gamma/2 * ||w - 1/m||^2`` over the simplex."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise DomainError("losses must be a non-empty vector")
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise DomainError(f"loss {bad[0]} is not finite")
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    m = losses.size
    return project_simplex(np.full(m, 1.0 / m) - losses / gamma)


def solve_uniform(m: int) -> np.ndarray:
    if m < 1:
        raise DomainError("m must be positive")
    w = np.full(m, 1.0 / m)
    return w / w.sum()


@dataclass
class MinNormResult:
    weights: np.ndarray
    objective: float
    gap: float
    history: list = field(default_factory=list)


def solve_minnorm_exact(Q, iters: int = 1000) -> MinNormResult:
    """Frank-Wolfe with exact line search for ``min_{w in simplex} w^T Q w``.

    Used as a reference solver in tests.  ``gap`` is the Frank-Wolfe duality
    gap ``w^T Q w - min_i (Q w)_i`` at the returned point; ``history`` holds
    the objective after every iteration.
    """
    Q = np.asarray(Q, dtype=np.float64)
    m = Q.shape[0]
    w = np.full(m, 1.0 / m)
    history = []
    for _ in range(iters):
        Qw = Q @ w
        t = int(np.argmin(Qw))
        a = Qw[t]              # w^T Q e_t
        b = w @ Qw             # w^T Q w
        c = Q[t, t]            # e_t^T Q e_t
        if b - a <= 0:
            history.append(float(b))
            break
        denom = b + c - 2 * a
        step = 1.0 if denom <= 0 else min(1.0, (b - a) / denom)
        w = (1 - step) * w
        w[t] += step
        history.append(float(w @ Q @ w))
    obj = float(w @ Q @ w)
    return MinNormResult(w, obj, float(obj - np.min(Q @ w)), history)


def two_task_minnorm(g1, g2) -> np.ndarray:
    """Closed-form min-norm weights for two gradients."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    diff = g1 - g2
    denom = diff @ diff
    if denom == 0:
        return np.array([0.5, 0.5])
    w1 = float(np.clip(((g2 - g1) @ g2) / denom, 0.0, 1.0))
    return np.array([w1, 1.0 - w1])


__all__ = [
    "SolverConfig", "SolverState", "softmax", "gram", "solve_moo", "solve_tamoo",
    "solve_minmax", "solve_uniform", "solve_minnorm_exact", "MinNormResult",
    "two_task_minnorm",
]
