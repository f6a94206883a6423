"""Geometry of the probability simplex and of the extended simplex.

The extended simplex for a task status with ``s`` achieved tasks is the set of
weight vectors with zero mass on the achieved tasks and a full probability
distribution over the unachieved ones.  Achieved tasks are identified by a
boolean mask; task order is never permuted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

SIMPLEX_ATOL = 1e-9


@dataclass(frozen=True)
class TaskStatus:
    """Which tasks have currently achieved their goal."""

    achieved: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.achieved, dtype=bool).copy()
        if mask.ndim != 1:
            raise DomainError("achieved mask must be one-dimensional")
        mask.setflags(write=False)
        object.__setattr__(self, "achieved", mask)

    @classmethod
    def none(cls, m: int) -> "TaskStatus":
        return cls(np.zeros(m, dtype=bool))

    @classmethod
    def from_indices(cls, m: int, indices) -> "TaskStatus":
        mask = np.zeros(m, dtype=bool)
        mask[list(indices)] = True
        return cls(mask)

    @property
    def m(self) -> int:
        return self.achieved.size

    @property
    def s(self) -> int:
        return int(self.achieved.sum())

    @property
    def unachieved(self) -> np.ndarray:
        return ~self.achieved

    @property
    def all_achieved(self) -> bool:
        return self.s == self.m

    def __eq__(self, other):
        if not isinstance(other, TaskStatus):
            return NotImplemented
        return np.array_equal(self.achieved, other.achieved)

    def __hash__(self):
        return hash(self.achieved.tobytes())


def is_weight_vector(w, atol: float = SIMPLEX_ATOL) -> bool:
    w = np.asarray(w, dtype=float)
    return bool(w.ndim == 1 and w.size >= 1 and np.all(w >= 0) and abs(w.sum() - 1.0) <= atol)


def _as_finite_vector(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DomainError(f"{name} must be a non-empty vector, got shape {v.shape}")
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise DomainError(f"{name} has non-finite entry at index {bad[0]}")
    return v


def _simplex_threshold(v: np.ndarray) -> float:
    # Sort-and-threshold rule; a stable descending sort keeps ties in index order.
    u = v[np.argsort(-v, kind="stable")]
    css = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    candidates = u + (1.0 - css) / k
    rho = np.flatnonzero(candidates > 0)[-1]
    return (1.0 - css[rho]) / (rho + 1)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto the probability simplex."""
    v = _as_finite_vector(v, "v")
    if v.size == 1:
        return np.ones(1)
    if np.all(v >= 0) and abs(v.sum() - 1.0) <= 1e-12:
        # already on the simplex; returning it keeps re-projection exact
        return v.copy()
    gamma = _simplex_threshold(v)
    return np.maximum(v + gamma, 0.0)


def _check_status(w: np.ndarray, status: TaskStatus, allow_all_achieved: bool = False) -> None:
    if status.m != w.size:
        raise DomainError(f"status has {status.m} tasks but w has {w.size} entries")
    if status.all_achieved and not allow_all_achieved:
        raise DomainError("every task is achieved (s = m); the reduced simplex is empty")


def project_extended_simplex(w, status: TaskStatus) -> np.ndarray:
    """Project ``w`` onto the extended simplex defined by ``status``.

    Achieved coordinates become exactly zero; the unachieved block is the
    simplex projection of the corresponding entries of ``w``.
    """
    w = _as_finite_vector(w, "w")
    _check_status(w, status)
    out = np.zeros_like(w)
    out[status.unachieved] = project_simplex(w[status.unachieved])
    return out


def omega_via_projection(w, status: TaskStatus) -> float:
    """Squared distance from ``w`` to the extended simplex, via explicit projection."""
    w = _as_finite_vector(w, "w")
    diff = w - project_extended_simplex(w, status)
    return float(diff @ diff)


def omega_closed_form(w, status: TaskStatus) -> float:
    """Squared distance to the extended simplex without projecting.

    Equals ``sum(w[achieved]**2) + (1 - sum(w[unachieved]))**2 / (m - s)``,
    valid whenever ``w`` lies on the simplex.
    """
    w = _as_finite_vector(w, "w")
    _check_status(w, status)
    ach = w[status.achieved]
    gap = 1.0 - w[status.unachieved].sum()
    return float(ach @ ach + gap * gap / (status.m - status.s))


def omega_closed_form_grad(w, status: TaskStatus) -> np.ndarray:
    """Gradient of :func:`omega_closed_form` with respect to ``w``."""
    w = _as_finite_vector(w, "w")
    _check_status(w, status)
    grad = np.where(status.achieved, 2.0 * w, 0.0)
    gap = 1.0 - w[status.unachieved].sum()
    grad[status.unachieved] = -2.0 * gap / (status.m - status.s)
    return grad


def entropy_unachieved(w, status: TaskStatus) -> float:
    """Shannon entropy restricted to unachieved weights (0 log 0 = 0); 0 when s = m."""
    w = _as_finite_vector(w, "w")
    _check_status(w, status, allow_all_achieved=True)
    u = w[status.unachieved]
    u = u[u > 0]
    return float(-(u * np.log(u)).sum())


def entropy_unachieved_grad(w, status: TaskStatus) -> np.ndarray:
    w = _as_finite_vector(w, "w")
    _check_status(w, status, allow_all_achieved=True)
    grad = np.zeros_like(w)
    mask = status.unachieved & (w > 0)
    grad[mask] = -(np.log(w[mask]) + 1.0)
    return grad
