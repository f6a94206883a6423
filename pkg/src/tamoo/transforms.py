"""Differentiable image transformations for transformation-robust attacks.

Images are square and stored flat (``side * side``) or as 2-D arrays.  Every
transform returns the output image together with a vector-Jacobian product
so that attack gradients can flow back to the un-transformed input.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError

KINDS = ("identity", "hflip", "vflip", "center_crop", "brightness", "rotation", "gamma")

# Fixed parameters used in deterministic mode.
DETERMINISTIC_PARAMS = {
    "identity": None,
    "hflip": 1.0,
    "vflip": 1.0,
    "center_crop": 0.6,
    "brightness": 1.3,
    "rotation": 10.0,
    "gamma": 1.3,
}

# Sampling ranges used in stochastic mode; flips are applied with probability 0.5.
STOCHASTIC_RANGES = {
    "identity": None,
    "hflip": 0.5,
    "vflip": 0.5,
    "center_crop": (0.6, 1.0),
    "brightness": (1.0, 1.3),
    "rotation": (-10.0, 10.0),
    "gamma": (0.7, 1.3),
}

GAMMA_FLOOR = 1e-6


@dataclass(frozen=True)
class TransformSpec:
    """A transformation family and how its parameter is chosen.

    ``param`` overrides the deterministic parameter; it must lie in the
    family's sampling range.
    """

    kind: str
    mode: str = "deterministic"
    param: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown transform {self.kind!r}")
        if self.mode not in ("deterministic", "stochastic"):
            raise DomainError(f"unknown transform mode {self.mode!r}")
        if self.param is not None:
            rng = STOCHASTIC_RANGES[self.kind]
            if isinstance(rng, tuple):
                lo, hi = rng
                if not lo <= self.param <= hi:
                    raise DomainError(f"{self.kind} parameter {self.param} outside [{lo}, {hi}]")
            elif self.kind in ("hflip", "vflip"):
                if self.param not in (0.0, 1.0):
                    raise DomainError(f"{self.kind} parameter must be 0 or 1")
            else:
                raise DomainError(f"{self.kind} takes no parameter")

    @property
    def fixed_param(self):
        return DETERMINISTIC_PARAMS[self.kind] if self.param is None else self.param

    def draw(self, rng: np.random.Generator):
        """Parameter for one application of the transform."""
        if self.mode == "deterministic":
            return self.fixed_param
        spec = STOCHASTIC_RANGES[self.kind]
        if spec is None:
            return None
        if isinstance(spec, tuple):
            return float(rng.uniform(*spec))
        return 1.0 if rng.random() < spec else 0.0

    def label(self) -> str:
        return f"{self.kind}:{self.mode[:3]}"


def _side(image: np.ndarray) -> int:
    side = int(round(np.sqrt(image.size)))
    if side * side != image.size:
        raise DomainError(f"image with {image.size} pixels is not square")
    return side


@lru_cache(maxsize=256)
def _bilinear_matrix(side: int, kind: str, param: float) -> np.ndarray:
    """Sampling matrix ``A`` with ``out = A @ image`` (flattened, zero padding)."""
    c = (side - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    if kind == "rotation":
        t = np.deg2rad(param)
        # output pixel pulls from the inversely rotated location
        src_i = c + np.cos(t) * (ii - c) - np.sin(t) * (jj - c)
        src_j = c + np.sin(t) * (ii - c) + np.cos(t) * (jj - c)
    elif kind == "center_crop":
        src_i = c + (ii - c) * param
        src_j = c + (jj - c) * param
    else:
        raise AssertionError(kind)
    A = np.zeros((side * side, side * side))
    i0 = np.floor(src_i).astype(int)
    j0 = np.floor(src_j).astype(int)
    fi = src_i - i0
    fj = src_j - j0
    rows = np.arange(side * side).reshape(side, side)
    for di, dj, wgt in ((0, 0, (1 - fi) * (1 - fj)), (1, 0, fi * (1 - fj)),
                        (0, 1, (1 - fi) * fj), (1, 1, fi * fj)):
        si, sj = i0 + di, j0 + dj
        ok = (si >= 0) & (si < side) & (sj >= 0) & (sj < side) & (wgt > 0)
        np.add.at(A, (rows[ok], si[ok] * side + sj[ok]), wgt[ok])
    A.setflags(write=False)
    return A


def apply_transform(spec: TransformSpec, image, param=None, gamma_floor: float = GAMMA_FLOOR):
    """Apply ``spec`` with parameter ``param`` (default: the fixed parameter).

    Returns ``(out, vjp)`` where ``out`` has the input's shape and ``vjp``
    maps a gradient with respect to ``out`` to one with respect to ``image``.
    """
    image = np.asarray(image, dtype=np.float64)
    shape = image.shape
    flat = image.ravel()
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise DomainError(f"non-finite pixel at index {bad[0]}")
    side = _side(flat)
    kind = spec.kind
    if param is None:
        param = spec.fixed_param

    def wrap(out, vjp_flat):
        return out.reshape(shape), lambda u: vjp_flat(np.asarray(u, dtype=np.float64).ravel()).reshape(shape)

    if kind == "identity" or (kind in ("hflip", "vflip") and not param):
        return wrap(flat.copy(), lambda u: u.copy())
    if kind in ("hflip", "vflip"):
        idx = np.arange(side * side).reshape(side, side)
        perm = (idx[:, ::-1] if kind == "hflip" else idx[::-1, :]).ravel()
        inv = np.argsort(perm)
        return wrap(flat[perm], lambda u: u[inv])
    if kind in ("rotation", "center_crop"):
        A = _bilinear_matrix(side, kind, float(param))
        return wrap(A @ flat, lambda u: A.T @ u)
    if kind == "brightness":
        scaled = param * flat
        out = np.clip(scaled, 0.0, 1.0)
        slope = np.where((scaled >= 0.0) & (scaled <= 1.0), param, 0.0)
        return wrap(out, lambda u: slope * u)
    if kind == "gamma":
        live = (flat >= gamma_floor) & (flat <= 1.0)
        p = np.clip(flat, gamma_floor, 1.0)
        out = p ** param
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(live, param * p ** (param - 1.0), 0.0)
        return wrap(out, lambda u: slope * u)
    raise AssertionError(kind)
