"""Seeded synthetic datasets: Gaussian blobs and procedural glyph images."""
from __future__ import annotations

import io
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, IntegrityError


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"          # "blobs" or "glyphs"
    classes: int = 4
    samples: int = 800
    dim: int = 32                # feature count; glyphs use side * side
    margin: float = 6.0          # distance between class centers, in units of sigma
    sigma: float = 0.05
    side: int = 16
    seed: int = 0

    def validate(self):
        if self.kind not in ("blobs", "glyphs"):
            raise DomainError(f"kind: unknown dataset kind {self.kind!r}")
        if self.classes < 2:
            raise DomainError("classes: need at least 2")
        if self.samples < self.classes:
            raise DomainError("samples: need at least one sample per class")
        if self.kind == "blobs" and self.dim < self.classes:
            raise DomainError("dim: blobs need dim >= classes")
        if self.sigma <= 0:
            raise DomainError("sigma: must be positive")
        if self.margin < 0:
            raise DomainError("margin: must be non-negative")
        if self.kind == "glyphs" and self.side < 4:
            raise DomainError("side: glyph images need side >= 4")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self):
        return len(self.y)

    def split(self, n_train: int):
        return (Dataset(self.X[:n_train], self.y[:n_train], self.n_classes),
                Dataset(self.X[n_train:], self.y[n_train:], self.n_classes))


def _blobs(spec: DatasetSpec, rng: np.random.Generator):
    # orthonormal center directions give pairwise center distance margin * sigma
    basis, _ = np.linalg.qr(rng.normal(size=(spec.dim, spec.classes)))
    centers = 0.5 + (spec.margin * spec.sigma / np.sqrt(2.0)) * basis.T
    y = np.arange(spec.samples) % spec.classes
    rng.shuffle(y)
    X = centers[y] + rng.normal(0.0, spec.sigma, size=(spec.samples, spec.dim))
    return np.clip(X, 0.0, 1.0), y


def glyph_templates(classes: int, side: int) -> np.ndarray:
    """One ``side x side`` pattern per class: oriented stripes of varying frequency."""
    ii, jj = np.meshgrid(np.linspace(-1, 1, side), np.linspace(-1, 1, side), indexing="ij")
    out = np.empty((classes, side, side))
    for k in range(classes):
        theta = np.pi * k / classes
        freq = 1.0 + (k % 3) * 0.5
        phase = ii * np.cos(theta) + jj * np.sin(theta)
        stripes = 0.5 + 0.5 * np.cos(np.pi * freq * phase + 0.7 * k)
        blob = np.exp(-((ii - 0.4 * np.cos(2 * theta)) ** 2 + (jj - 0.4 * np.sin(2 * theta)) ** 2) / 0.3)
        out[k] = np.clip(0.75 * stripes + 0.35 * blob, 0.0, 1.0)
    return out


def _glyphs(spec: DatasetSpec, rng: np.random.Generator):
    templates = glyph_templates(spec.classes, spec.side).reshape(spec.classes, -1)
    y = np.arange(spec.samples) % spec.classes
    rng.shuffle(y)
    X = templates[y] + rng.normal(0.0, spec.sigma, size=(spec.samples, spec.side * spec.side))
    return np.clip(X, 0.0, 1.0), y


def gen_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    X, y = _blobs(spec, rng) if spec.kind == "blobs" else _glyphs(spec, rng)
    return Dataset(X, y.astype(np.int64), spec.classes)


def save_dataset(ds: Dataset, path) -> None:
    buf = io.BytesIO()
    np.savez(buf, X=ds.X, y=ds.y, n_classes=np.int64(ds.n_classes))
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"dataset file {path} does not exist")
    try:
        with np.load(path) as f:
            return Dataset(f["X"], f["y"], int(f["n_classes"]))
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
        raise IntegrityError(f"cannot read dataset {path}: {exc}") from exc
