"""Small rectifier MLP classifiers with hand-written forward and backward passes."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, IntegrityError

LOG_FLOOR = 1e-12
LOSS_KINDS = ("ce", "kl", "cw")


@dataclass(frozen=True)
class LossKind:
    """Adversarial loss: cross-entropy, KL to a benign reference, or CW margin."""

    name: str = "ce"
    kappa: float = 0.0

    def __post_init__(self):
        if self.name not in LOSS_KINDS:
            raise DomainError(f"unknown loss kind {self.name!r}; expected one of {LOSS_KINDS}")
        if self.kappa < 0:
            raise DomainError("kappa must be non-negative")

    @classmethod
    def parse(cls, text) -> "LossKind":
        if isinstance(text, LossKind):
            return text
        return cls(str(text).lower())


CE = LossKind("ce")
KL = LossKind("kl")
CW = LossKind("cw")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Classifier:
    """Affine layers with ReLU between them; the last layer produces logits.

    ``input_mask`` (optional, boolean) restricts the model to a subset of the
    input features; masked features never influence the output.
    """

    weights: tuple
    biases: tuple
    train_accuracy: float | None = field(default=None, compare=False)
    input_mask: np.ndarray | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DomainError("need one bias per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise DomainError(f"layer {i} has inconsistent shapes {W.shape}, {b.shape}")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise DomainError(f"layer {i} input width does not match previous layer")
        if self.input_mask is not None:
            mask = np.asarray(self.input_mask, dtype=bool)
            if mask.shape != (self.input_dim,):
                raise DomainError("input_mask must have one entry per input feature")
            object.__setattr__(self, "input_mask", mask)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_sizes(self) -> tuple:
        return (self.input_dim,) + tuple(W.shape[1] for W in self.weights)

    def __eq__(self, other):
        if not isinstance(other, Classifier):
            return NotImplemented
        masks_equal = (self.input_mask is None and other.input_mask is None) or (
            self.input_mask is not None and other.input_mask is not None
            and np.array_equal(self.input_mask, other.input_mask))
        return masks_equal and len(self.weights) == len(other.weights) and all(
            np.array_equal(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim or x.ndim > 2:
            raise DomainError(f"expected input of width {self.input_dim}, got shape {x.shape}")
        return x

    def _forward_cache(self, x):
        h = x if self.input_mask is None else x * self.input_mask
        acts = [h]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def logits(self, x) -> np.ndarray:
        return self._forward_cache(self._check_input(x))[-1]

    def forward(self, x):
        """Return ``(logits, probs)`` for a single input or a batch."""
        z = self.logits(x)
        return z, softmax(z)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def backward(self, acts, dlogits, want_params: bool = False):
        """Backpropagate ``dlogits`` through the cached activations ``acts``."""
        grads_W, grads_b = [], []
        g = dlogits
        for i in range(len(self.weights) - 1, -1, -1):
            W = self.weights[i]
            if want_params:
                a = acts[i]
                grads_W.append(np.outer(a, g) if a.ndim == 1 else a.T @ g)
                grads_b.append(g if g.ndim == 1 else g.sum(axis=0))
            g = g @ W.T
            if i > 0:
                g = g * (acts[i] > 0)
        if self.input_mask is not None:
            g = g * self.input_mask
        if want_params:
            return g, grads_W[::-1], grads_b[::-1]
        return g

    def loss_and_grad(self, x, target, kind: LossKind = CE):
        """Loss value(s) and gradient with respect to the input."""
        x = self._check_input(x)
        acts = self._forward_cache(x)
        value, dlogits = loss_from_logits(acts[-1], target, kind)
        return value, self.backward(acts, dlogits)

    def loss(self, x, target, kind: LossKind = CE):
        x = self._check_input(x)
        return loss_from_logits(self.logits(x), target, kind)[0]

    def grad_input(self, x, target, kind: LossKind = CE) -> np.ndarray:
        return self.loss_and_grad(x, target, kind)[1]

    def scaled(self, factor: float) -> "Classifier":
        """Same decision function with logits multiplied by ``factor``."""
        weights = self.weights[:-1] + (self.weights[-1] * factor,)
        biases = self.biases[:-1] + (self.biases[-1] * factor,)
        return Classifier(weights, biases, self.train_accuracy, self.input_mask)

    def with_accuracy(self, X, y) -> "Classifier":
        return Classifier(self.weights, self.biases, accuracy(self, X, y), self.input_mask)


def _onehot(y, M, like):
    oh = np.zeros_like(like)
    if like.ndim == 1:
        oh[int(y)] = 1.0
    else:
        oh[np.arange(like.shape[0]), np.asarray(y, dtype=int)] = 1.0
    return oh


def loss_from_logits(z: np.ndarray, target, kind: LossKind = CE):
    """Loss and its gradient with respect to the logits.

    ``target`` is a class index (or array of indices for a batch) for CE/CW,
    and a reference probability vector (or matrix) for KL.
    """
    kind = LossKind.parse(kind)
    M = z.shape[-1]
    p = softmax(z)
    if kind.name == "kl":
        ref = np.asarray(target, dtype=np.float64)
        if ref.shape != z.shape:
            raise DomainError("KL loss needs a reference distribution shaped like the logits")
        live = p >= LOG_FLOOR
        logp = np.log(np.maximum(p, LOG_FLOOR))
        with np.errstate(divide="ignore", invalid="ignore"):
            ref_logref = np.where(ref > 0, ref * np.log(np.where(ref > 0, ref, 1.0)), 0.0)
        value = (ref_logref - ref * logp).sum(axis=-1)
        # d/dz of -sum_k ref_k log p_k over unclamped k
        r = ref * live
        grad = p * r.sum(axis=-1, keepdims=True) - r
        return value, grad
    y = np.asarray(target)
    if np.any((y < 0) | (y >= M)):
        raise DomainError(f"class index out of range for {M} classes")
    onehot = _onehot(y, M, z)
    if kind.name == "ce":
        py = (p * onehot).sum(axis=-1)
        value = -np.log(np.maximum(py, LOG_FLOOR))
        live = (py >= LOG_FLOOR)[..., None] if z.ndim > 1 else py >= LOG_FLOOR
        grad = (p - onehot) * live
        return value, grad
    # CW margin: best wrong logit minus true logit, ties to lowest index
    masked = np.where(onehot > 0, -np.inf, z)
    k = np.argmax(masked, axis=-1)
    runner_up = _onehot(k, M, z)
    value = ((runner_up - onehot) * z).sum(axis=-1) + kind.kappa
    return value, runner_up - onehot


def loss(model: Classifier, x, target, kind: LossKind = CE):
    return model.loss(x, target, kind)


def grad_input(model: Classifier, x, target, kind: LossKind = CE):
    return model.grad_input(x, target, kind)


def forward(model: Classifier, x):
    return model.forward(x)


def init_classifier(layer_sizes, rng: np.random.Generator, input_mask=None) -> Classifier:
    """He-initialized MLP with the given layer widths ``(d, h1, ..., M)``."""
    if len(layer_sizes) < 2:
        raise DomainError("need at least input and output widths")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if input_mask is not None:
        weights[0] = weights[0] * np.asarray(input_mask, dtype=bool)[:, None]
    return Classifier(tuple(weights), tuple(biases), input_mask=input_mask)


def accuracy(model: Classifier, X, y) -> float:
    return float(np.mean(model.predict(X) == np.asarray(y)))


def sgd_step(model: Classifier, X, y, lr: float) -> Classifier:
    """One cross-entropy gradient step on a minibatch; returns the new model."""
    acts = model._forward_cache(X)
    _, dlogits = loss_from_logits(acts[-1], y, CE)
    dlogits = dlogits / X.shape[0]
    _, gW, gb = model.backward(acts, dlogits, want_params=True)
    weights = tuple(W - lr * g for W, g in zip(model.weights, gW))
    biases = tuple(b - lr * g for b, g in zip(model.biases, gb))
    return Classifier(weights, biases, input_mask=model.input_mask)


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_classifier(X, y, hidden=(), epochs: int = 50, lr: float = 0.1, seed: int = 0,
                     batch_size: int = 32, n_classes: int | None = None,
                     input_mask=None) -> Classifier:
    """Fit an MLP with plain minibatch SGD on cross-entropy.

    ``hidden`` lists the hidden widths; ``()`` gives a linear softmax model.
    Initialization and shuffling use separate streams derived from ``seed``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError("training data must be a non-empty (n, d) array")
    if y.shape != (X.shape[0],):
        raise DomainError("labels must have one entry per sample")
    M = n_classes if n_classes is not None else int(y.max()) + 1
    init_rng, shuffle_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    model = init_classifier((X.shape[1], *hidden, M), init_rng, input_mask)
    for _ in range(epochs):
        for idx in minibatches(X.shape[0], batch_size, shuffle_rng):
            model = sgd_step(model, X[idx], y[idx], lr)
    return model.with_accuracy(X, y)


# -- ensembles ---------------------------------------------------------------

def ensemble_probs(models, x) -> np.ndarray:
    """Mean of member probabilities."""
    return np.mean([m.forward(x)[1] for m in models], axis=0)


def ensemble_predict(models, x) -> np.ndarray:
    return np.argmax(ensemble_probs(models, x), axis=-1)


def ensemble_ce_and_grad(models, x, y):
    """Cross-entropy of the averaged probabilities and its input gradient.

    Uses ``grad p_y = -p_y * grad CE`` for every member.
    """
    total_py = 0.0
    grad = 0.0
    for model in models:
        acts = model._forward_cache(np.asarray(x, dtype=np.float64))
        p = softmax(acts[-1])
        py = p[..., y] if np.ndim(y) == 0 else p[np.arange(p.shape[0]), y]
        dlogits = p - _onehot(y, p.shape[-1], p)
        total_py = total_py + py
        grad = grad + (py[..., None] if np.ndim(py) else py) * model.backward(acts, dlogits)
    mean_py = total_py / len(models)
    live = mean_py >= LOG_FLOOR
    value = -np.log(np.maximum(mean_py, LOG_FLOOR))
    scale = np.where(live, 1.0 / (len(models) * np.maximum(mean_py, LOG_FLOOR)), 0.0)
    return value, (scale[..., None] if np.ndim(scale) else scale) * grad


# -- checkpoints -------------------------------------------------------------
#
# Layout (all little-endian):
#   8 bytes  magic b"TAMOOCK1"
#   u32      number of layers L
#   u64[L+1] layer widths (d, h1, ..., M)
#   u8       1 if an input mask follows, else 0
#   u8[d]    input mask (only when flagged)
#   per layer: f64 weights (row-major, fan_in x fan_out), then f64 bias
#   u64      checksum: blake2b-64 of every preceding byte

MAGIC = b"TAMOOCK1"


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def checkpoint_bytes(model: Classifier) -> bytes:
    sizes = model.layer_sizes
    parts = [MAGIC, struct.pack("<I", len(model.weights)), struct.pack(f"<{len(sizes)}Q", *sizes)]
    if model.input_mask is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + model.input_mask.astype(np.uint8).tobytes())
    for W, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return payload + _checksum(payload)


def model_from_bytes(blob: bytes) -> Classifier:
    if len(blob) < len(MAGIC) + 12 or blob[:len(MAGIC)] != MAGIC:
        raise IntegrityError("not a model checkpoint (bad magic)")
    payload, tail = blob[:-8], blob[-8:]
    if _checksum(payload) != tail:
        raise IntegrityError("checkpoint checksum mismatch")
    off = len(MAGIC)
    (L,) = struct.unpack_from("<I", payload, off)
    off += 4
    sizes = struct.unpack_from(f"<{L + 1}Q", payload, off)
    off += 8 * (L + 1)
    mask = None
    if payload[off] == 1:
        mask = np.frombuffer(payload, np.uint8, sizes[0], off + 1).astype(bool)
        off += sizes[0]
    elif payload[off] != 0:
        raise IntegrityError("checkpoint has an invalid mask flag")
    off += 1
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        n = fan_in * fan_out
        weights.append(np.frombuffer(payload, "<f8", n, off).reshape(fan_in, fan_out).astype(np.float64))
        off += 8 * n
        biases.append(np.frombuffer(payload, "<f8", fan_out, off).astype(np.float64))
        off += 8 * fan_out
    if off != len(payload):
        raise IntegrityError("checkpoint has trailing or missing bytes")
    return Classifier(tuple(weights), tuple(biases), input_mask=mask)


def save_model(model: Classifier, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_model(path) -> Classifier:
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"model file {path} does not exist")
    return model_from_bytes(path.read_bytes())
