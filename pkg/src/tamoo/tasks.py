"""Multi-task attack problems over a shared perturbation ``delta``.

A bundle exposes, for every task ``i``, the adversarial loss, its gradient
with respect to ``delta`` and whether the task's goal is currently achieved.
The attack engine only talks to this interface.
"""
from __future__ import annotations

import numpy as np

from .errors import DomainError
from .models import CE, Classifier, LossKind, ensemble_ce_and_grad, ensemble_predict
from .simplex import TaskStatus
from .transforms import GAMMA_FLOOR, TransformSpec, apply_transform


class TaskBundle:
    """Base class; subclasses implement :meth:`loss_and_grad` and :meth:`is_achieved`."""

    m: int
    d: int

    def __init__(self, m: int, d: int, delta_lo=None, delta_hi=None):
        self.m = m
        self.d = d
        self.delta_lo = np.full(d, -np.inf) if delta_lo is None else np.asarray(delta_lo, dtype=np.float64)
        self.delta_hi = np.full(d, np.inf) if delta_hi is None else np.asarray(delta_hi, dtype=np.float64)

    def loss_and_grad(self, i: int, delta):
        raise NotImplementedError

    def is_achieved(self, i: int, delta) -> bool:
        raise NotImplementedError

    def eval_loss(self, i: int, delta) -> float:
        return float(self.loss_and_grad(i, delta)[0])

    def eval_grad(self, i: int, delta) -> np.ndarray:
        return self.loss_and_grad(i, delta)[1]

    def evaluate(self, delta):
        """Losses ``(m,)`` and gradients ``(m, d)`` for every task."""
        losses = np.empty(self.m)
        grads = np.empty((self.m, self.d))
        for i in range(self.m):
            losses[i], grads[i] = self.loss_and_grad(i, delta)
        return losses, grads

    def successes(self, delta) -> np.ndarray:
        return np.array([self.is_achieved(i, delta) for i in range(self.m)], dtype=bool)

    def status(self, delta) -> TaskStatus:
        return TaskStatus(self.successes(delta))

    def clip_delta(self, delta) -> np.ndarray:
        return np.clip(delta, self.delta_lo, self.delta_hi)


def _box_bounds(xs, box):
    if box is None:
        return None, None
    lo, hi = box
    xs = np.atleast_2d(xs)
    return (lo - xs).max(axis=0), (hi - xs).min(axis=0)


class EnsembleBundle(TaskBundle):
    """One task per model; a task succeeds when its model misclassifies the true label."""

    def __init__(self, models, x, y: int, kind: LossKind = CE, box=(0.0, 1.0)):
        models = list(models)
        if not models:
            raise DomainError("ensemble needs at least one model")
        x = np.asarray(x, dtype=np.float64)
        d, M = models[0].input_dim, models[0].n_classes
        for i, model in enumerate(models):
            if (model.input_dim, model.n_classes) != (d, M):
                raise DomainError(f"model {i} has shape ({model.input_dim}, {model.n_classes}), expected ({d}, {M})")
        if x.shape != (d,):
            raise DomainError(f"input has shape {x.shape}, expected ({d},)")
        if not 0 <= y < M:
            raise DomainError(f"label {y} out of range")
        super().__init__(len(models), d, *_box_bounds(x, box))
        self.models, self.x, self.y = models, x, int(y)
        self.kind = LossKind.parse(kind)
        self.targets = [m.forward(x)[1] if self.kind.name == "kl" else self.y for m in models]

    def loss_and_grad(self, i, delta):
        return self.models[i].loss_and_grad(self.x + delta, self.targets[i], self.kind)

    def is_achieved(self, i, delta):
        return bool(self.models[i].predict(self.x + delta) != self.y)


def ensemble_bundle(models, x, y, kind: LossKind = CE, box=(0.0, 1.0)) -> EnsembleBundle:
    return EnsembleBundle(models, x, y, kind, box)


class UniversalBundle(TaskBundle):
    """One task per sample of a group sharing a single perturbation.

    Success compares against the model's benign prediction, not the label.
    """

    def __init__(self, model: Classifier, X, Y, kind: LossKind = CE, box=(0.0, 1.0)):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Y = np.atleast_1d(np.asarray(Y, dtype=int))
        if X.shape[0] == 0:
            raise DomainError("universal perturbation needs a non-empty batch")
        if X.shape[1] != model.input_dim or Y.shape != (X.shape[0],):
            raise DomainError("batch shape does not match the model")
        super().__init__(X.shape[0], X.shape[1], *_box_bounds(X, box))
        self.model, self.X, self.Y = model, X, Y
        self.kind = LossKind.parse(kind)
        _, probs = model.forward(X)
        self.benign_pred = np.argmax(probs, axis=1)
        self.targets = probs if self.kind.name == "kl" else Y

    def loss_and_grad(self, i, delta):
        return self.model.loss_and_grad(self.X[i] + delta, self.targets[i], self.kind)

    def evaluate(self, delta):
        return self.model.loss_and_grad(self.X + delta, self.targets, self.kind)

    def successes(self, delta):
        return self.model.predict(self.X + delta) != self.benign_pred

    def is_achieved(self, i, delta):
        return bool(self.model.predict(self.X[i] + delta) != self.benign_pred[i])


def universal_bundle(model, X, Y, kind: LossKind = CE, box=(0.0, 1.0)) -> UniversalBundle:
    return UniversalBundle(model, X, Y, kind, box)


class EotBundle(TaskBundle):
    """One task per transformation family applied to the same adversarial image.

    In stochastic mode each loss/gradient evaluation averages ``mc_samples``
    fresh parameter draws from a per-task seeded stream.  Success is judged on
    the family's fixed parameter, or, with ``success_draws=(k, n)``, as at
    least ``k`` of ``n`` pre-drawn parameters fooling the model.
    """

    def __init__(self, model: Classifier, x, y: int, transforms, kind: LossKind = CE,
                 mc_samples: int = 1, seed: int = 0, success_draws=None,
                 gamma_floor: float = GAMMA_FLOOR, box=(0.0, 1.0)):
        transforms = [t if isinstance(t, TransformSpec) else TransformSpec(*t) for t in transforms]
        if not transforms:
            raise DomainError("need at least one transform")
        if mc_samples < 1:
            raise DomainError("mc_samples must be positive")
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != model.input_dim:
            raise DomainError("image size does not match the model input")
        super().__init__(len(transforms), x.size, *_box_bounds(x, box))
        self.model, self.x, self.y = model, x, int(y)
        self.transforms = transforms
        self.kind = LossKind.parse(kind)
        self.mc_samples = mc_samples
        self.gamma_floor = gamma_floor
        self.benign_pred = int(model.predict(x))
        self.target = model.forward(x)[1] if self.kind.name == "kl" else self.y
        streams = np.random.SeedSequence(seed).spawn(2 * len(transforms))
        self._rngs = [np.random.default_rng(s) for s in streams[: len(transforms)]]
        self.success_draws = success_draws
        if success_draws is not None:
            k, n = success_draws
            if not 1 <= k <= n:
                raise DomainError("success_draws must satisfy 1 <= k <= n")
            judge_rngs = [np.random.default_rng(s) for s in streams[len(transforms):]]
            self._judge_params = [[t.draw(r) for _ in range(n)] if t.mode == "stochastic" else [t.fixed_param]
                                  for t, r in zip(transforms, judge_rngs)]

    def draw(self, i: int) -> list:
        """Next ``mc_samples`` parameters for task ``i`` (advances its stream)."""
        t = self.transforms[i]
        return [t.draw(self._rngs[i]) for _ in range(self.mc_samples)]

    def loss_and_grad(self, i, delta, params=None):
        if params is None:
            params = self.draw(i)
        t = self.transforms[i]
        xa = self.x + delta
        total, grad = 0.0, np.zeros(self.d)
        for p in params:
            out, vjp = apply_transform(t, xa, p, self.gamma_floor)
            value, g = self.model.loss_and_grad(out, self.target, self.kind)
            total += value
            grad += vjp(g)
        return total / len(params), grad / len(params)

    def _fooled(self, i, delta, param) -> bool:
        out, _ = apply_transform(self.transforms[i], self.x + delta, param, self.gamma_floor)
        return bool(self.model.predict(out) != self.benign_pred)

    def is_achieved(self, i, delta):
        if self.success_draws is None or self.transforms[i].mode == "deterministic":
            return self._fooled(i, delta, self.transforms[i].fixed_param)
        k, _ = self.success_draws
        return sum(self._fooled(i, delta, p) for p in self._judge_params[i]) >= k


def eot_bundle(model, x, y, transforms, kind: LossKind = CE, mc_samples: int = 1, seed: int = 0,
               **kwargs) -> EotBundle:
    return EotBundle(model, x, y, transforms, kind, mc_samples, seed, **kwargs)


class AveragedEnsembleBundle(TaskBundle):
    """Single task: cross-entropy of an ensemble's averaged probabilities.

    This is the plain PGD objective against an ensemble treated as one model.
    """

    def __init__(self, models, x, y: int, box=(0.0, 1.0)):
        x = np.asarray(x, dtype=np.float64)
        super().__init__(1, x.size, *_box_bounds(x, box))
        self.models, self.x, self.y = list(models), x, int(y)

    def loss_and_grad(self, i, delta):
        return ensemble_ce_and_grad(self.models, self.x + delta, self.y)

    def is_achieved(self, i, delta):
        return bool(ensemble_predict(self.models, self.x + delta) != self.y)
