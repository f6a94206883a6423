"""Iterative multi-task attacks, attack metrics and adversarial training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError
from .models import CE, LossKind, ensemble_predict, init_classifier, minibatches, sgd_step
from .simplex import TaskStatus
from .solvers import SolverConfig, SolverState, gram, solve_minmax, solve_moo, solve_tamoo, solve_uniform
from .tasks import AveragedEnsembleBundle, EnsembleBundle, TaskBundle

log = logging.getLogger(__name__)

STRATEGIES = ("uniform", "minmax", "moo", "tamoo")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    steps: int = 100
    lr_delta: float = 2 / 255
    strategy: str = "tamoo"
    solver: SolverConfig = SolverConfig()
    minmax_gamma: float = 3.0
    loss: LossKind = CE
    init: str = "uniform"
    seed: int = 0
    cache_gradients: bool = True
    norm: str = "linf"
    trace: bool = False
    best_so_far: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise DomainError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.epsilon < 0:
            raise DomainError("epsilon must be non-negative")
        if self.steps < 1:
            raise DomainError("steps must be positive")
        if self.lr_delta <= 0 or self.minmax_gamma <= 0:
            raise DomainError("lr_delta and minmax_gamma must be positive")
        if self.init not in ("uniform", "zero"):
            raise DomainError(f"unknown init {self.init!r}")
        if self.norm not in ("linf", "l2"):
            raise DomainError(f"unknown norm {self.norm!r}")
        object.__setattr__(self, "loss", LossKind.parse(self.loss))


@dataclass
class AttackReport:
    success: np.ndarray
    mean_weights: np.ndarray
    losses: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    mean_grad_norms: np.ndarray | None = None
    events: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.success.size

    @property
    def all_success(self) -> bool:
        return bool(self.success.all())


class GradientCache:
    """Last finite gradient of every task."""

    def __init__(self, m: int):
        self.slots = [None] * m

    def __len__(self):
        return len(self.slots)


def cached_gradients(raw, cache: GradientCache):
    """Replace non-finite task gradients by the cached last finite one.

    Returns ``(gradients, missing)`` where ``missing[i]`` flags a task whose
    gradient was non-finite with nothing cached; such a task contributes zeros.
    """
    if len(raw) != len(cache):
        raise DomainError(f"cache holds {len(cache)} tasks, got {len(raw)} gradients")
    out, missing = [], []
    for i, g in enumerate(raw):
        g = np.asarray(g, dtype=np.float64)
        if np.all(np.isfinite(g)):
            cache.slots[i] = g.copy()
            out.append(g)
            missing.append(False)
        elif cache.slots[i] is not None:
            out.append(cache.slots[i].copy())
            missing.append(False)
        else:
            out.append(np.zeros_like(g))
            missing.append(True)
    return out, missing


def _init_delta(bundle: TaskBundle, cfg: AttackConfig) -> np.ndarray:
    if cfg.init == "zero" or cfg.epsilon == 0:
        delta = np.zeros(bundle.d)
    else:
        rng = np.random.default_rng(cfg.seed)
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=bundle.d)
    return bundle.clip_delta(delta)


def _project(delta, cfg: AttackConfig, bundle: TaskBundle):
    if cfg.norm == "linf":
        delta = np.clip(delta, -cfg.epsilon, cfg.epsilon)
    else:
        norm = np.linalg.norm(delta)
        if norm > cfg.epsilon:
            delta = delta * (cfg.epsilon / norm)
    return bundle.clip_delta(delta)


def combine_weights(bundle: TaskBundle, delta, losses, grads, cfg: AttackConfig, state: SolverState):
    """Task weights for the current iterate under ``cfg.strategy``."""
    if cfg.strategy == "uniform":
        return solve_uniform(bundle.m), state
    if cfg.strategy == "minmax":
        return solve_minmax(losses, cfg.minmax_gamma), state
    Q = gram(grads)
    if cfg.strategy == "moo":
        return solve_moo(Q, state, cfg.solver)
    return solve_tamoo(Q, bundle.status(delta), state, cfg.solver)


def run_attack(bundle: TaskBundle, cfg: AttackConfig = AttackConfig()):
    """Maximize every task loss of ``bundle`` within the perturbation budget.

    Each iteration weights the task gradients by the configured strategy and
    steps along the sign of the combined gradient (``norm="l2"`` uses the raw
    gradient and an L2 ball).  Returns ``(delta, report)``.
    """
    m = bundle.m
    delta = _init_delta(bundle, cfg)
    state = SolverState.uniform(m)
    cache = GradientCache(m) if cfg.cache_gradients else None
    report = AttackReport(np.zeros(m, dtype=bool), np.zeros(m))
    weight_sum = np.zeros(m)
    norm_sum = np.zeros(m)
    best = None
    for t in range(cfg.steps):
        losses, grads = bundle.evaluate(delta)
        if cache is not None:
            rows, missing = cached_gradients(list(grads), cache)
            grads = np.stack(rows)
            for i in np.flatnonzero(missing):
                report.events.append((t, "empty_cache", int(i)))
        finite = np.all(np.isfinite(grads), axis=1)
        if not finite.all():
            for i in np.flatnonzero(~finite):
                report.events.append((t, "nonfinite_gradient", int(i)))
            grads = np.where(finite[:, None], grads, 0.0)
        if cfg.best_so_far:
            count = int(bundle.successes(delta).sum())
            if best is None or count > best[0]:
                best = (count, delta.copy())
        w, state = combine_weights(bundle, delta, np.nan_to_num(losses), grads, cfg, state)
        weight_sum += w
        norms = np.linalg.norm(grads, axis=1)
        norm_sum += norms
        g = w @ grads
        if cfg.trace:
            report.losses.append(losses.copy())
            report.weights.append(w.copy())
            report.grad_norms.append(norms)
        if not np.all(np.isfinite(g)):
            report.events.append((t, "skipped_step", -1))
            continue
        step = np.sign(g) if cfg.norm == "linf" else g
        delta = _project(delta + cfg.lr_delta * step, cfg, bundle)
        if cfg.trace:
            report.deltas.append(delta.copy())
    report.success = bundle.successes(delta)
    if best is not None and best[0] > int(report.success.sum()):
        delta = best[1]
        report.success = bundle.successes(delta)
    report.mean_weights = weight_sum / cfg.steps
    report.mean_grad_norms = norm_sum / cfg.steps
    return delta, report


@dataclass(frozen=True)
class Metrics:
    a_all: float
    a_avg: float
    per_task: tuple
    n: int


def evaluate_metrics(reports) -> Metrics:
    """Attack success rates: all tasks, mean over tasks, and per task (fractions)."""
    reports = list(reports)
    if not reports:
        raise DomainError("need at least one report")
    m = reports[0].m
    if any(r.m != m for r in reports):
        raise DomainError("reports have different task counts")
    S = np.stack([r.success for r in reports]).astype(float)
    return Metrics(
        a_all=float(S.all(axis=1).mean()),
        a_avg=float(S.mean()),
        per_task=tuple(float(v) for v in S.mean(axis=0)),
        n=len(reports),
    )


# -- adversarial training ----------------------------------------------------

AT_METHODS = ("none", "pgd", "uniform", "minmax", "moo", "tamoo")


def _adversary_bundle(method, members, x, y):
    if method == "pgd":
        return AveragedEnsembleBundle(members, x, y)
    return EnsembleBundle(members, x, y, CE)


def adversarial_examples(members, X, y, method: str, cfg: AttackConfig, seed: int):
    """Perturbed copies of ``X`` crafted against ``members``."""
    streams = np.random.SeedSequence(seed).generate_state(len(X))
    out = np.empty_like(X)
    for j in range(len(X)):
        bundle = _adversary_bundle(method, members, X[j], int(y[j]))
        strategy = cfg.strategy if method == "pgd" else method
        delta, _ = run_attack(bundle, replace(cfg, strategy=strategy, seed=int(streams[j])))
        out[j] = X[j] + delta
    return out


def adversarial_train(X, y, hidden_layers, adversary: AttackConfig, method: str = "tamoo",
                      epochs: int = 10, lr: float = 0.1, seed: int = 0, batch_size: int = 32,
                      n_classes: int | None = None, input_masks=None, warmup_epochs: int = 0):
    """Train an ensemble on adversarial examples generated on the fly.

    ``hidden_layers`` holds one tuple of hidden widths per member, and
    ``input_masks`` optionally one feature mask per member.  ``method`` picks
    the adversary: ``"pgd"`` attacks the averaged ensemble output, the
    multi-task strategies attack every member as one task each, and
    ``"none"`` trains on clean data.  The first ``warmup_epochs`` of the
    ``epochs`` use clean data regardless of ``method``.  Member ``k`` is
    initialized exactly as ``train_classifier(seed=seed + k)`` would be.
    """
    if method not in AT_METHODS:
        raise DomainError(f"unknown training adversary {method!r}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError("training data must be a non-empty (n, d) array")
    M = n_classes if n_classes is not None else int(y.max()) + 1
    if input_masks is None:
        input_masks = [None] * len(hidden_layers)
    members = []
    for k, (hidden, mask) in enumerate(zip(hidden_layers, input_masks)):
        init_ss, _ = np.random.SeedSequence(seed + k).spawn(2)
        members.append(init_classifier((X.shape[1], *hidden, M), np.random.default_rng(init_ss), mask))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    for epoch in range(epochs):
        for b, idx in enumerate(minibatches(X.shape[0], batch_size, shuffle_rng)):
            Xb = X[idx]
            if method != "none" and adversary.epsilon > 0 and epoch >= warmup_epochs:
                batch_seed = int(np.random.SeedSequence([seed, epoch, b]).generate_state(1)[0])
                Xb = adversarial_examples(members, Xb, y[idx], method, adversary, batch_seed)
            members = [sgd_step(model, Xb, y[idx], lr) for model in members]
    return [mdl.with_accuracy(X, y) for mdl in members]


@dataclass(frozen=True)
class RobustnessReport:
    natural_accuracy: float
    robust_accuracy: float
    member_metrics: Metrics


def evaluate_robustness(members, X, y, cfg: AttackConfig, seed: int = 0) -> RobustnessReport:
    """PGD against the averaged ensemble; also how often each member is fooled."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    nat = float(np.mean(ensemble_predict(members, X) == y))
    adv = adversarial_examples(members, X, y, "pgd", replace(cfg, strategy="uniform"), seed)
    robust = float(np.mean(ensemble_predict(members, adv) == y))
    reports = []
    for j in range(len(X)):
        fooled = np.array([mdl.predict(adv[j]) != y[j] for mdl in members])
        reports.append(AttackReport(fooled, np.zeros(len(members))))
    return RobustnessReport(nat, robust, evaluate_metrics(reports))
