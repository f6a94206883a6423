"""Desk-scale experiment runner for the ensemble, universal, EoT and adversarial-training suites."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .data import Dataset, DatasetSpec, gen_dataset, load_dataset
from .engine import AT_METHODS, AttackConfig, adversarial_train, evaluate_metrics, evaluate_robustness, run_attack
from .errors import DomainError
from .models import Classifier, LossKind, load_model, train_classifier
from .solvers import SolverConfig
from .tasks import EnsembleBundle, EotBundle, UniversalBundle
from .transforms import TransformSpec

log = logging.getLogger(__name__)

SCENARIOS = ("ens", "uni", "eot", "adv-train")
WORKERS_ENV = "TAMOO_WORKERS"


@dataclass(frozen=True)
class VictimSpec:
    """How to obtain the victim model(s): train them, or load checkpoints."""

    members: int = 4
    hidden: tuple = (32,)
    feature_fraction: float = 0.5
    epochs: int = 200
    lr: float = 0.05
    batch_size: int = 32
    dominated_scale: float | None = None
    model_paths: tuple = ()


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: str = "ens"
    dataset: DatasetSpec = DatasetSpec(classes=10, samples=1200, dim=64, margin=10.0, sigma=0.05)
    victims: VictimSpec = VictimSpec()
    attack: AttackConfig = AttackConfig()
    strategies: tuple = ("uniform", "minmax", "moo", "tamoo")
    n_train: int = 800
    n_eval: int = 200
    group_size: int = 8
    transforms: tuple = ()
    mc_samples: int = 1
    at_epochs: int = 200
    at_warmup_epochs: int = 190
    at_steps: int = 10
    eval_steps: int = 20
    data_path: str | None = None
    seed: int = 0

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise DomainError(f"scenario: unknown scenario {self.scenario!r}")
        valid = AT_METHODS if self.scenario == "adv-train" else ("uniform", "minmax", "moo", "tamoo")
        for s in self.strategies:
            if s not in valid:
                raise DomainError(f"strategies: {s!r} is not valid for {self.scenario}")
        if self.n_eval < 1 or self.n_train < 1:
            raise DomainError("n_train and n_eval must be positive")
        if self.group_size < 1:
            raise DomainError("group_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"]["loss"] = self.attack.loss.name
        d["transforms"] = [asdict(t) for t in self.transforms]
        return d

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ResultRow:
    scenario: str
    strategy: str
    samples: int
    a_all: float                 # percent
    a_avg: float                 # percent
    per_task: tuple = ()         # percent, one per task
    seconds: float | None = None
    extras: dict = field(default_factory=dict)

    def check(self):
        for name, v in [("A-All", self.a_all), ("A-Avg", self.a_avg), *[(f"A-{i + 1}", p) for i, p in enumerate(self.per_task)]]:
            if not 0.0 <= v <= 100.0:
                raise DomainError(f"{name}={v} outside [0, 100] in row {self.strategy}")
        if self.a_all > self.a_avg + 1e-9:
            raise DomainError(f"A-All ({self.a_all}) exceeds A-Avg ({self.a_avg}) in row {self.strategy}")


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    spec_hash: str = ""
    seed: int = 0
    version: str = __version__

    def row(self, strategy: str, scenario: str | None = None) -> ResultRow:
        for r in self.rows:
            if r.strategy == strategy and (scenario is None or r.scenario == scenario):
                return r
        raise KeyError(strategy)


# -- building blocks ---------------------------------------------------------

def feature_masks(d: int, count: int, fraction: float, seed: int):
    """``count`` random feature subsets of size ``int(fraction * d)``; None when fraction >= 1."""
    if fraction >= 1.0:
        return [None] * count
    if not 0 < fraction:
        raise DomainError("feature_fraction must be positive")
    rng = np.random.default_rng(seed + 100)
    k = max(1, int(fraction * d))
    masks = []
    for _ in range(count):
        mask = np.zeros(d, dtype=bool)
        mask[rng.permutation(d)[:k]] = True
        masks.append(mask)
    return masks


def load_data(spec: ExperimentSpec) -> tuple[Dataset, Dataset]:
    ds = load_dataset(spec.data_path) if spec.data_path else gen_dataset(spec.dataset)
    if len(ds) < spec.n_train + 1:
        raise DomainError("dataset is smaller than n_train + 1")
    return ds.split(spec.n_train)


def build_victims(spec: ExperimentSpec, train: Dataset) -> list:
    """Load checkpoints (integrity-checked) or train the victim members."""
    v = spec.victims
    if v.model_paths:
        models = [load_model(p) for p in v.model_paths]
    else:
        masks = feature_masks(train.X.shape[1], v.members, v.feature_fraction, spec.seed)
        models = [
            train_classifier(train.X, train.y, v.hidden, v.epochs, v.lr, seed=spec.seed + k,
                             batch_size=v.batch_size, n_classes=train.n_classes, input_mask=masks[k])
            for k in range(v.members)
        ]
    if v.dominated_scale is not None:
        models[-1] = models[-1].scaled(v.dominated_scale)
    return models


def _sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _attack_job(job):
    bundle, cfg = job
    _, report = run_attack(bundle, cfg)
    return report


def _map(jobs):
    workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    if workers <= 1 or len(jobs) < 2:
        return [_attack_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_attack_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _bundles(spec: ExperimentSpec, models, test: Dataset):
    kind = spec.attack.loss
    if spec.scenario == "ens":
        n = min(spec.n_eval, len(test))
        return [EnsembleBundle(models, test.X[j], int(test.y[j]), kind) for j in range(n)]
    if spec.scenario == "uni":
        K = spec.group_size
        n_groups = min(spec.n_eval, len(test)) // K
        if n_groups == 0:
            raise DomainError("group_size exceeds the number of evaluation samples")
        return [UniversalBundle(models[0], test.X[g * K:(g + 1) * K], test.y[g * K:(g + 1) * K], kind)
                for g in range(n_groups)]
    if spec.scenario == "eot":
        if not spec.transforms:
            raise DomainError("transforms: the eot scenario needs at least one transform")
        n = min(spec.n_eval, len(test))
        return [EotBundle(models[0], test.X[j], int(test.y[j]), spec.transforms, kind,
                          spec.mc_samples, seed=_sample_seed(spec.seed + 1, j)) for j in range(n)]
    raise AssertionError(spec.scenario)


def _row(spec, strategy, reports, seconds) -> ResultRow:
    metrics = evaluate_metrics(reports)
    mean_w = np.mean([r.mean_weights for r in reports], axis=0)
    mean_g = np.mean([r.mean_grad_norms for r in reports], axis=0)
    extras = {}
    if spec.scenario != "uni":
        extras.update({f"w{i + 1}": float(w) for i, w in enumerate(mean_w)})
        extras.update({f"g{i + 1}": float(g) for i, g in enumerate(mean_g)})
    row = ResultRow(spec.scenario, strategy, metrics.n, 100.0 * metrics.a_all, 100.0 * metrics.a_avg,
                    tuple(100.0 * p for p in metrics.per_task), seconds, extras)
    row.check()
    return row


def _run_attacks(spec: ExperimentSpec, models, test: Dataset, traces: dict | None):
    rows = []
    for strategy in spec.strategies:
        start = time.perf_counter()
        bundles = _bundles(spec, models, test)
        cfg = replace(spec.attack, strategy=strategy, trace=traces is not None)
        jobs = [(b, replace(cfg, seed=_sample_seed(spec.seed, j))) for j, b in enumerate(bundles)]
        reports = _map(jobs)
        rows.append(_row(spec, strategy, reports, time.perf_counter() - start))
        if traces is not None:
            traces[strategy] = mean_trace(reports)
        log.info("%s/%s: A-All=%.2f A-Avg=%.2f", spec.scenario, strategy, rows[-1].a_all, rows[-1].a_avg)
    return rows


def mean_trace(reports) -> dict:
    """Per-iteration losses, weights and gradient norms averaged over samples."""
    return {
        "losses": np.mean([r.losses for r in reports], axis=0).tolist(),
        "weights": np.mean([r.weights for r in reports], axis=0).tolist(),
        "grad_norms": np.mean([r.grad_norms for r in reports], axis=0).tolist(),
    }


def _run_adv_train(spec: ExperimentSpec, train: Dataset, test: Dataset):
    v = spec.victims
    masks = feature_masks(train.X.shape[1], v.members, v.feature_fraction, spec.seed)
    adversary = replace(spec.attack, steps=spec.at_steps, loss=LossKind("ce"))
    evaluator = replace(spec.attack, steps=spec.eval_steps, strategy="uniform")
    n = min(spec.n_eval, len(test))
    rows = []
    for method in spec.strategies:
        start = time.perf_counter()
        members = adversarial_train(train.X, train.y, [v.hidden] * v.members, adversary, method,
                                    epochs=spec.at_epochs, lr=v.lr, seed=spec.seed, batch_size=v.batch_size,
                                    n_classes=train.n_classes, input_masks=masks,
                                    warmup_epochs=spec.at_warmup_epochs)
        rob = evaluate_robustness(members, test.X[:n], test.y[:n], evaluator, seed=spec.seed + 1)
        m = rob.member_metrics
        row = ResultRow("adv-train", method, n, 100.0 * m.a_all, 100.0 * m.a_avg,
                        tuple(100.0 * p for p in m.per_task), time.perf_counter() - start,
                        {"nat": 100.0 * rob.natural_accuracy, "adv": 100.0 * rob.robust_accuracy})
        row.check()
        rows.append(row)
        log.info("adv-train/%s: NAT=%.2f ADV=%.2f", method, row.extras["nat"], row.extras["adv"])
    return rows


def run_experiment(spec: ExperimentSpec, traces: dict | None = None) -> ResultTable:
    """Run every strategy of ``spec`` and collect a :class:`ResultTable`.

    Pass a dict as ``traces`` to receive per-strategy mean iteration traces.
    Model and data files are validated before any attack runs.
    """
    spec.validate()
    train, test = load_data(spec)
    if spec.scenario == "adv-train":
        rows = _run_adv_train(spec, train, test)
    else:
        models = build_victims(spec, train)
        rows = _run_attacks(spec, models, test, traces)
    return ResultTable(rows, spec.spec_hash(), spec.seed)


# -- presets -----------------------------------------------------------------

ENS_DATASET = DatasetSpec(kind="blobs", classes=10, samples=1200, dim=64, margin=10.0, sigma=0.05, seed=0)
GLYPH_DATASET = DatasetSpec(kind="glyphs", classes=10, samples=1200, side=16, sigma=0.1, seed=0)
DETERMINISTIC_EOT = tuple(TransformSpec(k) for k in
                          ("identity", "hflip", "vflip", "center_crop", "brightness", "rotation", "gamma"))
STOCHASTIC_EOT = tuple(TransformSpec(k, "stochastic") for k in
                       ("identity", "hflip", "vflip", "center_crop", "brightness", "rotation", "gamma"))


def preset(name: str, **overrides) -> ExperimentSpec:
    """Named experiment configurations shipped with the package."""
    presets = {
        "ens": ExperimentSpec(scenario="ens", dataset=ENS_DATASET),
        "ens-dominated": ExperimentSpec(scenario="ens", dataset=ENS_DATASET,
                                        victims=VictimSpec(dominated_scale=0.01)),
        "uni": ExperimentSpec(scenario="uni", dataset=ENS_DATASET, victims=VictimSpec(members=1, feature_fraction=1.0),
                              n_eval=192, group_size=8),
        "eot": ExperimentSpec(scenario="eot", dataset=GLYPH_DATASET,
                              victims=VictimSpec(members=1, feature_fraction=1.0, hidden=(32,)),
                              transforms=DETERMINISTIC_EOT,
                              attack=AttackConfig(solver=SolverConfig(entropy_coeff=0.0))),
        "adv-train": ExperimentSpec(scenario="adv-train", dataset=ENS_DATASET,
                                    victims=VictimSpec(members=3, feature_fraction=1.0),
                                    strategies=("pgd", "tamoo"), n_train=400, n_eval=300,
                                    at_epochs=80, at_warmup_epochs=0),
    }
    if name not in presets:
        raise DomainError(f"unknown preset {name!r}; expected one of {sorted(presets)}")
    return replace(presets[name], **overrides)
