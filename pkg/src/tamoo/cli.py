"""Command-line entry point: ``tamoo <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import DatasetSpec, gen_dataset, load_dataset, save_dataset
from .engine import AT_METHODS, STRATEGIES, AttackConfig, adversarial_train
from .errors import DomainError, IntegrityError
from .experiment import ExperimentSpec, VictimSpec, feature_masks, preset, run_experiment
from .models import LossKind, save_model, train_classifier
from .report import format_table, read_report, write_report, write_trace_csv
from .solvers import SolverConfig, SolverState, solve_moo
from .transforms import DETERMINISTIC_PARAMS, GAMMA_FLOOR, STOCHASTIC_RANGES

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY, EXIT_SELFTEST = 0, 1, 2, 3

# Scalar "gradients" and the weights printed after the 20-step softmax solver run.
DEMO_INPUTS = {
    "input_1": [0.1, 0.1, 0.1, 0.1, 0.2],
    "input_2": [0.01, 0.1, 0.1, 0.1, 2e3],
    "input_3": [0.001, 0.002, 0.002, 0.002, 2e3],
}
DEMO_EXPECTED = {
    "input_1": [0.20344244, 0.20344244, 0.20344244, 0.20344244, 0.18623024],
    "input_2": [9.999982e-01, 5.582609e-07, 5.582609e-07, 5.582609e-07, 0.0],
    "input_3": [0.28042343, 0.23985887, 0.23985887, 0.23985887, 0.0],
}
DEMO_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def demo_trajectories(steps: int = 20) -> dict:
    """Weights seen at each step of the softmax solver for every demo input.

    Runs in float32 with lr 1.0 from alpha = 0.2; entry ``t`` is the weight
    vector that step ``t`` differentiates, i.e. before that step's update.
    """
    cfg = SolverConfig(inner_steps=steps, lr_w=1.0, dtype="float32")
    out = {}
    for name, g in DEMO_INPUTS.items():
        g = np.asarray(g, dtype=np.float32)
        Q = np.outer(g, g)
        trace = []
        solve_moo(Q, SolverState(np.full(5, 0.2, dtype=np.float32)), cfg, trace=trace)
        out[name] = np.array(trace)
    return out


def solve_demo(stream=None, verbose: bool = True) -> float:
    """Print the demo trajectories; return the worst deviation at the last step."""
    stream = stream or sys.stdout
    worst = 0.0
    for name, traj in demo_trajectories().items():
        print(f"# {name} = {DEMO_INPUTS[name]}", file=stream)
        for t, w in enumerate(traj):
            if verbose or t == len(traj) - 1:
                print(f"step={t}, w={np.array2string(w, precision=8)}", file=stream)
        dev = float(np.max(np.abs(traj[-1] - np.asarray(DEMO_EXPECTED[name]))))
        worst = max(worst, dev)
        print(f"# max deviation from reference: {dev:.3e}", file=stream)
    return worst


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v)


def _hidden(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v)


def _strategies(values, valid) -> tuple:
    out = []
    for v in values or []:
        out += [s for s in v.split(",") if s]
    bad = [s for s in out if s not in valid]
    if bad:
        raise UsageError(f"unknown strategy {bad[0]!r}; choose from {', '.join(valid)}")
    return tuple(out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tamoo", description="Multi-task adversarial attacks with task-oriented MOO weighting.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset (.npz)")
    g.add_argument("--kind", choices=("blobs", "glyphs"), default="blobs")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--samples", type=int, default=1200)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--margin", type=float, default=10.0)
    g.add_argument("--sigma", type=float, default=0.05)
    g.add_argument("--side", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one classifier and save a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--n-train", type=int, default=800)
    t.add_argument("--hidden", type=_hidden, default=(32,), help="comma-separated hidden widths; empty for linear")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--feature-fraction", type=float, default=1.0,
                   help="train on a random subset of input features")
    t.add_argument("--mask-seed", type=int, default=0)
    t.add_argument("--member", type=int, default=0, help="which mask of the seeded mask sequence to use")
    t.add_argument("--scale", type=float, default=None, help="multiply the output logits")
    t.add_argument("--out", required=True)

    a = sub.add_parser("train-adv", help="adversarially train an ensemble")
    a.add_argument("--data", required=True)
    a.add_argument("--n-train", type=int, default=800)
    a.add_argument("--members", type=int, default=3)
    a.add_argument("--hidden", type=_hidden, default=(32,))
    a.add_argument("--method", choices=AT_METHODS, default="tamoo")
    a.add_argument("--eps", type=float, default=8 / 255)
    a.add_argument("--steps", type=int, default=10)
    a.add_argument("--lr-delta", type=float, default=2 / 255)
    a.add_argument("--epochs", type=int, default=200)
    a.add_argument("--warmup-epochs", type=int, default=190)
    a.add_argument("--lr", type=float, default=0.05)
    a.add_argument("--feature-fraction", type=float, default=0.5)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out-prefix", required=True)

    k = sub.add_parser("attack", help="run an attack experiment and write a result table")
    k.add_argument("--scenario", choices=("ens", "uni", "eot"), default="ens")
    k.add_argument("--preset", default=None, help="start from a named preset (ens, ens-dominated, uni, eot)")
    k.add_argument("--strategy", action="append", help="strategy or comma list; repeatable")
    k.add_argument("--loss", choices=("ce", "kl", "cw"), default="ce")
    k.add_argument("--kappa", type=float, default=0.0)
    k.add_argument("--eps", type=float, default=8 / 255)
    k.add_argument("--steps", type=int, default=100)
    k.add_argument("--lr-delta", type=float, default=2 / 255)
    k.add_argument("--lambda", dest="lam", type=float, default=100.0)
    k.add_argument("--inner-steps", type=int, default=10)
    k.add_argument("--lr-w", type=float, default=0.005)
    k.add_argument("--minmax-gamma", type=float, default=3.0)
    k.add_argument("--group-size", type=int, default=8)
    k.add_argument("--n-train", type=int, default=None, help="samples reserved for training victims")
    k.add_argument("--n-eval", type=int, default=None)
    k.add_argument("--data", default=None, help="dataset file; generated from the preset when omitted")
    k.add_argument("--models", nargs="*", default=(), help="checkpoint files; trained from the preset when omitted")
    k.add_argument("--dominated-scale", type=float, default=None)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--trace", action="store_true", help="also write mean per-iteration traces (JSON)")
    k.add_argument("--no-timing", action="store_true", help="blank the wall-clock column")
    k.add_argument("--out", required=True)

    sub.add_parser("solve-demo", help="run the softmax-solver listing self-test")

    r = sub.add_parser("report", help="render a result table and export traces as CSV")
    r.add_argument("table")
    r.add_argument("--traces", default=None, help="trace JSON written by 'attack --trace'")
    r.add_argument("--csv-dir", default=None)

    sub.add_parser("show-config", help="print transform constants and defaults")
    return p


def _cmd_gen_data(args) -> int:
    spec = DatasetSpec(kind=args.kind, classes=args.classes, samples=args.samples, dim=args.dim,
                       margin=args.margin, sigma=args.sigma, side=args.side, seed=args.seed)
    save_dataset(gen_dataset(spec), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    ds = load_dataset(args.data)
    train, test = ds.split(args.n_train)
    mask = feature_masks(train.X.shape[1], args.member + 1, args.feature_fraction, args.mask_seed)[args.member]
    model = train_classifier(train.X, train.y, args.hidden, args.epochs, args.lr, seed=args.seed,
                             n_classes=ds.n_classes, input_mask=mask)
    acc = model.with_accuracy(test.X, test.y).train_accuracy if len(test) else float("nan")
    if args.scale is not None:
        model = model.scaled(args.scale)
    save_model(model, args.out)
    print(f"wrote {args.out} (held-out accuracy {acc:.4f})")
    return EXIT_OK


def _cmd_train_adv(args) -> int:
    ds = load_dataset(args.data)
    train, test = ds.split(args.n_train)
    masks = feature_masks(train.X.shape[1], args.members, args.feature_fraction, args.seed)
    adversary = AttackConfig(epsilon=args.eps, steps=args.steps, lr_delta=args.lr_delta)
    members = adversarial_train(train.X, train.y, [args.hidden] * args.members, adversary, args.method,
                                epochs=args.epochs, lr=args.lr, seed=args.seed, n_classes=ds.n_classes,
                                input_masks=masks, warmup_epochs=args.warmup_epochs)
    for k, model in enumerate(members):
        path = f"{args.out_prefix}{k}.bin"
        save_model(model, path)
        print(f"wrote {path}")
    return EXIT_OK


def attack_spec(args) -> ExperimentSpec:
    base = preset(args.preset or args.scenario)
    if base.scenario != args.scenario:
        raise UsageError(f"preset {args.preset!r} is a {base.scenario} preset")
    solver = replace(base.attack.solver, inner_steps=args.inner_steps, lr_w=args.lr_w, lam=args.lam)
    attack = replace(base.attack, epsilon=args.eps, steps=args.steps, lr_delta=args.lr_delta,
                     loss=LossKind(args.loss, args.kappa), minmax_gamma=args.minmax_gamma, solver=solver)
    victims = base.victims
    if args.models:
        victims = replace(victims, model_paths=tuple(args.models))
    if args.dominated_scale is not None:
        victims = replace(victims, dominated_scale=args.dominated_scale)
    overrides = dict(attack=attack, victims=victims, seed=args.seed, group_size=args.group_size)
    strategies = _strategies(args.strategy, STRATEGIES)
    if strategies:
        overrides["strategies"] = strategies
    if args.n_eval is not None:
        overrides["n_eval"] = args.n_eval
    if args.n_train is not None:
        overrides["n_train"] = args.n_train
    if args.data:
        overrides["data_path"] = args.data
    return replace(base, **overrides)


def _cmd_attack(args) -> int:
    spec = attack_spec(args)
    for path in [*spec.victims.model_paths, *([spec.data_path] if spec.data_path else [])]:
        if not Path(path).is_file():
            raise IntegrityError(f"missing file: {path}")
    traces = {} if args.trace else None
    start = time.perf_counter()
    table = run_experiment(spec, traces)
    write_report(table, args.out, timing=not args.no_timing)
    if traces is not None:
        Path(str(args.out) + ".traces.json").write_text(json.dumps(traces))
    print(format_table(table))
    print(f"wrote {args.out} in {time.perf_counter() - start:.1f}s")
    return EXIT_OK


def _cmd_report(args) -> int:
    table = read_report(args.table)
    print(format_table(table))
    if args.traces:
        traces = json.loads(Path(args.traces).read_text())
        out_dir = Path(args.csv_dir or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        for strategy, trace in traces.items():
            path = write_trace_csv(trace, out_dir / f"trace_{strategy}.csv")
            print(f"wrote {path}")
    return EXIT_OK


def _cmd_show_config(args) -> int:
    cfg = {
        "version": __version__,
        "transforms": {
            "deterministic": DETERMINISTIC_PARAMS,
            "stochastic_ranges": {k: list(v) if isinstance(v, tuple) else v for k, v in STOCHASTIC_RANGES.items()},
            "gamma_floor": GAMMA_FLOOR,
        },
        "attack": {**asdict(AttackConfig()), "loss": AttackConfig().loss.name},
        "presets": {name: preset(name).to_dict() for name in ("ens", "ens-dominated", "uni", "eot", "adv-train")},
    }
    print(json.dumps(cfg, indent=2, default=list))
    return EXIT_OK


def _cmd_solve_demo(args) -> int:
    start = time.perf_counter()
    worst = solve_demo()
    ok = worst <= DEMO_TOL
    print(f"# {'PASS' if ok else 'FAIL'}: worst deviation {worst:.3e} (tolerance {DEMO_TOL:g}), "
          f"{time.perf_counter() - start:.3f}s")
    return EXIT_OK if ok else EXIT_SELFTEST


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "train-adv": _cmd_train_adv,
    "attack": _cmd_attack,
    "solve-demo": _cmd_solve_demo,
    "report": _cmd_report,
    "show-config": _cmd_show_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tamoo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"tamoo: integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (DomainError, FileNotFoundError) as exc:
        print(f"tamoo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
