"""Command-line entry point: ``robusteval <subcommand> ...``.

Subcommands: train, attack, verify, landscape, unittest, experiment. The
``ROBUSTEVAL_SEED`` environment variable overrides every ``--seed``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from robusteval import attacks as A
from robusteval import diagnostics as D
from robusteval.data import TrainConfig, load_data, metrics_csv, train
from robusteval.errors import BuildError, ConfigError
from robusteval.harness import effective_seed, run_experiment, select_samples
from robusteval.model import DefenseModel, MultiResConfig, RandomnessPolicy, load_model, save_model
from robusteval.tensor import FormatError
from robusteval.verifier import emit_perturbation_report, verify_accuracy, verify_bounds


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _data_args(p, split="test"):
    p.add_argument("--data", required=True, help="CIFAR directory/file or synth:key=value,...")
    p.add_argument("--variant", type=int, default=10, choices=(10, 100))
    p.add_argument("--split", default=split, choices=("train", "test"))
    p.add_argument("--classes", type=_ints, default=None, help="keep and relabel these classes, e.g. 3,5")


def _load(args, split=None):
    return load_data(args.data, split or args.split, args.variant, args.classes)


def cmd_train(args) -> int:
    data = _load(args)
    seed = effective_seed(args.seed)
    res = args.resolutions or (data.d, data.d // 2, data.d // 4)
    pre = MultiResConfig(data.d, res, args.sigma1, args.sigma2)
    model = DefenseModel.init(data.num_classes, pre, args.widths, k_sel=args.k_sel, seed=seed)
    cfg = TrainConfig(args.epochs, args.batch_size, args.lr, args.optimizer, seed=seed,
                      decay_every=args.decay_every or max(args.epochs // 3, 1))
    model, metrics = train(model, data, cfg)
    save_model(model, args.out)
    text = metrics_csv(metrics)
    if args.metrics:
        Path(args.metrics).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_attack(args) -> int:
    model = load_model(args.model)
    seed = effective_seed(args.seed)
    subset = select_samples(_load(args), args.samples, seed)
    overrides = {k: v for k, v in (("steps", args.steps), ("eot_samples", args.eot_samples)) if v is not None}
    kinds = ["pgd", "apgd"] if args.attack == "best" else [args.attack]
    traces = []
    for kind in kinds:
        spec = A.make_spec(kind, args.preset, args.eps, seed, **overrides)
        traces.append(A.run_attack(kind, model, subset.images, subset.labels, spec))
    batch = A.best_of_both(traces, model, RandomnessPolicy.fresh(seed)) if args.attack == "best" else traces[0].to_batch()
    A.save_advbatch(batch, args.out)
    res = A.evaluate_robust(model, batch, args.runs, seed)
    print(f"{batch.attack}: eps={batch.epsilon:.9f} n={len(batch)} robust accuracy {res}")
    return 0


def cmd_verify(args) -> int:
    batch = A.load_advbatch(args.batch)
    clean = _load(args) if args.data else None
    bounds = verify_bounds(batch, clean=clean)
    print(bounds.summary())
    if args.csv:
        Path(args.csv).write_text(bounds.to_csv())
    if not bounds.passed:
        return 2
    if args.model:
        model = load_model(args.model)
        print(verify_accuracy(batch, model, args.runs, effective_seed(args.seed), args.mode).summary())
        if args.report:
            Path(args.report).write_text(emit_perturbation_report(batch, model, effective_seed(args.seed)))
    return 0


def cmd_landscape(args) -> int:
    model = load_model(args.model)
    data = _load(args)
    seed = effective_seed(args.seed)
    x, y = data.images[args.index], int(data.labels[args.index])
    spec = A.AttackSpec(args.eps, steps=args.attack_steps, seed=seed)
    adv = A.pgd(model, None, x[None], np.array([y]), spec).adversarials[0]
    if np.array_equal(adv, x):
        raise ConfigError("attack left the input unchanged; no direction to plot")
    grid = D.landscape(model, x, y, adv - x, extent=args.extent, n=args.n, mode=args.mode, seed=seed)
    text = D.grid_csv(grid)
    if args.out:
        Path(args.out).write_text(text)
        print(f"ruggedness {D.ruggedness(grid):.6g} ({grid.mode}); grid written to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_unittest(args) -> int:
    model = load_model(args.model)
    seed = effective_seed(args.seed)
    subset = select_samples(_load(args), args.samples, seed)
    eps = A.parse_eps(args.eps)
    ut = D.build_unit_test(model, subset.images, eps, seed=seed)
    overrides = {"steps": args.steps} if args.steps is not None else {}
    rate = D.run_unit_test(D.preset_attack(args.attack_kind, args.attack, eps, seed, **overrides), ut)
    print(f"unit test pass rate {100 * rate:.1f}% ({args.attack_kind}-{args.attack}, n={len(ut)}, eps={eps:.9f})")
    return 0


def cmd_experiment(args) -> int:
    result = run_experiment(args.config, out_dir=args.out)
    sys.stdout.write(result.table())
    print(f"results: {result.run_dir / 'results.csv'}")
    return 0 if all(r.verified for r in result.rows) else 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robusteval", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a defended TinyNet")
    _data_args(p, split="train")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--optimizer", default="momentum", choices=("momentum", "sgd"))
    p.add_argument("--decay-every", type=int, default=0)
    p.add_argument("--widths", type=_ints, default=(16, 32, 64))
    p.add_argument("--resolutions", type=_ints, default=None)
    p.add_argument("--sigma1", type=float, default=0.1)
    p.add_argument("--sigma2", type=float, default=0.1)
    p.add_argument("--k-sel", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack a model and save an AdvBatch")
    p.add_argument("--model", required=True)
    _data_args(p)
    p.add_argument("--attack", default="pgd", choices=("pgd", "apgd", "best"))
    p.add_argument("--preset", default="plain", choices=A.PRESETS)
    p.add_argument("--eps", default="8/255")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--steps", type=int)
    p.add_argument("--eot-samples", type=int)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("verify", help="re-check an AdvBatch; exit 2 on any bound failure")
    p.add_argument("--batch", required=True)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--variant", type=int, default=10, choices=(10, 100))
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--classes", type=_ints, default=None)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--mode", default="fresh", choices=("fresh", "frozen"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="per-sample bound report")
    p.add_argument("--report", help="perturbation report CSV")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("landscape", help="2-D loss slice around one input")
    p.add_argument("--model", required=True)
    _data_args(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mode", default="fresh", help="fresh | frozen | avg:R")
    p.add_argument("--extent", type=float, default=8 / 255)
    p.add_argument("--n", type=int, default=21)
    p.add_argument("--eps", default="8/255")
    p.add_argument("--attack-steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("unittest", help="binarized attack unit test")
    p.add_argument("--model", required=True)
    _data_args(p)
    p.add_argument("--attack", default="tricks", choices=A.PRESETS, help="preset")
    p.add_argument("--attack-kind", default="pgd", choices=("pgd", "apgd"))
    p.add_argument("--eps", default="8/255")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_unittest)

    p = sub.add_parser("experiment", help="run a config file end to end")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, BuildError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
