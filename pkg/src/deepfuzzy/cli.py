"""Command line entry point: ``deepfuzzy {train,eval,gradcheck,oracle-check,inspect}``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time

import numpy as np

from . import datasets as D
from .checks import network_gradcheck, oracle_check
from .errors import DeepFuzzyError
from .layers import FuzzyLayerParams
from .network import build_network, builtin_spec_text, parse_network_spec
from .training import (
    ScheduleSpec,
    checkpoint_load,
    evaluate,
    fit,
    new_train_state,
)

GRADCHECK_TOL = 1e-4
ORACLE_TOL = 1e-6
DATASETS = ("mnist", "cifar10", "cifar100")


def _read_spec(arg):
    """``arg`` is a path to a spec file or the name of a built-in spec."""
    if os.path.exists(arg):
        with open(arg) as fh:
            return fh.read()
    return builtin_spec_text(arg)


def prepare_data(name, root, val_count, train_limit=None):
    """Load, split and normalize a dataset the way the training recipes expect."""
    full = D.load_dataset(name, root, "train")
    test = D.load_dataset(name, root, "test")
    train, val = D.split_train_val(full, val_count)
    if train_limit is not None:
        train = train.subset(slice(0, train_limit))
    if name != "mnist":
        train, val, test = (D.normalize_samplewise(d) for d in (train, val, test))
    return train, val, test


def cmd_train(args):
    spec_text = _read_spec(args.spec or args.dataset)
    train, val, test = prepare_data(args.dataset, args.data_root, args.val_count, args.train_limit)
    ckpt = os.path.join(args.out, "checkpoint.ckpt")
    metrics = os.path.join(args.out, "metrics.csv")
    if args.resume:
        state = checkpoint_load(args.resume)
        network = state.network
        print(f"resuming from {args.resume} at epoch {state.epoch}")
    else:
        spec = parse_network_spec(spec_text, train.input_shape, train.num_classes)
        network = build_network(spec, args.seed)
        os.makedirs(args.out, exist_ok=True)
        if os.path.exists(metrics):
            os.remove(metrics)
        schedule = ScheduleSpec.for_dataset(args.schedule or args.dataset)
        policy = None if args.no_augment else (
            D.MNIST_AUGMENT if args.dataset == "mnist" else D.CIFAR_AUGMENT)
        state = new_train_state(network, schedule, args.seed, args.batch_size, policy)
    os.makedirs(args.out, exist_ok=True)
    print(f"seed {state.seed}, batch size {state.batch_size}, train {len(train)}, val {len(val)}")
    print(network.format_trace())
    state = fit(network, train, val, state.schedule.spec, args.epochs, state=state,
                checkpoint_path=ckpt, metrics_path=metrics,
                on_epoch=lambda r: print(
                    f"epoch {r['epoch']:>3}  lr {r['lr']:.3e}  train_loss {r['train_loss']:.4f}  "
                    f"val_error {r['val_error']:.4f}  {r['wall_seconds']:.1f}s", flush=True))
    if state.best_params:
        network.load_arrays(state.best_params)
    loss, err = evaluate(network, test)
    print(f"test accuracy {1 - err:.4f} (loss {loss:.4f}) with best-validation parameters "
          f"from epoch {state.best_epoch}")
    return 0


def cmd_eval(args):
    state = checkpoint_load(args.checkpoint)
    network = state.network
    if not args.last and state.best_params:
        network.load_arrays(state.best_params)
    _, val, test = prepare_data(args.dataset, args.data_root, args.val_count)
    data = test if args.split == "test" else val
    start = time.perf_counter()
    loss, err = evaluate(network, data)
    print(f"{args.dataset} {args.split}: accuracy {1 - err:.4f}  error {err:.4f}  loss {loss:.4f}")
    if args.out:
        new = not os.path.exists(args.out)
        with open(args.out, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["checkpoint", "dataset", "split", "n", "loss", "accuracy", "error", "seconds"])
            w.writerow([args.checkpoint, args.dataset, args.split, len(data), repr(loss),
                        repr(1 - err), repr(err), f"{time.perf_counter() - start:.2f}"])
    return 0


def cmd_gradcheck(args):
    spec = parse_network_spec(_read_spec(args.spec))
    network = build_network(spec, args.seed)
    print(network.format_trace())
    report = network_gradcheck(network, batch=args.batch, seed=args.seed, samples=args.samples,
                               loss=args.loss)
    for name, err in report.per_param().items():
        print(f"{name:<32} coords {report.coords[name].size:>4}  max rel. error {err:.3e}")
    print(f"max relative error {report.max_error:.3e} (tolerance {GRADCHECK_TOL:g})")
    return 0 if report.passed(GRADCHECK_TOL) else 1


def cmd_oracle_check(args):
    start = time.perf_counter()
    results = oracle_check(args.trials, args.seed)
    for kind in ("fio", "fpo"):
        diffs = [r.max_abs_diff for r in results if r.kind == kind]
        print(f"{kind}: {len(diffs)} trials, max abs diff {max(diffs):.3e}")
    worst = max(r.max_abs_diff for r in results)
    print(f"max abs diff {worst:.3e} (tolerance {ORACLE_TOL:g}), {time.perf_counter() - start:.1f}s")
    return 0 if worst < ORACLE_TOL else 1


def cmd_inspect(args):
    state = checkpoint_load(args.checkpoint)
    net = state.network
    print(f"epoch {state.epoch}, best val error {state.best_val_error:.4f} at epoch {state.best_epoch}, "
          f"adam step {state.adam.t}, lr {state.schedule.lr:.3e}")
    print(net.format_trace())
    for name, t in net.parameters().items():
        d = t.data
        print(f"{name:<28} {'x'.join(map(str, d.shape)):>14}  mean {d.mean():+.4f}  std {d.std():.4f}  "
              f"min {d.min():+.4f}  max {d.max():+.4f}")
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, FuzzyLayerParams):
            continue
        rf = layer.rule_filters.data.reshape(layer.n_rules, -1)
        norms = np.linalg.norm(rf, axis=1)
        mass = rf.sum(axis=1)
        print(f"layer {i} {layer.kind.name}: {layer.n_rules} rules, pattern L2 norm "
              f"min {norms.min():.4f} median {np.median(norms):.4f} max {norms.max():.4f}; "
              f"pattern sum min {mass.min():+.4f} max {mass.max():+.4f}; "
              f"non-negative entries {np.mean(rf >= 0):.1%}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="deepfuzzy", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write metrics/checkpoints")
    p.add_argument("--dataset", choices=DATASETS, required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--spec", help="spec file or built-in name (default: the dataset's spec)")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--val-count", type=int, default=10000)
    p.add_argument("--train-limit", type=int, help="use only the first N training images")
    p.add_argument("--schedule", choices=("mnist", "cifar"), help="learning-rate recipe")
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", choices=DATASETS, required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--val-count", type=int, default=10000)
    p.add_argument("--last", action="store_true", help="use last instead of best-validation parameters")
    p.add_argument("--out", help="append results to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient report for a spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--loss", choices=("readout", "cross_entropy"), default="readout")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle-check", help="fused layers vs loop-based reference")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("inspect", help="parameter statistics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DeepFuzzyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
