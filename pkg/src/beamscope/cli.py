"""Command-line entry point: ``beamscope {generate,train,evaluate,oracle,count}``."""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch
from threadpoolctl import threadpool_limits

from .checks import run_all
from .estimators import count_multiplies, save_network
from .evaluation import (
    ExperimentConfig,
    export_csv,
    evaluation_set,
    run_sweep,
    sensing_for,
    training_sets,
)
from .measurement import load_dataset, save_dataset, save_sensing
from .training import train_layer_by_layer

SEED_ENV = "BEAMSCOPE_SEED"
logger = logging.getLogger("beamscope")


class UsageError(Exception):
    pass


def _parser():
    parser = argparse.ArgumentParser(prog="beamscope",
                                     description="Beamspace channel estimation experiments.")
    parser.add_argument("--config", type=Path, help="experiment TOML file")
    parser.add_argument("--seed", type=int, help=f"master seed (fallback: ${SEED_ENV}, then the config)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads; 1 is the reproducible reference path")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="write the sensing matrix and train/val/test datasets")
    train = sub.add_parser("train", help="train the learned estimators layer by layer")
    train.add_argument("--estimator", action="append", default=None,
                       help="train only this estimator (repeatable)")
    ev = sub.add_parser("evaluate", help="NMSE sweep over the SNR grid, written as CSV")
    ev.add_argument("--output", type=Path, help="CSV path (default: the config's results path)")
    oracle = sub.add_parser("oracle", help="check derivatives and gradients against references")
    oracle.add_argument("--quick", action="store_true", help="fewer probes")
    count = sub.add_parser("count", help="complex multiplies per channel estimate")
    count.add_argument("--n", type=int, default=256)
    count.add_argument("--m", type=int, default=128)
    count.add_argument("--amp-iterations", type=int, default=10)
    count.add_argument("--layers", type=int, default=8)
    count.add_argument("--nc", type=int, default=4)
    count.add_argument("--sparsity", type=int, default=24)
    return parser


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return None


def _config(args):
    if args.config is None:
        raise UsageError(f"`{args.command}` needs --config")
    cfg = ExperimentConfig.from_toml(args.config)
    seed = _seed(args)
    return cfg if seed is None else cfg.with_seed(seed)


def _dataset_paths(cfg, index):
    return cfg.path(f"train_{index}.bsds"), cfg.path(f"val_{index}.bsds")


def cmd_generate(args):
    cfg = _config(args)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    sensing_path = cfg.path("sensing.npy")
    if sensing_path.exists():
        sensing_path.unlink()
    sys_ = sensing_for(cfg)
    save_sensing(sensing_path, sys_)
    for index, (train, val) in enumerate(training_sets(cfg, sys_)):
        train_path, val_path = _dataset_paths(cfg, index)
        save_dataset(train_path, train)
        save_dataset(val_path, val)
    test_path = cfg.path("test.bsds")
    if test_path.exists():
        test_path.unlink()
    save_dataset(test_path, evaluation_set(cfg, sys_))
    print(f"wrote sensing matrix and datasets to {cfg.output_dir}")
    return 0


def _training_data(cfg, sys_):
    paths = [_dataset_paths(cfg, i) for i in range(len(cfg.train_snr_ranges))]
    if all(t.exists() and v.exists() for t, v in paths):
        return [(load_dataset(t), load_dataset(v)) for t, v in paths]
    return training_sets(cfg, sys_)


def cmd_train(args):
    cfg = _config(args)
    learned = [spec for spec in cfg.estimators if spec.learned]
    if args.estimator:
        unknown = set(args.estimator) - {spec.name for spec in learned}
        if unknown:
            raise UsageError(f"no learned estimator named {sorted(unknown)} in {args.config}")
        learned = [spec for spec in learned if spec.name in args.estimator]
    if not learned:
        raise UsageError(f"{args.config} configures no learned estimators")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    sys_ = sensing_for(cfg)
    data = _training_data(cfg, sys_)
    for spec in learned:
        if len(spec.checkpoints) != len(data):
            raise UsageError(f"estimator {spec.name!r} needs {len(data)} checkpoint path(s), "
                             f"one per training SNR range")
        train_cfg = cfg.train
        if train_cfg.nc != spec.nc:
            train_cfg = replace(train_cfg, nc=spec.nc)
        for (train, val), name in zip(data, spec.checkpoints):
            net, report = train_layer_by_layer(sys_, train, val, spec.network_kind, spec.layers,
                                               train_cfg)
            path = cfg.path(name)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_network(path, net)
            report.to_csv(path.with_name(path.name + ".report.csv"))
            print(f"{spec.name}: {report.total_steps} steps, final validation loss "
                  f"{report.subprocedure_val_loss[-1]:.6g} -> {path}")
    return 0


def cmd_evaluate(args):
    cfg = _config(args)
    result = run_sweep(cfg, threads=args.threads)
    out = args.output or cfg.path(cfg.results)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_csv(result, out)
    for row in result.rows:
        print(f"{row.estimator:>10s} {row.snr_db:6.1f} dB  NMSE {row.nmse_db:8.3f} dB")
    print(f"wrote {out}")
    return 0


def cmd_oracle(args):
    results = run_all(quick=args.quick)
    for res in results:
        print(res.line())
    return 0 if all(res.passed for res in results) else 1


def cmd_count(args):
    n, m = args.n, args.m
    rows = [
        ("OMP", f"S={args.sparsity}", count_multiplies("omp", n, m, args.sparsity)),
        ("AMP", f"T={args.amp_iterations}", count_multiplies("amp", n, m, args.amp_iterations)),
        ("LAMP", f"T={args.layers}", count_multiplies("lamp", n, m, args.layers)),
        ("GM-LAMP", f"T={args.layers}, Nc={args.nc}",
         count_multiplies("gmlamp", n, m, args.layers, args.nc)),
    ]
    print(f"complex multiplies per estimate, N={n}, M={m}")
    for name, setting, value in rows:
        print(f"{name:<8s} {setting:<14s} {value:>12,d}  ({value:.2e})")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "oracle": cmd_oracle,
    "count": cmd_count,
}


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    torch.set_num_threads(args.threads)
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"beamscope: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, TypeError, FloatingPointError) as exc:
        print(f"beamscope: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
