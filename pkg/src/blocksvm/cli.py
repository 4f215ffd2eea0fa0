"""Command-line interface: ``blocksvm <subcommand> ...``.

Subcommands: gen-synth, transform, train, eval, experiment, verify.
The key is read from ``--key`` (hex) or the BLOCKSVM_KEY environment variable.
Exit status is 0 only on full success.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .dataset_io import (
    DatasetError,
    load_directory,
    read_stats,
    synth_faces,
    write_dataset,
    write_image_tree,
    write_stats,
)
from .experiment import (
    NO_KEY_MODES,
    ExperimentConfig,
    ExperimentError,
    accuracy,
    emit_report,
    no_key_inputs,
    render_text,
    run_protocol,
    verify_invariants,
)
from .kernels import KernelSpec
from .keymat import KEY_ENV_VAR, InvalidKeyError, SecretKey
from .svm import ConvergenceError, ModelFormatError, load_model, predict_multiclass, save_model, train_multiclass
from .transform import STEP_NAMES, TransformConfig, TransformError, transform_dataset, zscore_fit

log = logging.getLogger("blocksvm")


class CliError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _steps(text: str) -> tuple[str, ...]:
    steps = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = set(steps) - set(STEP_NAMES)
    if bad:
        raise argparse.ArgumentTypeError(f"unknown steps {sorted(bad)}; choose from {','.join(STEP_NAMES)}")
    return steps


def _key(args, required: bool = True) -> SecretKey | None:
    if getattr(args, "key", None):
        return SecretKey.from_hex(args.key)
    key = SecretKey.from_env()
    if key is None and required:
        raise CliError(f"a key is required: pass --key HEX or set {KEY_ENV_VAR}")
    return key


def _kernel(args) -> KernelSpec:
    if args.kernel == "rbf":
        return KernelSpec.rbf(args.gamma)
    if args.kernel == "poly":
        return KernelSpec.poly(args.gamma, args.degree, args.coef0)
    return KernelSpec.linear()


def _add_transform_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--key", help=f"master key as hex (>= 16 bytes); defaults to ${KEY_ENV_VAR}")
    p.add_argument("--block-size", type=int, default=2, help="block size M")
    p.add_argument("--steps", type=_steps, default=STEP_NAMES, help="comma-separated steps")


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--size", type=_size, help="resize images to HxW")
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--lenient", action="store_true", help="skip unreadable images instead of failing")


def _add_kernel_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel", choices=("rbf", "poly", "linear"), default="rbf")
    p.add_argument("--C", type=float, default=512.0)
    p.add_argument("--gamma", type=float, default=1e-4)
    p.add_argument("--degree", type=int, default=2)
    p.add_argument("--coef0", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-3)


def cmd_gen_synth(args) -> int:
    data = synth_faces(args.classes, args.per_class, args.height, args.width, args.seed, args.noise)
    write_image_tree(data, args.output)
    log.info("wrote %d images in %d classes to %s", len(data), args.classes, args.output)
    return 0


def cmd_transform(args) -> int:
    data = load_directory(args.input, args.channels, args.size, not args.lenient)
    cfg = TransformConfig.from_steps(args.block_size, _key(args, required=False), args.steps)
    stats = read_stats(args.stats) if args.stats else None
    out, stats = transform_dataset(data.images, cfg, stats)
    write_dataset(args.output, out, data.labels)
    if args.save_stats and stats is not None:
        write_stats(args.save_stats, stats)
    log.info("transformed %d images -> %s", len(data), args.output)
    return 0


def cmd_train(args) -> int:
    data = load_directory(args.train_dir, args.channels, args.size, not args.lenient)
    cfg = TransformConfig.from_steps(args.block_size, _key(args, required=False), args.steps)
    X, stats = transform_dataset(data.images, cfg)
    t0 = time.perf_counter()
    model = train_multiclass(
        X, data.labels, args.C, _kernel(args), args.tol, stats=stats, transform=cfg.fingerprint()
    )
    log.info("trained %d pairwise models in %.2fs", len(model.pairs), time.perf_counter() - t0)
    save_model(model, args.model_out)
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    data = load_directory(args.test_dir, args.channels, args.size, not args.lenient)
    key = _key(args, required=False)
    fp = model.transform or {"block_size": 1, "steps": []}
    if key is not None:
        cfg = TransformConfig.from_steps(fp["block_size"], key, fp["steps"])
        X, _ = transform_dataset(data.images, cfg, model.stats)
        mode = "with key"
    else:
        plain = None
        if args.no_key_normalization == "baseline-stats":
            if args.stats:
                plain = read_stats(args.stats)
            elif args.train_dir:
                plain = zscore_fit(load_directory(args.train_dir, args.channels, args.size, not args.lenient).images)
            else:
                raise CliError("baseline-stats needs --stats or --train-dir to normalize untransformed images")
        X = no_key_inputs(data.images, args.no_key_normalization, plain)
        mode = "without key"
    pred = predict_multiclass(model, X)
    acc = accuracy(np.asarray(pred).astype(str), data.labels.astype(str))
    print(f"accuracy ({mode}): {acc:.4f}")
    if args.predictions_out:
        Path(args.predictions_out).write_text("\n".join(str(p) for p in pred) + "\n", encoding="utf-8")
    return 0


def cmd_experiment(args) -> int:
    if args.config:
        config = ExperimentConfig.from_text(Path(args.config).read_text(encoding="utf-8"))
    else:
        config = ExperimentConfig()
    overrides = {
        "dataset": args.dataset,
        "seed": args.seed,
        "block_sizes": args.block_sizes,
        "kernel": args.kernel,
        "C": args.C,
        "gamma": args.gamma,
        "degree": args.degree,
        "image_size": args.size,
        "train_per_class": args.train_per_class,
        "test_per_class": args.test_per_class,
        "no_key_normalization": args.no_key_normalization,
        "baseline_normalization": args.baseline_normalization,
    }
    for name, value in overrides.items():
        if value is not None:
            setattr(config, name, value)
    config.__post_init__()
    t0 = time.perf_counter()
    report = run_protocol(config, _key(args), jobs=args.jobs)
    log.info("experiment finished in %.2fs", time.perf_counter() - t0)
    sys.stdout.write(render_text(report))
    if args.report:
        emit_report(report, args.report, "text")
    if args.csv:
        emit_report(report, args.csv, "csv")
    if args.save_config:
        Path(args.save_config).write_text(config.to_text(), encoding="utf-8")
    return 0


def cmd_verify(args) -> int:
    results = verify_invariants(seed=args.seed, pairs=args.pairs, fault_injection=args.fault_injection)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  ({r.detail})" if r.detail else ""
        print(f"{status}  {r.name:<52} max deviation {r.deviation:.3e}{extra}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} properties hold")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blocksvm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic face-like dataset as class directories")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--height", type=int, default=20)
    p.add_argument("--width", type=int, default=20)
    p.add_argument("--noise", type=float, default=12.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("transform", help="apply the keyed transformation to an image directory")
    _add_transform_args(p)
    _add_data_args(p)
    p.add_argument("--input", required=True, help="root/<class>/<image> directory")
    p.add_argument("--output", required=True, help="transformed dataset file")
    p.add_argument("--stats", help="apply these normalization statistics instead of fitting")
    p.add_argument("--save-stats", help="write the fitted normalization statistics here")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("train", help="transform a training directory and train a one-vs-one SVM")
    _add_transform_args(p)
    _add_data_args(p)
    _add_kernel_args(p)
    p.add_argument("--train-dir", required=True)
    p.add_argument("--model-out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model with a key, or without one")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--test-dir", required=True)
    p.add_argument("--key", help="omit (and leave the env var unset) to evaluate without key")
    p.add_argument("--no-key-normalization", choices=NO_KEY_MODES, default="baseline-stats")
    p.add_argument("--stats", help="plain-data statistics for --no-key-normalization baseline-stats")
    p.add_argument("--train-dir", help="fit plain-data statistics from this directory")
    p.add_argument("--predictions-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="baseline / with key / without key accuracy table")
    p.add_argument("--config", help="plain-text 'name = value' config file")
    p.add_argument("--key")
    p.add_argument("--dataset", help="'synth' or a class-directory root")
    p.add_argument("--seed", type=int)
    p.add_argument("--block-sizes", type=lambda s: tuple(int(v) for v in s.split(",")))
    p.add_argument("--kernel", choices=("rbf", "poly", "linear"))
    p.add_argument("--C", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--degree", type=int)
    p.add_argument("--size", type=_size)
    p.add_argument("--train-per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--no-key-normalization", choices=NO_KEY_MODES)
    p.add_argument("--baseline-normalization", choices=("zscore", "raw"))
    p.add_argument("--report", help="write the text table here")
    p.add_argument("--csv", help="write the CSV table here")
    p.add_argument("--save-config", help="write the effective config here")
    p.add_argument("--jobs", type=int, default=1, help="run the per-block-size trainings in parallel")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("verify", help="check the distance / inner-product / Gram invariants")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--fault-injection", action="store_true", help="use mismatched flip masks")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (
        CliError,
        InvalidKeyError,
        DatasetError,
        TransformError,
        ExperimentError,
        ConvergenceError,
        ModelFormatError,
        OSError,
    ) as exc:
        print(f"blocksvm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
