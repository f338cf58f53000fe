"""Command-line surface: dataset generation, training, injection runs,
log analytics, and gradient verification.

Every run resolves its options (flags override an optional key=value
config file), requires an explicit seed where randomness is involved, and
writes a ``manifest.json`` that suffices to reproduce the invocation.

Exit codes: 0 success, 1 expectation failure, 2 usage error, 3 data or
format error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, datasets, experiments, logs
from .errors import ConfigurationError, DivergenceError, FormatError

EXIT_OK = 0
EXIT_EXPECTATION = 1
EXIT_USAGE = 2
EXIT_DATA = 3


class UsageError(Exception):
    pass


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        apply_config_file(args)
        return args.entry(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, ConfigurationError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="multicaps",
        description="Overlapping-digit capsule networks and the data-injection protocol",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.set_defaults(command=None)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="synthesize and serialize a dataset family member")
    p.add_argument("--config", type=Path, help="key=value file; flags override it")
    p.add_argument("--variant", choices=("full", "exclude", "lowdata"))
    p.add_argument("--digit", type=int, help="held-out digit for exclude/lowdata")
    p.add_argument("--k", type=int, help="distinct source count for lowdata")
    p.add_argument("--allow-any-k", action="store_true",
                   help="lift the restriction of k to the published list")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--train-size", type=int, default=200_000)
    p.add_argument("--test-size", type=int, default=10_000)
    p.add_argument("--source", choices=("builtin", "idx"), default="builtin")
    p.add_argument("--images", type=Path, help="IDX training images (source=idx)")
    p.add_argument("--labels", type=Path, help="IDX training labels (source=idx)")
    p.add_argument("--test-images", type=Path, help="IDX test images (source=idx)")
    p.add_argument("--test-labels", type=Path, help="IDX test labels (source=idx)")
    p.set_defaults(entry=cmd_gen_data)

    p = sub.add_parser("train", help="train one architecture on a generated dataset")
    add_run_options(p)
    p.add_argument("--data-dir", type=Path, help="directory from gen-data")
    p.add_argument("--steps", type=int)
    p.set_defaults(entry=cmd_train)

    p = sub.add_parser("inject", help="train across a dataset switch and report recovery")
    add_run_options(p)
    p.add_argument("--pre-dir", type=Path, help="deficient dataset directory")
    p.add_argument("--post-dir", type=Path, help="injected dataset directory")
    p.add_argument("--test-dir", type=Path, help="test-suite directory (default: post-dir)")
    p.add_argument("--injection-step", type=int)
    p.add_argument("--total-steps", type=int)
    p.add_argument("--condition", default=None, help="label for the log column")
    p.set_defaults(entry=cmd_inject)

    p = sub.add_parser("eval", help="evaluate a checkpoint on serialized datasets")
    p.add_argument("--config", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True,
                   help="one .mcds file or a gen-data directory")
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(entry=cmd_eval)

    p = sub.add_parser("analyze-log", help="recovery/peak analysis of an accuracy log")
    p.add_argument("--config", type=Path)
    p.add_argument("--log", default="reference",
                   help="log path, or 'reference' for the bundled published run")
    p.add_argument("--injection-step", type=int, default=None)
    p.add_argument("--rule", choices=("last-pre", "fixed"), default="last-pre")
    p.add_argument("--threshold", type=float, default=None, help="for rule=fixed")
    p.add_argument("--conditions", default=None, help="comma-separated column names")
    p.add_argument("--expect", action="append", default=[],
                   metavar="KEY=VALUE",
                   help="assert <condition>_{pre,peak,recovery}=value; repeatable")
    p.add_argument("--tol", type=float, default=0.001)
    p.set_defaults(entry=cmd_analyze_log)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--config", type=Path)
    p.add_argument("--coords", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument(
        "--target",
        choices=("all", "layers", "convnet", "capsnet", "memo"),
        default="all",
    )
    p.set_defaults(entry=cmd_grad_check)
    return parser


def add_run_options(p):
    p.add_argument("--config", type=Path, help="key=value file; flags override it")
    p.add_argument("--arch", choices=("convnet", "capsnet", "memo"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--eval-period", type=int, default=100)
    p.add_argument("--eval-batch-size", type=int, default=256)
    p.add_argument("--width", type=float, default=1.0, help="architecture width scale")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--resume-from", type=Path, help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")


def apply_config_file(args):
    """Fill unset options from a key=value file; explicit flags win."""
    path = getattr(args, "config", None)
    if not path:
        return
    if not Path(path).exists():
        raise UsageError(f"config file not found: {path}")
    overrides = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        overrides[key.strip().replace("-", "_")] = value.strip()
    # argparse already consumed the command line; only fill values the user
    # left at their defaults
    defaults = {a.dest: a.default for a in _current_actions(args)}
    for key, raw in overrides.items():
        if not hasattr(args, key):
            raise UsageError(f"unknown config key {key!r} in {path}")
        if getattr(args, key) == defaults.get(key):
            setattr(args, key, _coerce(raw, defaults.get(key)))


def _current_actions(args):
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return sub.choices[args.command]._actions


def _coerce(raw, default):
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, Path) or default is None:
        return raw if not isinstance(default, Path) else Path(raw)
    return raw


def require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def write_manifest(out_dir, command, args, skip=("entry", "config", "quiet")):
    options = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in skip and k != "command" and not callable(v)
    }
    manifest = {"command": command, "options": options, "package_version": __version__}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args):
    require(args, "variant", "seed", "out")
    if args.variant in ("exclude", "lowdata"):
        require(args, "digit")
    if args.variant == "lowdata":
        require(args, "k")
        if args.k not in datasets.LOWDATA_COUNTS and not args.allow_any_k:
            raise UsageError(
                f"k={args.k} is outside the published list {datasets.LOWDATA_COUNTS}; "
                "pass --allow-any-k to permit it"
            )
    spec = datasets.DatasetSpec(
        variant=args.variant,
        seed=args.seed,
        held_out=args.digit if args.variant != "full" else None,
        k=args.k if args.variant == "lowdata" else None,
        train_size=args.train_size,
        test_size_per_set=args.test_size,
    )
    if args.source == "idx":
        require(args, "images", "labels", "test_images", "test_labels")
        for path in (args.images, args.labels, args.test_images, args.test_labels):
            if not Path(path).exists():
                raise FileNotFoundError(f"IDX input not found: {path}")
        train_pool = datasets.load_idx(args.images, args.labels)
        test_pool = datasets.load_idx(args.test_images, args.test_labels)
    else:
        train_pool, test_pool = datasets.builtin_digit_pools()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_path = out / "train.mcds"
    datasets.write_dataset(
        train_path,
        spec,
        "train",
        None,
        datasets.gen_training_set(spec, train_pool),
        spec.train_size,
    )
    paths = [train_path]
    for (variant, shift), examples in sorted(datasets.gen_test_sets(spec, test_pool).items()):
        path = out / f"test_{variant}_shift{shift}.mcds"
        kind = "test_nine" if variant == "nine" else "test_ten"
        datasets.write_dataset(path, spec, kind, shift, iter(examples), len(examples))
        paths.append(path)
    write_manifest(out, "gen-data", args)
    for path in paths:
        print(f"{_sha256(path)}  {path.name}")
    return EXIT_OK


def _load_dir(data_dir, want_train=True):
    data_dir = Path(data_dir)
    if not data_dir.exists():
        raise FileNotFoundError(f"dataset directory not found: {data_dir}")
    train = None
    if want_train:
        train_path = data_dir / "train.mcds"
        if not train_path.exists():
            raise FileNotFoundError(f"missing train.mcds in {data_dir}")
        train = datasets.load(train_path)
    suite_paths = sorted(data_dir.glob("test_ten_shift*.mcds"))
    if not suite_paths:
        raise FileNotFoundError(f"no ten-digit test sets found in {data_dir}")
    suite = [datasets.load(p).examples for p in suite_paths]
    return train, suite


def _build_or_resume(args):
    if args.resume_from:
        model, extra = checkpoint.load_model(args.resume_from)
        return model, int(extra.get("step", 0))
    require(args, "arch")
    model = experiments.build_model(args.arch, seed=args.seed, width=args.width, dtype=args.dtype)
    return model, 0


def _progress(quiet):
    if quiet:
        return None

    def report(step, loss, accuracy):
        print(f"step {step}: loss {loss:.4f}, accuracy {accuracy:.4f}", flush=True)

    return report


def cmd_train(args):
    require(args, "seed", "out", "data_dir", "steps")
    train, suite = _load_dir(args.data_dir)
    model, start = _build_or_resume(args)
    stream = experiments.MaterializedStream(train.examples, args.batch_size, args.seed)
    out = Path(args.out)
    result = experiments.run_training(
        model,
        stream,
        suite,
        total_steps=start + args.steps,
        eval_period=args.eval_period,
        condition=f"{model.architecture} train",
        start_step=start,
        checkpoint_dir=out / "checkpoints",
        eval_batch_size=args.eval_batch_size,
        progress=_progress(args.quiet),
    )
    write_manifest(out, "train", args)
    logs.save_log(result.series, out / "log.csv", include_header=True)
    print(f"final checkpoint: {result.checkpoints['final']}")
    return EXIT_OK


def cmd_inject(args):
    require(args, "seed", "out", "pre_dir", "post_dir", "injection_step", "total_steps")
    pre_train, pre_suite = _load_dir(args.pre_dir)
    post_train, post_suite = _load_dir(args.post_dir)
    test_dir = args.test_dir
    if test_dir:
        _, suite = _load_dir(test_dir, want_train=False)
    else:
        suite = post_suite
    model, start = _build_or_resume(args)
    if start > args.injection_step:
        raise UsageError(
            f"checkpoint step {start} is already past injection step {args.injection_step}"
        )
    condition = args.condition or f"{model.architecture} injection"
    pre_stream = experiments.MaterializedStream(pre_train.examples, args.batch_size, args.seed)
    post_stream = experiments.MaterializedStream(post_train.examples, args.batch_size, args.seed)
    out = Path(args.out)
    result = experiments.run_with_injection(
        model,
        pre_stream,
        post_stream,
        suite,
        injection_step=args.injection_step,
        total_steps=args.total_steps,
        eval_period=args.eval_period,
        condition=condition,
        checkpoint_dir=out / "checkpoints",
        eval_batch_size=args.eval_batch_size,
        progress=_progress(args.quiet),
        start_step=start,
    )
    write_manifest(out, "inject", args)
    logs.save_log(result.series, out / "log.csv", include_header=True)
    r = result.report
    report = {
        "condition": condition,
        "pre_injection_accuracy": r.pre_injection_accuracy,
        "pre_injection_step": r.pre_injection_step,
        "iterations_to_recover": r.iterations_to_recover,
        "recovery_label": r.recovery_label(),
        "threshold_rule": r.threshold_rule,
        "peak_accuracy": r.peak_accuracy,
        "peak_step": r.peak_step,
        "wall_seconds": result.wall_seconds,
        "cpu_seconds": result.cpu_seconds,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(
        f"{condition}: pre-injection {r.pre_injection_accuracy:.4f}, "
        f"recovery {r.recovery_label()}, peak {r.peak_accuracy:.4f}"
    )
    return EXIT_OK


def cmd_eval(args):
    model, extra = checkpoint.load_model(args.checkpoint)
    data = Path(args.data)
    if data.is_dir():
        _, suite = _load_dir(data, want_train=False)
        accuracy = experiments.evaluate_suite(model, suite, args.batch_size)
        print(f"suite accuracy (mean of {len(suite)} sets): {accuracy:.6f}")
    else:
        dataset = datasets.load(data)
        accuracy = experiments.evaluate(model, dataset.examples, args.batch_size)
        print(f"accuracy on {data.name}: {accuracy:.6f}")
    return EXIT_OK


def cmd_analyze_log(args):
    if args.log == "reference":
        series = logs.load_reference_log()
        injection = args.injection_step or logs.REFERENCE_INJECTION_STEP
        published = logs.PUBLISHED_RESULTS
    else:
        series = logs.load_log(args.log)
        if args.injection_step is None:
            raise UsageError("--injection-step is required for external logs")
        injection = args.injection_step
        published = None
    if args.conditions:
        series.rename_conditions([c.strip() for c in args.conditions.split(",")])
    reports = experiments.reproduce_tables(
        series, injection, rule=args.rule, threshold=args.threshold
    )
    print(experiments.format_table(reports, published))
    failures = check_expectations(args.expect, reports, args.tol)
    for line in failures:
        print(line, file=sys.stderr)
    return EXIT_EXPECTATION if failures else EXIT_OK


def check_expectations(expectations, reports, tol):
    by_condition = {r.condition: r for r in reports}
    failures = []
    for item in expectations:
        if "=" not in item:
            raise UsageError(f"--expect wants KEY=VALUE, got {item!r}")
        key, expected = item.split("=", 1)
        matched = None
        for suffix, getter in (
            ("_peak", lambda r: r.peak_accuracy),
            ("_pre", lambda r: r.pre_injection_accuracy),
            ("_recovery", lambda r: r.recovery_label()),
        ):
            if key.endswith(suffix):
                condition = key[: -len(suffix)]
                if condition not in by_condition:
                    raise UsageError(f"unknown condition {condition!r} in --expect {item}")
                matched = getter(by_condition[condition])
                break
        if matched is None:
            raise UsageError(f"--expect key {key!r} must end with _peak, _pre, or _recovery")
        if key.endswith("_recovery"):
            if str(matched) != expected:
                failures.append(f"expectation failed: {key} = {matched}, wanted {expected}")
        else:
            if matched is None or abs(matched - float(expected)) > tol:
                failures.append(
                    f"expectation failed: {key} = {matched}, wanted {expected} +/- {tol}"
                )
    return failures


def cmd_grad_check(args):
    from . import verify

    if args.target == "layers":
        results = verify.check_layer_gradients(coords=args.coords, seed=args.seed)
    elif args.target == "convnet":
        results = {"convnet_loss": verify.check_convnet_loss(coords=args.coords, seed=args.seed)}
    elif args.target == "capsnet":
        results = {"capsnet_loss": verify.check_capsnet_loss(coords=args.coords, seed=args.seed)}
    elif args.target == "memo":
        results = verify.check_memo_losses(coords=args.coords, seed=args.seed)
    else:
        results = verify.run_all_checks(coords=args.coords, seed=args.seed)
    failed = False
    for name, result in results.items():
        ok = result.ok(args.tolerance)
        failed = failed or not ok
        print(
            f"{'PASS' if ok else 'FAIL'} {name:<28} "
            f"max_rel_error={result.max_rel_error:.3e} coords={result.checked}"
        )
    return EXIT_EXPECTATION if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
