"""Command-line surface: fit, predict, evaluate, leaderboard.

Exit codes: 0 success, 2 usage, 3 data error, 4 budget too small,
5 corrupt run directory. Fatal errors print a single machine-readable
line to stderr: ``tabstack: <code>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .errors import (
    DataError,
    LabelNotFoundError,
    TabstackError,
    UsageError,
)
from .metrics import build_report
from .orchestrator import (
    StackPlan,
    fit as run_fit,
    load_bundle,
    resume as run_resume,
)
from .persist import CHECKPOINT_NAME, Checkpoint, read_json
from .schema import load_csv

DEFAULT_TIME_LIMIT = 3600.0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tabstack",
        description="Stacked-ensemble AutoML for tabular CSV files.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="train a model directory from a CSV")
    f.add_argument("--train", help="training CSV path")
    f.add_argument("--test", help="optional labeled CSV scored after training")
    f.add_argument("--label", help="name of the label column")
    f.add_argument("--eval-metric", dest="eval_metric", help="metric to optimize")
    f.add_argument(
        "--time-limit",
        dest="time_limit",
        type=float,
        default=None,
        help=f"training budget in seconds (default {DEFAULT_TIME_LIMIT:.0f})",
    )
    f.add_argument(
        "--auto-stack",
        dest="auto_stack",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="bagging + multi-layer stacking (--no-auto-stack: single holdout)",
    )
    f.add_argument("--out", required=True, help="output model directory")
    f.add_argument(
        "--continue-training",
        dest="continue_training",
        action="store_true",
        help="resume an interrupted run in --out",
    )
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--no-repeat", dest="no_repeat", action="store_true")
    f.add_argument("--no-multistack", dest="no_multistack", action="store_true")
    f.add_argument("--no-bag", dest="no_bag", action="store_true")
    f.add_argument("--no-network", dest="no_network", action="store_true")

    pr = sub.add_parser("predict", help="write predictions.csv for a CSV")
    pr.add_argument("--out", required=True, help="model directory from fit")
    pr.add_argument("--test", required=True, help="CSV to predict")
    pr.add_argument(
        "--predictions-file",
        dest="predictions_file",
        help="where to write predictions (default: <out>/predictions.csv)",
    )

    ev = sub.add_parser("evaluate", help="score one or more model directories")
    ev.add_argument("model_dirs", nargs="+", help="model directories from fit")
    ev.add_argument("--test", required=True, help="labeled CSV to score")
    ev.add_argument("--eval-metric", dest="eval_metric", help="metric override")
    ev.add_argument(
        "--report-prefix",
        dest="report_prefix",
        default="report",
        help="basename for report.csv/report.json with multiple model dirs",
    )

    lb = sub.add_parser("leaderboard", help="print a model's validation leaderboard")
    lb.add_argument("--out", required=True, help="model directory from fit")
    return p


def _print_leaderboard(payload: dict) -> None:
    print(f"selection metric: {payload['selection_metric']}")
    header = f"{'family':<22}{'repeats':>8}{'oof_loss':>12}{'weight':>8}"
    print(header)
    print("-" * len(header))
    for row in payload["leaderboard"]:
        print(
            f"{row['family']:<22}{row['repeats']:>8}"
            f"{row['oof_loss']:>12.6f}{row['weight']:>8.3f}"
        )


def _print_layers(payload: dict) -> None:
    for info in payload["layers"]:
        parts = [f"{f} x{info['repeats'][f]}" for f in info["families"]]
        print(f"layer {info['layer']}: {', '.join(parts)}")


def cmd_fit(args) -> int:
    if args.continue_training:
        ckpt_path = os.path.join(args.out, CHECKPOINT_NAME)
        if os.path.exists(ckpt_path):
            ckpt = Checkpoint.load(args.out)
            # never report a run complete without checking its files
            ckpt.verify_files(args.out)
            if ckpt.find_decision("run_complete") is not None:
                print("run already complete; nothing to do")
                payload = read_json(os.path.join(args.out, "ensemble.json"))
                _print_leaderboard(payload)
                return 0
        train = None
        if args.train:
            if not args.label:
                raise UsageError("--label is required with --train")
            train = load_csv(args.train, label=args.label)
        bundle = run_resume(args.out, train=train, time_budget=args.time_limit)
    else:
        if not args.train:
            raise UsageError("--train is required")
        if not args.label:
            raise UsageError("--label is required")
        plan = StackPlan(
            time_budget=(
                args.time_limit if args.time_limit is not None else DEFAULT_TIME_LIMIT
            ),
            metric=args.eval_metric,
            seed=args.seed,
            no_repeat=args.no_repeat,
            no_multistack=args.no_multistack,
            no_bag=args.no_bag or not args.auto_stack,
            no_network=args.no_network,
        )
        try:
            plan.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        train = load_csv(args.train, label=args.label)
        bundle = run_fit(train, plan, args.out, train_path=args.train)

    payload = read_json(os.path.join(args.out, "ensemble.json"))
    _print_layers(payload)
    _print_leaderboard(payload)
    print(f"model directory: {args.out}")

    if args.test:
        try:
            test = load_csv(args.test, label=bundle.metadata["label"])
        except LabelNotFoundError:
            print("test file has no label column; skipping scoring", file=sys.stderr)
            return 0
        res = bundle.evaluate(test)
        print(f"test {res['metric']}: loss={res['loss']:.6f} score={res['score']:.6f}")
    return 0


def _write_predictions(path, result, label_name: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if result.problem_kind == "regression":
            w.writerow([label_name])
            for v in result.values:
                w.writerow([str(float(v))])
        else:
            w.writerow([label_name] + [f"prob_{c}" for c in result.classes])
            for i, lab in enumerate(result.labels):
                w.writerow([lab] + [str(float(p)) for p in result.probabilities[i]])


def cmd_predict(args) -> int:
    bundle = load_bundle(args.out)
    test = load_csv(args.test, label=None)
    result = bundle.predict(test)
    out_path = args.predictions_file or os.path.join(args.out, "predictions.csv")
    _write_predictions(out_path, result, bundle.metadata["label"])
    print(out_path)
    return 0


def cmd_evaluate(args) -> int:
    bundles = [load_bundle(d) for d in args.model_dirs]
    datasets_cache: dict = {}

    def labeled(label: str):
        if label not in datasets_cache:
            try:
                datasets_cache[label] = load_csv(args.test, label=label)
            except LabelNotFoundError as exc:
                raise UsageError(str(exc)) from None
        return datasets_cache[label]

    if len(bundles) == 1:
        res = bundles[0].evaluate(
            labeled(bundles[0].metadata["label"]), args.eval_metric
        )
        print(f"{res['metric']} loss={res['loss']:.6g} score={res['score']:.6g}")
        return 0

    dataset_name = os.path.basename(args.test)
    results: dict = {}
    for d, b in zip(args.model_dirs, bundles):
        try:
            res = b.evaluate(labeled(b.metadata["label"]), args.eval_metric)
            results[d] = {dataset_name: res["loss"]}
        except TabstackError as exc:
            logging.getLogger(__name__).warning("%s failed: %s", d, exc)
            results[d] = {dataset_name: float("nan")}
    report = build_report(results)
    csv_path = f"{args.report_prefix}.csv"
    json_path = f"{args.report_prefix}.json"
    report.to_csv(csv_path)
    report.to_json(json_path)
    print(report.format_table())
    print(f"wrote {csv_path} and {json_path}")
    return 0


def cmd_leaderboard(args) -> int:
    ens_path = os.path.join(args.out, "ensemble.json")
    if not os.path.exists(ens_path):
        raise DataError(f"{args.out} has no ensemble.json; run fit (or resume) first")
    payload = read_json(ens_path)
    _print_layers(payload)
    _print_leaderboard(payload)
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "leaderboard": cmd_leaderboard,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except TabstackError as exc:
        print(f"tabstack: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
