"""Command line front end.

Subcommands: gen-data, run, sweep, eval-preds, plot.  Configuration comes
from built-in defaults, overridden by a JSON config file, overridden by
explicit flags.  Exit codes: 0 success, 2 configuration error, 3 data
error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Optional

import numpy as np

from . import datamodel as dm
from .datamodel import DataError, DatasetSpec
from .detector import load_predictions, postprocess
from .evaluation import (
    mean_average_precision,
    plot_curves,
    review_precision,
    write_metrics_csv,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    load_config_file,
    run_experiment,
    run_multi,
)
from .query import QueryStrategy, class_weights, image_query_score
from .review import BudgetLedger, ProposalKind, ReviewPolicy, run_review

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; explicit flags win over it")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-test", type=int, dest="n_test")
    p.add_argument("--init-images", type=int, dest="init_images")
    p.add_argument("--budget", type=int)
    p.add_argument("--cycles", type=int)
    p.add_argument("--lambda", type=float, dest="review_fraction",
                   help="fraction of the cycle budget spent on review")
    p.add_argument("--alpha", type=float, dest="miss_share",
                   help="share of the review budget spent on misses")
    p.add_argument("--label-noise", type=float, dest="label_noise")
    p.add_argument("--review-noise", type=float, dest="review_noise")
    p.add_argument("--score-threshold", type=float, dest="score_threshold")
    p.add_argument("--match-iou", type=float, dest="match_iou")
    p.add_argument("--nms-iou", type=float, dest="nms_iou")
    p.add_argument("--class-skew", type=float, dest="class_skew")
    p.add_argument("--strategy", choices=[s.value for s in QueryStrategy])
    p.add_argument("--policy", choices=[p_.value.replace("_", "-") for p_ in ReviewPolicy])
    p.add_argument("--dataset", dest="dataset_path", help="run on an existing dataset file")
    p.add_argument("--noise", dest="noise_path", help="noise sidecar for --dataset")
    p.add_argument("--out", dest="out_dir", help="run output directory")


_CONFIG_KEYS = [f.name for f in dataclasses.fields(ExperimentConfig) if f.name != "surrogate"]


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {}
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if "policy" in overrides:
        overrides["policy"] = overrides["policy"].replace("-", "_")
    if args.config:
        return load_config_file(args.config, overrides)
    return ExperimentConfig.from_dict(overrides)


def _cmd_gen_data(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    spec = DatasetSpec(
        n_train=config.n_train,
        n_test=config.n_test,
        num_classes=config.num_classes,
        boxes_per_image=config.boxes_per_image,
        image_size=config.image_size,
        box_size=config.box_size,
        class_weights=config.class_mix(),
    )
    store = dm.generate_dataset(spec, np.random.default_rng([config.seed, 1]))
    if args.with_noise:
        dm.inject_label_noise(
            store, config.label_noise, np.random.default_rng([config.seed, 2])
        )
    dm.save_dataset(store, args.dataset_out)
    print(f"wrote {args.dataset_out}: {len(store.train)} train / {len(store.test)} test images, "
          f"{store.train_label_count()} train boxes")
    if args.noise_out:
        dm.save_noise(store, args.noise_out)
        missed, flipped = dm.noise_counts(store)
        print(f"wrote {args.noise_out}: {missed} missed, {flipped} flipped")
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if not config.out_dir:
        raise ConfigError("run needs --out (or out_dir in the config file)")
    seeds = _parse_seeds(args.seeds) if args.seeds else None
    if seeds:
        states = run_multi(config, seeds, config.out_dir)
        final = [s.metrics[-1].mean_ap for s in states]
        print(f"{len(seeds)} seeds done; final mAP mean "
              f"{float(np.mean(final)):.4f} (std {float(np.std(final, ddof=1)) if len(final) > 1 else 0.0:.4f})")
    else:
        state = run_experiment(config, config.out_dir)
        print(f"run done; final mAP {state.metrics[-1].mean_ap:.4f}, "
              f"total budget {state.metrics[-1].budget_total}")
    print(f"artifacts in {config.out_dir}")
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if not config.out_dir:
        raise ConfigError("sweep needs --out (or out_dir in the config file)")
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad --lambda list {args.lambdas!r}") from None
    if not lambdas:
        raise ConfigError("empty --lambda list")
    seeds = _parse_seeds(args.seeds) if args.seeds else [config.seed]
    for lam in lambdas:
        sub = dataclasses.replace(config, review_fraction=lam)
        lam_dir = os.path.join(config.out_dir, f"lambda_{lam:g}")
        states = run_multi(sub, seeds, lam_dir)
        final = float(np.mean([s.metrics[-1].mean_ap for s in states]))
        print(f"lambda={lam:g}: final mAP {final:.4f} ({len(seeds)} seed(s)) -> {lam_dir}")
    return EXIT_OK


def _cmd_eval_preds(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if not config.dataset_path:
        raise ConfigError("eval-preds needs --dataset")
    store = dm.load_dataset(config.dataset_path, config.noise_path)
    preds_raw = load_predictions(args.predictions, store, renormalize=args.renormalize)
    preds = {
        image_id: postprocess(p, config.score_threshold, config.nms_iou)
        for image_id, p in preds_raw.items()
    }

    # every train image with predictions is considered acquired and reviewable
    train_ids = sorted(
        img.id for img in store.train if img.id in preds
    )
    for image_id in train_ids:
        dm.reveal_labels(store, image_id)

    stats_counts = np.zeros(config.num_classes, dtype=int)
    for img in store.active_train_images():
        for lab in img.present_labels():
            stats_counts[lab.observed_class - 1] += 1
    weights = class_weights(stats_counts)
    scores = {i: image_query_score(preds[i], weights) for i in train_ids}

    rng = np.random.default_rng([config.seed, 3])
    ledger = BudgetLedger(
        budget=config.budget,
        review_fraction=config.review_fraction,
        miss_share=config.miss_share,
    )
    ledger.spent_query = ledger.query_budget  # whole file is already labeled
    report = run_review(
        store, train_ids, preds, ReviewPolicy(config.policy), ledger,
        review_noise=config.review_noise, match_iou=config.match_iou, rng=rng,
    )

    test_preds = {img.id: preds.get(img.id, []) for img in store.test}
    result: dict = {
        "images_evaluated": len(train_ids),
        "reviews_miss": ledger.spent_review_miss,
        "reviews_flip": ledger.spent_review_flip,
        "precision_miss": review_precision(report.outcomes, ProposalKind.MISS),
        "precision_flip": review_precision(report.outcomes, ProposalKind.FLIP),
        "query_scores": {str(i): round(scores[i], 6) for i in train_ids},
    }
    if any(test_preds.values()):
        ap = mean_average_precision(test_preds, store.test, config.num_classes)
        result["map"] = round(ap.mean, 6)
        result["per_class_ap"] = {str(c): round(v, 6) for c, v in ap.per_class.items()}
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        print(f"wrote {args.report}")
    else:
        print(text)
    return EXIT_OK


def _cmd_plot(args: argparse.Namespace) -> int:
    if not os.path.exists(args.csv):
        raise DataError(f"{args.csv}: no such file")
    plot_curves(args.csv, args.out, title=args.title)
    print(f"wrote {args.out}")
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad --seeds list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alreview",
        description="Active learning with a noisy annotation oracle and budgeted label review",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    _add_config_flags(p)
    p.add_argument("--dataset-out", required=True, help="dataset JSON output path")
    p.add_argument("--noise-out", help="noise sidecar output path")
    p.add_argument("--with-noise", action="store_true",
                   help="inject label noise before writing the sidecar")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("run", help="run an experiment")
    _add_config_flags(p)
    p.add_argument("--seeds", help="comma-separated seed list for a multi-seed run")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="run a review-fraction ablation grid")
    _add_config_flags(p)
    p.add_argument("--lambda", dest="lambdas", required=True,
                   help="comma-separated review fractions, e.g. 0.0,0.1,0.2,0.3,0.4")
    p.add_argument("--seeds", help="comma-separated seed list per grid point")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("eval-preds", help="score, review and evaluate an external predictions file")
    _add_config_flags(p)
    p.add_argument("--predictions", required=True, help="predictions JSON file")
    p.add_argument("--renormalize", action="store_true",
                   help="rescale probability vectors that do not sum to 1")
    p.add_argument("--report", help="write the report JSON here instead of stdout")
    p.set_defaults(func=_cmd_eval_preds)

    p = sub.add_parser("plot", help="render curves from a metrics or aggregate CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True, help="output graphic (.svg or .pdf)")
    p.add_argument("--title", default="")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
