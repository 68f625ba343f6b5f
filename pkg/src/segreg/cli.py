"""Command-line driver: dataset generation, training, evaluation and reports.

All per-run artifacts live under ``<out>/<method>_<rate>_<seed>/``: config,
split ids, training logs, checkpoints, per-iteration pseudo-masks and, after
``eval``, the metrics CSV and JSON summary.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import torch

from .datasets import (DataConfig, derive_rng, generate_synthetic, load_dataset,
                       load_split, make_split, save_dataset)
from .errors import ContractViolation
from .metrics import MetricRow, MetricsReport, evaluate, wilcoxon_signed_rank
from .models import load_checkpoint, save_checkpoint, seg_forward
from .panels import render_iteration_panel
from .pseudo_masks import combined_inference
from .trainer import (ExperimentConfig, TrainingLogger, train_fully_supervised,
                      train_joint, train_mean_teacher)

METHODS = ("fs", "mt", "joint")


def run_dir_name(method: str, rate: float, seed: int) -> str:
    return f"{method}_{rate:g}_{seed}"


def _cmd_gen_data(args) -> int:
    samples = generate_synthetic(DataConfig(count=args.count, image_size=args.size),
                                 seed=args.seed)
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _load_config(args) -> ExperimentConfig:
    cfg = (ExperimentConfig.from_json(args.config) if args.config
           else ExperimentConfig.desk_scale())
    if args.rate is not None:
        cfg = replace(cfg, annotation_rate=args.rate)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    samples = load_dataset(args.data)
    size = tuple(samples[0].image.shape)
    if size != (cfg.image_size, cfg.image_size):
        raise ContractViolation(f"dataset images are {size[0]}x{size[1]} but the "
                                f"config expects {cfg.image_size}x{cfg.image_size}")
    split = make_split(samples, cfg.annotation_rate, cfg.seed, cfg.test_fraction,
                       cfg.val_count, cfg.n_annotated)
    run = Path(args.out) / run_dir_name(args.method, cfg.annotation_rate, cfg.seed)
    run.mkdir(parents=True, exist_ok=True)
    cfg.to_json(run / "config.json")
    split.save(run / "split.json")
    (run / "run.json").write_text(json.dumps(
        {"method": args.method, "rate": cfg.annotation_rate, "seed": cfg.seed}, indent=1))

    logger = TrainingLogger()
    if args.method == "fs":
        model = train_fully_supervised(cfg, split, logger)
        save_checkpoint(run / "final" / "seg", model, cfg.seed)
    elif args.method == "mt":
        model = train_mean_teacher(cfg, split, logger)
        save_checkpoint(run / "final" / "seg", model, cfg.seed)
    else:
        state = train_joint(cfg, split, logger, run_dir=run, resume=args.resume)
        save_checkpoint(run / "final" / "seg", state.seg, cfg.seed, state.iteration)
        save_checkpoint(run / "final" / "reg", state.reg, cfg.seed, state.iteration)
        (run / "history.json").write_text(json.dumps(state.history, indent=1))
    logger.save_csv(run / "training_log.csv")
    logger.save_epoch_csv(run / "epochs.csv")
    print(f"trained {args.method}; artifacts in {run}")
    return 0


def _combined_predictor(seg, reg, split, cfg):
    counter = itertools.count()

    def predict(img):
        rng = derive_rng(cfg.seed, "eval-combined", next(counter))
        return combined_inference(seg, reg, img, split.train_annotated,
                                  cfg.n_pseudo, rng).confidence

    return predict


def _cmd_eval(args) -> int:
    run = Path(args.run)
    meta = json.loads((run / "run.json").read_text())
    cfg = ExperimentConfig.from_json(run / "config.json")
    samples = load_dataset(args.data)
    split = load_split(samples, run / "split.json")
    seg, _ = load_checkpoint(run / "final" / "seg")

    def seg_predict(img):
        with torch.no_grad():
            return seg_forward(seg, img)

    predictors = {meta["method"]: seg_predict}
    if (run / "final" / "reg" / "manifest.json").is_file():
        reg, _ = load_checkpoint(run / "final" / "reg")
        predictors["combined"] = _combined_predictor(seg, reg, split, cfg)
    report = evaluate(predictors, split.test, rate=f"{cfg.annotation_rate:g}")
    report.save_csv(run / "metrics.csv")
    report.save_summary(run / "summary.json")
    _print_aggregates(report)
    return 0


def _pairwise_p(rows: list[MetricRow]) -> dict[str, float]:
    """Wilcoxon p per method pair over DSC, paired by image id."""
    by_method: dict[str, dict[str, float]] = {}
    order: list[str] = []
    for r in rows:
        if r.method not in by_method:
            by_method[r.method] = {}
            order.append(r.method)
        by_method[r.method][r.image_id] = r.dsc
    out: dict[str, float] = {}
    for i, m1 in enumerate(order):
        for m2 in order[i + 1:]:
            common = sorted(set(by_method[m1]) & set(by_method[m2]))
            if common:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    out[f"{m1}_vs_{m2}_dsc"] = wilcoxon_signed_rank(
                        [by_method[m1][k] for k in common],
                        [by_method[m2][k] for k in common])
    return out


def _print_aggregates(report: MetricsReport) -> None:
    agg = report.aggregates()
    width = max(len(m) for m in agg)
    for method, a in agg.items():
        hd = ("undefined" if not math.isfinite(a["hd_mean"])
              else f"{a['hd_mean']:.2f}+-{a['hd_std']:.2f}")
        print(f"{method:<{width}}  dsc={a['dsc_mean']:.4f}+-{a['dsc_std']:.4f}  "
              f"hd={hd}  n={a['n']}  hd_excluded={a['hd_excluded']}")
    for key, p in report.p_values.items():
        print(f"p[{key}] = {p:.4g}")


def _cmd_compare(args) -> int:
    rows: list[MetricRow] = []
    for run in args.runs:
        rows.extend(MetricsReport.load_csv(Path(run) / "metrics.csv").rows)
    report = MetricsReport(rows=rows, p_values=_pairwise_p(rows))
    report.save_summary(args.out)
    if args.csv:
        report.save_csv(args.csv)
    _print_aggregates(report)
    print(f"summary written to {args.out}")
    return 0


def _cmd_panel(args) -> int:
    out = render_iteration_panel(args.run, args.image_id, args.out)
    print(f"panel written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segreg",
        description="semi-supervised segmentation-registration experiments on "
                    "synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="dataset directory to create")
    g.add_argument("--count", type=int, default=250)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train one method on a generated dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--method", required=True, choices=METHODS)
    t.add_argument("--rate", type=float, default=None,
                   help="annotation rate (overrides config)")
    t.add_argument("--seed", type=int, default=None, help="overrides config")
    t.add_argument("--config", default=None, help="experiment config JSON")
    t.add_argument("--out", default=".", help="parent directory for the run")
    t.add_argument("--resume", action="store_true",
                   help="continue a joint run from its latest checkpoint")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="score a trained run on its test split")
    e.add_argument("--run", required=True, help="run directory from train")
    e.add_argument("--data", required=True, help="dataset directory")
    e.set_defaults(func=_cmd_eval)

    c = sub.add_parser("compare", help="merge evaluated runs into one report")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--out", default="comparison.json")
    c.add_argument("--csv", default=None, help="also write the merged rows")
    c.set_defaults(func=_cmd_compare)

    p = sub.add_parser("panel", help="render the per-iteration pseudo-mask grid")
    p.add_argument("--run", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_panel)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
