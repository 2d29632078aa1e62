"""Command-line interface.

Subcommands: generate-data, train, evaluate, flatness, sweep, emit-plots.
Relative output paths resolve under $MBCD_OUTPUT_ROOT when it is set. On
failure a single machine-readable JSON error line goes to stderr and the
exit code is nonzero (2 for configuration problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import flatness as F
from . import harness as H
from . import mbcd as A
from . import model as M
from . import synthdata as D

OUTPUT_ROOT_ENV = "MBCD_OUTPUT_ROOT"


def _resolve_out(path_str: str) -> Path:
    path = Path(path_str)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _cmd_generate_data(args) -> int:
    cfg = H.load_config(args.config)
    data_cfg = cfg.data if args.seed is None else replace(cfg.data, seed=args.seed)
    dataset = D.generate(data_cfg)
    out = _resolve_out(args.out)
    D.export_dataset(dataset, out)
    print(json.dumps({"dataset_dir": str(out)}))
    return 0


def _cmd_train(args) -> int:
    cfg = H.load_config(args.config)
    out = _resolve_out(args.out if args.out else cfg.output_dir)
    summary = H.run_experiment(cfg, out)
    print(json.dumps({"out_dir": summary.out_dir,
                      "test_accuracy_fused_mean": summary.aggregate["test_accuracy_fused_mean"],
                      "test_accuracy_fused_std": summary.aggregate["test_accuracy_fused_std"]}))
    return 0


def _eval_state_from_checkpoint(cfg: H.ExperimentConfig, checkpoint: str):
    student, teacher, _ = M.load_checkpoint(checkpoint)
    tcfg = cfg.trainer_config()
    state = A.TrainerState(student=student, teacher=teacher, opt=None, step=0,
                           mask_rng=np.random.default_rng(0), config=tcfg)
    which = "auto" if tcfg.eval_model == "both" else tcfg.eval_model
    return A.eval_views(state, which)


def _cmd_evaluate(args) -> int:
    cfg = H.load_config(args.config)
    run_seed = cfg.seeds[0] if args.seed is None else args.seed
    dataset = H.dataset_for_seed(cfg, run_seed)
    if args.perturb_modality is not None:
        dataset = D.perturb_modality(dataset, args.perturb_modality,
                                     args.perturb_variance, args.perturb_seed)
    splits = H.splits_for(cfg, dataset)
    fused_view, uni_view = _eval_state_from_checkpoint(cfg, args.checkpoint)
    if args.split == "train":
        parts = {"train": splits.train}
    elif args.split == "val":
        parts = {"val": splits.val}
    else:
        parts = splits.test
    report = {name: A.evaluate(fused_view, xs, y, uni_params=uni_view)
              for name, (xs, y) in parts.items()}
    print(json.dumps({"seed": run_seed, "split": args.split, "metrics": report},
                     sort_keys=True))
    return 0


def _cmd_flatness(args) -> int:
    cfg = H.load_config(args.config)
    run_seed = cfg.seeds[0] if args.seed is None else args.seed
    dataset = H.dataset_for_seed(cfg, run_seed)
    splits = H.splits_for(cfg, dataset)
    fused_view, _ = _eval_state_from_checkpoint(cfg, args.checkpoint)
    curve = H.flatness_probe_for(cfg, fused_view, splits)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    F.write_curve_csv(curve, out)
    print(json.dumps({"flatness_csv": str(out)}))
    return 0


def _cmd_sweep(args) -> int:
    cfg = H.load_config(args.config)
    values = [v for v in args.values.split(",") if v.strip()]
    out = _resolve_out(args.out if args.out else cfg.output_dir)
    summaries = H.run_sweep(cfg, args.axis, values, out)
    print(json.dumps({"out_dir": str(out), "runs": len(summaries)}))
    return 0


def _cmd_emit_plots(args) -> int:
    summaries = [H.load_run(d) for d in args.runs]
    kwargs = {}
    if args.kind == "robustness":
        if args.modality is None or not args.variances:
            raise H.ConfigError("robustness emission needs --modality and --variances")
        kwargs["modality"] = args.modality
        kwargs["variances"] = [float(v) for v in args.variances.split(",")]
        kwargs["perturb_seed"] = args.perturb_seed
        kwargs["eval_split"] = args.robustness_split
    path = H.emit_plot_data(summaries, args.kind, _resolve_out(args.out), **kwargs)
    print(json.dumps({"plot_csv": str(path)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbcdlab",
                                     description="multi-modal DG training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="generate and export a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override [data] seed")
    p.set_defaults(fn=_cmd_generate_data)

    p = sub.add_parser("train", help="run the configured experiment over all seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override [run] output_dir")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a protocol split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--seed", type=int, default=None, help="run seed for data regeneration")
    p.add_argument("--perturb-modality", type=int, default=None)
    p.add_argument("--perturb-variance", type=float, default=0.0)
    p.add_argument("--perturb-seed", type=int, default=97)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("flatness", help="probe a checkpoint's loss landscape")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_flatness)

    p = sub.add_parser("sweep", help="one-axis config sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("emit-plots", help="emit tidy CSVs behind the figures")
    p.add_argument("--kind", required=True,
                   choices=("flatness", "robustness", "modality_accuracy", "training_curves"))
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modality", type=int, default=None)
    p.add_argument("--variances", default="")
    p.add_argument("--perturb-seed", type=int, default=97)
    p.add_argument("--robustness-split", choices=("target", "source_test"),
                   default="target")
    p.set_defaults(fn=_cmd_emit_plots)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (H.ConfigError, D.DataConfigError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
