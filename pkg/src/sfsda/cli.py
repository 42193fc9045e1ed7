"""Command-line entry points for the full workflow.

Subcommands: generate | pretrain | adapt | ablate | sweep | eval.
Exit codes: 0 success, 2 configuration error (naming the key),
3 non-finite loss during training.
"""

import argparse
import copy
import csv
import json
import os
import sys

import numpy as np

from .backbone import CheckpointError, load_checkpoint, save_checkpoint
from .config import load_run_config
from .data import ConfigError, export_split, generate_synthetic_shift
from .engine import adapt_target, evaluate, pretrain_source
from .losses import NonFiniteLossError

ABLATION_ORDER = [
    (),
    ("pwc",),
    ("rmc",),
    ("pr",),
    ("pwc", "rmc"),
    ("pwc", "pr"),
    ("rmc", "pr"),
    ("pwc", "rmc", "pr"),
]


def _apply_toggles(cfg, toggles):
    """Zero out the loss weights of disabled components."""
    out = copy.deepcopy(cfg)
    for name in ("pwc", "rmc", "pr"):
        if name not in toggles:
            setattr(out.weights, f"lambda_{name}", 0.0)
    return out


def _load_cfg(args):
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.shift.seed = args.seed
    return cfg


def cmd_generate(args):
    cfg = _load_cfg(args)
    split = generate_synthetic_shift(cfg.shift)
    os.makedirs(args.out, exist_ok=True)
    manifest = export_split(split, args.out)
    print(f"wrote {manifest}")
    return 0


def cmd_pretrain(args):
    cfg = _load_cfg(args)
    split = generate_synthetic_shift(cfg.shift)
    model, val_acc = pretrain_source(split, cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "source.ckpt")
    save_checkpoint(path, model, val_acc)
    print(f"source validation accuracy: {val_acc:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_adapt(args):
    cfg = _load_cfg(args)
    split = generate_synthetic_shift(cfg.shift)
    ckpt = args.checkpoint or os.path.join(args.out, "source.ckpt")
    model, _ = load_checkpoint(ckpt)
    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.ndjson")
    model, metrics = adapt_target(split, model, cfg, metrics_path)
    save_checkpoint(os.path.join(args.out, "adapted.ckpt"), model)
    print(f"final target accuracy: {metrics[-1]['target_acc']:.4f}")
    print(f"wrote {metrics_path}")
    return 0


def cmd_ablate(args):
    cfg = _load_cfg(args)
    split = generate_synthetic_shift(cfg.shift)
    ckpt = args.checkpoint or os.path.join(args.out, "source.ckpt")
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for toggles in ABLATION_ORDER:
        accs = []
        failed = False
        for r in range(args.repeats):
            run_cfg = _apply_toggles(cfg, toggles)
            run_cfg.seed = cfg.seed + r
            try:
                model, _ = load_checkpoint(ckpt)
                _, metrics = adapt_target(split, model, run_cfg)
                accs.append(metrics[-1]["target_acc"])
            except (NonFiniteLossError, FloatingPointError):
                failed = True
                break
        label = "+".join(toggles) if toggles else "none"
        if failed or not accs:
            rows.append({"toggles": label, "mean_acc": "failed", "std_acc": "", "n_seeds": len(accs)})
        else:
            rows.append(
                {
                    "toggles": label,
                    "mean_acc": f"{np.mean(accs):.4f}",
                    "std_acc": f"{np.std(accs):.4f}",
                    "n_seeds": len(accs),
                }
            )
        print(f"{label}: {rows[-1]['mean_acc']}")
    path = os.path.join(args.out, "ablation.csv")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["toggles", "mean_acc", "std_acc", "n_seeds"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {path}")
    return 0


def cmd_sweep(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = _load_cfg(args)
    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    if len(grid) < 3:
        raise ConfigError("sweep grid needs at least 3 values")
    split = generate_synthetic_shift(cfg.shift)
    ckpt = args.checkpoint or os.path.join(args.out, "source.ckpt")
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for value in grid:
        run_cfg = copy.deepcopy(cfg)
        setattr(run_cfg.weights, args.param, value)
        model, _ = load_checkpoint(ckpt)
        _, metrics = adapt_target(split, model, run_cfg)
        rows.append({"param": args.param, "value": value, "final_acc": metrics[-1]["target_acc"]})
        print(f"{args.param}={value}: {rows[-1]['final_acc']:.4f}")
    csv_path = os.path.join(args.out, "sweep.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["param", "value", "final_acc"])
        writer.writeheader()
        writer.writerows(rows)
    fig, ax = plt.subplots()
    ax.plot([r["value"] for r in rows], [r["final_acc"] for r in rows], marker="o")
    ax.set_xlabel(args.param)
    ax.set_ylabel("target accuracy")
    png_path = os.path.join(args.out, "sweep.png")
    fig.savefig(png_path)
    plt.close(fig)
    print(f"wrote {csv_path} and {png_path}")
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    split = generate_synthetic_shift(cfg.shift)
    model, _ = load_checkpoint(args.checkpoint)
    samples = split.target_unlabeled
    if args.holdout > 0:
        # deterministic disjoint holdout carved from the unlabeled pool
        rng = np.random.default_rng(cfg.seed + 9973)
        order = rng.permutation(len(samples))
        n_hold = max(1, int(len(samples) * args.holdout))
        samples = [samples[i] for i in order[:n_hold]]
    report = evaluate(model, samples, split.unlabeled_truth)
    print(f"overall accuracy: {report['accuracy']:.4f}")
    for c, acc in report["per_class"].items():
        print(f"class {c}: {'n/a' if acc is None else f'{acc:.4f}'}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "eval.json")
        with open(path, "w") as f:
            json.dump(
                {"accuracy": report["accuracy"], "per_class": report["per_class"]},
                f,
                indent=1,
                sort_keys=True,
            )
        print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="sfsda")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out=True):
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="generate and export a synthetic split")
    add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="supervised pretraining on the source split")
    add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="source-free adaptation on the target split")
    add_common(p)
    p.add_argument("--checkpoint", default=None, help="source checkpoint (default: OUT/source.ckpt)")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("ablate", help="run the 8-row component-toggle grid")
    add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--repeats", type=int, default=3, help="seeds per row")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep one loss weight over a value grid")
    add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--param", required=True, choices=["lambda_pwc", "lambda_rmc", "lambda_pr"])
    p.add_argument("--grid", required=True, help="comma-separated values, e.g. 0.05,0.1,0.2")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the target split")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--holdout", type=float, default=0.0, help="evaluate on a disjoint holdout fraction")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (NonFiniteLossError, FloatingPointError) as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 3
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
