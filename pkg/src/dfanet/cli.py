"""Command-line entry point: ``dfanet <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import GradientError, cross_entropy, finite_difference_check
from .checkpoint import CheckpointError, load_model, write_checkpoint
from .data import (
    OffParseError,
    PcbFormatError,
    SyntheticSpec,
    generate_synthetic_set,
    read_off,
    read_pcb,
    sample_surface_uniform,
    write_pcb,
)
from .models import CLS, PARTSEG, ModelConfig, build_model
from .train import (
    ABLATION_AXES,
    DivergenceError,
    EpochRecord,
    REFERENCE_K_SWEEP,
    MetricReport,
    TrainConfig,
    emit_report,
    run_ablation,
    score_into,
    train,
    write_ablation_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=["cls", "partseg", "semseg"], default="cls")
    p.add_argument("--points", type=int, default=None, help="points per cloud (default: from data)")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--agg", choices=["max", "sum", "mean", "attn"], default="max")
    p.add_argument("--domain", choices=["feature", "spatial"], default="feature")
    p.add_argument("--no-pos-enc", action="store_true", help="drop the relative position encoding")
    p.add_argument("--no-global", action="store_true", help="drop the low-dimensional global branch")
    p.add_argument("--width-scale", type=float, default=1.0)
    p.add_argument("--classes", type=int, default=None,
                   help="number of classes or parts (default: inferred from labels)")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", type=int, choices=[32, 64], default=32)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dfanet", description="Dynamic feature aggregation networks for point clouds.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a PCB dataset")
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--data", required=True, help="training set (.pcb)")
    p.add_argument("--ckpt", required=True, help="where to write the best checkpoint")
    p.add_argument("--out", help="per-epoch metrics (.csv or .svg)")

    p = sub.add_parser("eval", help="score a checkpoint on a PCB dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the metrics as JSON here instead of stdout")

    p = sub.add_parser("ablate", help="train one model per grid cell and tabulate test metrics")
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--data", required=True, help="training set (.pcb)")
    p.add_argument("--test", required=True, help="test set (.pcb)")
    p.add_argument("--grid", action="append", required=True, metavar="AXIS=V1,V2",
                   help=f"axis values; axes: {', '.join(ABLATION_AXES)}")
    p.add_argument("--seeds", type=int, default=1, help="seeds per cell, starting at --seed")
    p.add_argument("--out", required=True, help="ablation table (.csv)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter of a small model")
    _model_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=20, help="coordinates probed per parameter")

    p = sub.add_parser("synth", help="generate a synthetic shape set")
    p.add_argument("--spec", help="key=value synthetic spec file")
    p.add_argument("--task", choices=["cls", "partseg"], default="cls",
                   help="partseg generates lollipops with head/stick labels")
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample-off", help="sample point clouds from OFF meshes")
    p.add_argument("--data", required=True, nargs="+", help="OFF files")
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label", type=int, default=None, help="class label for every cloud")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="render a metrics CSV as CSV or SVG")
    p.add_argument("--data", required=True, help="metrics CSV written by train")
    p.add_argument("--out", required=True, help=".csv or .svg")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _load_clouds(path: str):
    clouds = read_pcb(path)
    if not clouds:
        raise ValueError(f"{path} holds no clouds")
    return clouds


def _model_config(args, clouds) -> ModelConfig:
    task = args.task
    if args.classes is not None:
        n_out = args.classes
    elif task == CLS:
        if clouds[0].class_label is None:
            raise ValueError("classification needs class labels")
        n_out = max(c.class_label for c in clouds) + 1
    else:
        if clouds[0].part_labels is None:
            raise ValueError("segmentation needs per-point labels")
        n_out = int(max(c.part_labels.max() for c in clouds)) + 1
    n_points = args.points or clouds[0].num_points
    if args.points is not None and args.points != clouds[0].num_points:
        raise ValueError(f"--points {args.points} but data has {clouds[0].num_points} points per cloud")
    kw = dict(task=task, num_points=n_points, k=args.k, aggregation=args.agg, graph_domain=args.domain,
              use_position_encoding=not args.no_pos_enc, use_low_dim_global=not args.no_global,
              width_scale=args.width_scale, input_dim=clouds[0].features.shape[1])
    if task == CLS:
        kw["num_classes"] = n_out
    elif task == PARTSEG:
        kw.update(num_parts=n_out, num_categories=1 + max(c.category or 0 for c in clouds))
    else:
        kw["num_classes"] = n_out
    return ModelConfig(**kw)


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed,
                       precision=args.precision)


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--grid expects AXIS=V1,V2, got {item!r}")
        axis, vals = item.split("=", 1)
        if axis not in ABLATION_AXES:
            raise UsageError(f"unknown ablation axis {axis!r}; expected one of {', '.join(ABLATION_AXES)}")
        parsed = []
        for v in vals.split(","):
            if axis == "k":
                parsed.append(int(v))
            elif axis.startswith("use_"):
                if v.lower() not in ("true", "false", "1", "0", "on", "off"):
                    raise UsageError(f"{axis} takes true/false, got {v!r}")
                parsed.append(v.lower() in ("true", "1", "on"))
            else:
                parsed.append(v)
        grid[axis] = parsed
    return grid


def read_metrics_csv(path) -> MetricReport:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    recs = [EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["loss"]), float(r["train_metric"]),
                        float(r["val_metric"]), float(r["wall_clock"])) for r in rows]
    return MetricReport(task=Path(path).stem, epochs=recs)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    clouds = _load_clouds(args.data)
    config = _model_config(args, clouds)

    def log(r):
        print(f"epoch {r.epoch:4d}  lr {r.lr:.5f}  loss {r.loss:.4f}  train {r.train_metric:.3f}  "
              f"val {r.val_metric:.3f}", flush=True)

    res = train(config, clouds, _train_config(args), log=log)
    write_checkpoint(args.ckpt, res.config, res.model, res.rng_state)
    if args.out:
        emit_report(res.report, args.out)
    print(f"best epoch {res.report.best_epoch}; checkpoint written to {args.ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config, model, _ = load_model(args.ckpt)
    clouds = _load_clouds(args.data)
    rep = score_into(MetricReport(task=config.task), model, config, clouds)
    out = {"task": config.task, "oa": rep.oa, "macc": rep.macc, "miou": rep.miou,
           "per_class": [None if np.isnan(v) else v for v in rep.per_class]}
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    grid = _parse_grid(args.grid)
    train_set = _load_clouds(args.data)
    test_set = _load_clouds(args.test)
    base = _model_config(args, train_set)
    seeds = range(args.seed, args.seed + args.seeds)
    rows = run_ablation(grid, base, train_set, test_set, _train_config(args), seeds)
    write_ablation_csv(rows, args.out)
    print(f"{len(rows)} rows written to {args.out}")
    if "k" in grid:
        ref = ", ".join(f"k={k}: {oa}" for k, oa in REFERENCE_K_SWEEP.items())
        print(f"reference full-scale 40-class OA (%) by k: {ref}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    n = args.points or 8
    kw = dict(task=args.task, num_points=n, k=min(args.k, 4), aggregation=args.agg, graph_domain=args.domain,
              use_position_encoding=not args.no_pos_enc, use_low_dim_global=not args.no_global,
              width_scale=min(args.width_scale, 1 / 16), precision=64)
    if args.task == CLS:
        kw["num_classes"] = args.classes or 2
    elif args.task == PARTSEG:
        kw.update(num_parts=args.classes or 2, num_categories=2)
    else:
        kw.update(num_classes=args.classes or 2, input_dim=9)
    config = ModelConfig(**kw)
    model = build_model(config, args.seed)
    X = rng.normal(size=(2, n, config.input_dim))
    if args.task == CLS:
        y = np.array([0, 1]) % config.num_outputs
    else:
        y = rng.integers(0, config.num_outputs, size=(2, n))
    cats = np.array([0, 1]) if config.use_category_vector else None

    def loss(_):
        out = model(X, training=True, rng=np.random.default_rng(0)) if args.task == CLS else \
            model(X, cats, training=True, rng=np.random.default_rng(0))
        return cross_entropy(out, y)

    worst = 0.0
    for name, p in model.named_parameters():
        err = finite_difference_check(loss, p, coords=args.coords, rng=rng)
        worst = max(worst, err)
        print(f"{name:40s} {err:.3e}")
    ok = worst < args.tol
    print(f"max relative error {worst:.3e} ({'pass' if ok else 'FAIL'} at {args.tol:g})")
    return EXIT_OK if ok else EXIT_DIVERGED


def cmd_synth(args) -> int:
    if args.spec:
        spec = SyntheticSpec.from_text(Path(args.spec).read_text())
    elif args.task == PARTSEG:
        spec = SyntheticSpec(classes=("lollipop",))
    else:
        spec = SyntheticSpec()
    changes = {k: v for k, v in (("points", args.points), ("per_class", args.per_class), ("seed", args.seed))
               if v is not None}
    spec = SyntheticSpec(**{**spec.__dict__, **changes})
    clouds = generate_synthetic_set(spec)
    if args.task == PARTSEG:
        if any(c.part_labels is None for c in clouds):
            raise ValueError("partseg synthesis needs a spec containing only the lollipop class")
    else:
        for c in clouds:
            c.part_labels = None
    write_pcb(args.out, clouds)
    print(f"{len(clouds)} clouds written to {args.out}")
    return EXIT_OK


def cmd_sample_off(args) -> int:
    rng = np.random.default_rng(args.seed)
    clouds = []
    for path in args.data:
        cloud = sample_surface_uniform(read_off(path).clean(), args.points, rng, class_label=args.label)
        cloud.coords = cloud.coords.astype(np.float32)
        clouds.append(cloud)
    write_pcb(args.out, clouds)
    print(f"{len(clouds)} clouds written to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    emit_report(read_metrics_csv(args.data), args.out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
            "synth": cmd_synth, "sample-off": cmd_sample_off, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"dfanet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, GradientError) as e:
        print(f"dfanet: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OffParseError, PcbFormatError, CheckpointError, OSError, ValueError, KeyError) as e:
        print(f"dfanet: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
