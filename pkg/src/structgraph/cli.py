"""Command-line entry point: synth, train, eval, explain, gradcheck, compare.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import (
    FormatError,
    ManifestError,
    SynthConfig,
    generate_synthetic_dataset,
    load_checkpoint,
    load_manifest,
    read_pgm,
    resize_bilinear,
    save_checkpoint,
    write_pgm,
)
from .graph import GraphError
from .metrics import UndefinedAUCError, evaluate, welch_t_test
from .numeric import ShapeError
from .sgnn import POOLING_MODES, ModelConfig
from .training import AugmentConfig, TrainConfig, check_model_gradients, fit

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-5
THREADS_ENV = "STRUCTGRAPH_THREADS"

DATA_ERRORS = (OSError, FormatError, ManifestError, GraphError, ShapeError, UnicodeDecodeError)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _non_negative_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="structgraph", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic lesion dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-per-class", type=_positive_int, default=100, help="images per class")
    p.add_argument("--size", type=_positive_int, default=64, help="image side length in pixels")
    p.add_argument("--position-dependent", action="store_true", help="confine lesions to the top half")
    p.add_argument("--seed", type=_non_negative_int, default=0, help="generator seed")

    p = sub.add_parser("train", help="train a model from a manifest", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="JSON-lines manifest")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--epochs", type=_non_negative_int, default=15, help="training epochs")
    p.add_argument("--seed", type=_non_negative_int, default=0, help="root seed")
    p.add_argument("--lr", type=_non_negative_float, default=1e-4, help="Adam learning rate")
    p.add_argument("--batch-size", type=_positive_int, default=8, help="mini-batch size")
    p.add_argument("--pooling", choices=POOLING_MODES, default="mean", help="graph readout")
    p.add_argument("--lambda-node", type=_non_negative_float, default=1.0, help="node loss weight")
    p.add_argument("--lambda-explain", type=_non_negative_float, default=1.0, help="importance loss weight")
    p.add_argument("--no-augment", action="store_true", help="disable augmentation")
    p.add_argument("--freeze-backbone", action="store_true", help="keep the conv stack at initialisation")
    p.add_argument("--size", type=_positive_int, default=64, help="model input size; images are resized")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="JSON-lines manifest")
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="split to evaluate")
    p.add_argument("--report", default=None, help="metrics JSON output")
    p.add_argument("--roc", default=None, help="graph-level ROC CSV output")
    p.add_argument("--node-f1", default=None, help="per-image node F1 output, one value per line")

    p = sub.add_parser("explain", help="export node importance for one image", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--image", required=True, help="input PGM")
    p.add_argument("--heatmap", default=None, help="importance heatmap PGM output")
    p.add_argument("--scores", default=None, help="per-node CSV output")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients", formatter_class=fmt)
    p.add_argument("--seed", type=_non_negative_int, default=0, help="seed for the tiny model")
    p.add_argument("--eps", type=float, default=1e-5, help="relative finite-difference step")

    p = sub.add_parser("compare", help="Welch t-test between two score files", formatter_class=fmt)
    p.add_argument("--scores-a", required=True, help="one float per line")
    p.add_argument("--scores-b", required=True, help="one float per line")
    return parser


def _print_config(command: str, cfg: dict) -> None:
    print("config " + json.dumps({"command": command, **cfg}, sort_keys=True))


def _fmt(x: float | None) -> str:
    return "undefined" if x is None else f"{x:.6f}"


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_per_class=args.n_per_class,
        image_size=args.size,
        position_dependent=args.position_dependent,
        seed=args.seed,
    )
    _print_config("synth", {"out": args.out, **asdict(cfg)})
    manifest = generate_synthetic_dataset(cfg, args.out)
    print(f"wrote {2 * cfg.n_per_class} samples")
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        model_cfg = ModelConfig(image_size=args.size, pooling=args.pooling)
    except ValueError as exc:
        raise UsageError(str(exc))
    cfg = TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        lambda_node=args.lambda_node,
        lambda_explain=args.lambda_explain,
        augment=AugmentConfig(enabled=not args.no_augment),
        freeze_backbone=args.freeze_backbone,
    )
    _print_config(
        "train",
        {"manifest": args.manifest, "out": args.out, "train": cfg.to_dict(), "model": model_cfg.to_dict()},
    )
    records = load_manifest(args.manifest)

    def report(rec):
        print(f"epoch {rec.epoch} loss {rec.loss:.6f} val_auc {_fmt(rec.val_auc)}", flush=True)

    model, _ = fit(records, cfg, model_cfg, on_epoch=report)
    save_checkpoint(model, args.out)
    print(f"saved {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _print_config(
        "eval",
        {"manifest": args.manifest, "model": args.model, "split": args.split,
         "report": args.report, "roc": args.roc, "node_f1": args.node_f1},
    )
    model = load_checkpoint(args.model)
    records = load_manifest(args.manifest)
    try:
        report = evaluate(model, records, args.split)
    except ValueError as exc:
        if isinstance(exc, DATA_ERRORS):
            raise
        raise DataError(str(exc))
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    if args.roc:
        roc = report.graph.roc
        text = roc.to_csv() if roc is not None else "threshold,fpr,tpr\n# auc=undefined\n"
        Path(args.roc).write_text(text, encoding="utf-8")
    if args.node_f1:
        Path(args.node_f1).write_text("".join(f"{float(v)!r}\n" for v in report.per_image_node_f1), encoding="utf-8")
    if report.graph.auc is None:
        print("AUC: undefined")
    node_f1 = None if report.node is None else report.node.scores.f1
    print(f"acc={_fmt(report.graph.scores.accuracy)} auc={_fmt(report.graph.auc)} node_f1={_fmt(node_f1)}")
    return EXIT_OK


def heatmap_values(importance: np.ndarray, grid_h: int, grid_w: int, cell: int) -> np.ndarray:
    """Min-max scale to 0..255 (constant input -> 128), then nearest-neighbour upsample."""
    s = np.asarray(importance, dtype=np.float64).reshape(grid_h, grid_w)
    lo, hi = float(s.min()), float(s.max())
    if hi > lo:
        levels = np.rint((s - lo) / (hi - lo) * 255.0)
    else:
        levels = np.full_like(s, 128.0)
    return np.kron(levels, np.ones((cell, cell)))


def cmd_explain(args) -> int:
    _print_config("explain", {"model": args.model, "image": args.image,
                              "heatmap": args.heatmap, "scores": args.scores})
    model = load_checkpoint(args.model)
    image = read_pgm(args.image)
    size = model.config.image_size
    if image.shape[1:] != (size, size):
        image = resize_bilinear(image, size, size)
    out = model.forward(image)
    gh, gw = out.grid_shape
    if args.scores:
        lines = ["row,col,importance,node_prob"]
        for k in range(gh * gw):
            lines.append(f"{k // gw},{k % gw},{float(out.importance[k])!r},{float(out.node_probs[k])!r}")
        Path(args.scores).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.heatmap:
        levels = heatmap_values(out.importance, gh, gw, model.config.backbone.downsample)
        write_pgm(levels / 255.0, args.heatmap)
    k = int(np.argmax(out.importance))
    print(f"graph_prob={out.graph_prob:.6f} max_importance_node={k // gw},{k % gw}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _print_config("gradcheck", {"seed": args.seed, "eps": args.eps, "pooling": list(POOLING_MODES)})
    if not 1e-7 <= args.eps <= 1e-3:
        raise UsageError(f"--eps must lie in [1e-7, 1e-3], got {args.eps}")
    worst, n = 0.0, 0
    for pooling in POOLING_MODES:
        r = check_model_gradients(args.seed, args.eps, pooling)
        print(f"pooling={pooling} max_rel_err={r.max_rel_err:.3e} params={r.params}")
        worst, n = max(worst, r.max_rel_err), r.params
    print(f"max_rel_err={worst:.3e} params={n}")
    return EXIT_OK if worst <= GRADCHECK_TOL else EXIT_NUMERIC


def read_score_file(path: str) -> list[float]:
    values = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                values.append(float(text))
            except ValueError:
                raise DataError(f"{path}:{lineno}: not a number: {text!r}")
    if len(values) < 2:
        raise DataError(f"{path}: need at least 2 values, found {len(values)}")
    return values


def cmd_compare(args) -> int:
    _print_config("compare", {"scores_a": args.scores_a, "scores_b": args.scores_b})
    a = read_score_file(args.scores_a)
    b = read_score_file(args.scores_b)
    try:
        r = welch_t_test(a, b)
    except ValueError as exc:
        raise DataError(str(exc))
    print(f"t={r.t:.6g} dof={r.dof:.6g} p={r.p_two_sided:.6g}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
}


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        n = 1
    else:
        try:
            n = int(raw)
        except ValueError:
            n = 0
        if n < 1:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, UndefinedAUCError, *DATA_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
