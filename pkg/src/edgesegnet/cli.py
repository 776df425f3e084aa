"""Command-line entry point: ``edgesegnet <command> [flags]``.

Exit status is 0 on success, 1 when the requested operation fails and 2
for usage errors (argparse's own convention).
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .analysis import count_flops
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, reference_config
from .data import (
    camvid_palette,
    image_to_tensor,
    load_dataset,
    load_palette,
    read_rgb,
    resize_nearest,
    synth_palette,
    synth_split,
    write_label_png,
)
from .errors import EdgeSegError
from .explorer import EvalSettings, Requirements, search, toy_config, write_trace
from .grad import finite_diff_check
from .network import assemble_network
from .tensor import resize_bilinear
from .training import evaluate_dataset, train

log = logging.getLogger("edgesegnet")

SYNTH_CLASSES = 3
SYNTH_EXTENT = 64


class CommandFailed(Exception):
    """Operational failure reported with exit status 1."""


def _extent(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, e.g. 352x480, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"extents must be positive, got {text!r}")
    return h, w


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- shared flag groups ----------------------------------------------------------


def _add_config(p, default_help="the bundled reference config"):
    p.add_argument("--config", metavar="PATH", help=f"network config JSON (default: {default_help})")


def _add_data(p):
    g = p.add_argument_group("data")
    g.add_argument("--data-images", metavar="DIR", help="directory of RGB images (PNG or PPM)")
    g.add_argument("--data-labels", metavar="DIR", help="directory of label images paired by file stem")
    g.add_argument("--palette", metavar="PATH", help="palette JSON (default: bundled CamVid 32-class palette)")
    g.add_argument(
        "--synthetic",
        metavar="N",
        type=_positive_int,
        help="train on N synthetic rectangle images instead (plus N/4 held out)",
    )


def _add_optim(p, epochs_default=20):
    g = p.add_argument_group("optimization")
    g.add_argument("--epochs", type=_nonneg_int, default=epochs_default, help=f"training epochs (default: {epochs_default})")
    g.add_argument("--lr", type=float, default=0.05, help="SGD learning rate (default: 0.05)")
    g.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default: 0.9)")
    g.add_argument("--batch", type=_positive_int, default=8, help="minibatch size (default: 8)")
    g.add_argument("--seed", type=int, default=0, help="seed for initialization, shuffling and synthetic data (default: 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgesegnet",
        description="Compact semantic segmentation: analysis, training, inference and design search.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("summarize", help="per-node shapes, parameter, MAC and size totals")
    _add_config(p)
    p.add_argument("--input", type=_extent, metavar="HxW", help="input resolution (default: the config's)")
    p.add_argument("--json", action="store_true", help="print the report as JSON")

    p = sub.add_parser("train", help="train a network and write a checkpoint")
    _add_config(p)
    _add_data(p)
    _add_optim(p)
    p.add_argument("--input", type=_extent, metavar="HxW", help="training resolution (default: the config's, 64x64 for --synthetic)")
    p.add_argument("--flip-augment", action="store_true", help="randomly mirror batches horizontally")
    p.add_argument("--out", metavar="PATH", required=True, help="checkpoint file to write")
    p.add_argument("--json", action="store_true", help="print training history and metrics as JSON")

    p = sub.add_parser("infer", help="label one image with a trained checkpoint")
    p.add_argument("--ckpt", metavar="PATH", required=True, help="checkpoint file")
    p.add_argument("--input", metavar="IMAGE", required=True, help="RGB image (PNG or PPM)")
    p.add_argument("--palette", metavar="PATH", help="palette JSON used to color the output")
    p.add_argument("--out", metavar="PATH", required=True, help="label PNG to write")

    p = sub.add_parser("bench", help="time single-image forward passes")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", metavar="PATH", help="network config JSON (default: the bundled reference config)")
    src.add_argument("--ckpt", metavar="PATH", help="benchmark a trained checkpoint instead")
    p.add_argument("--input", type=_extent, metavar="HxW", help="input resolution (default: the config's)")
    p.add_argument("--iters", type=_positive_int, default=50, help="timed forward passes (default: 50)")
    p.add_argument("--warmup", type=_nonneg_int, default=5, help="discarded passes before timing (default: 5)")

    p = sub.add_parser("search", help="greedy constrained design search on synthetic data")
    _add_config(p, "the toy reference setting")
    p.add_argument("--iters", type=_nonneg_int, default=15, help="search iterations (default: 15)")
    p.add_argument("--budget", type=_nonneg_int, default=2, help="training epochs per candidate (default: 2)")
    p.add_argument("--acc-min", type=float, default=60.0, help="pixel accuracy threshold in percent (default: 60)")
    p.add_argument("--synthetic", metavar="N", type=_positive_int, default=64, help="synthetic training images (default: 64)")
    p.add_argument("--lr", type=float, default=0.05, help="SGD learning rate (default: 0.05)")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default: 0.9)")
    p.add_argument("--batch", type=_positive_int, default=8, help="minibatch size (default: 8)")
    p.add_argument("--seed", type=int, default=0, help="search seed (default: 0)")
    p.add_argument("--out", metavar="DIR", help="write trace.jsonl and config snapshots here")
    p.add_argument("--json", action="store_true", help="print the search summary as JSON")

    p = sub.add_parser("gradcheck", help="verify gradients with finite differences")
    _add_config(p)
    p.add_argument("--input", type=_extent, default=(32, 32), metavar="HxW", help="input resolution (default: 32x32)")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance (default: 1e-4)")
    p.add_argument("--seed", type=int, default=0, help="seed for the random input, labels and probes (default: 0)")
    p.add_argument("--json", action="store_true", help="print per-tensor errors as JSON")
    return parser


# -- commands ----------------------------------------------------------------------


def _config(args, fallback=None):
    if args.config:
        return load_config(args.config)
    return fallback if fallback is not None else reference_config()


def cmd_summarize(args) -> int:
    cfg = _config(args)
    h, w = args.input or cfg.input_size
    report = count_flops(cfg, (1, cfg.input_channels, h, w))
    if args.json:
        _emit(report.to_dict())
    else:
        print(f"{cfg.name}  input 1x{cfg.input_channels}x{h}x{w}")
        print(report.table())
    return 0


def _training_data(args, cfg):
    if args.synthetic:
        if args.data_images or args.data_labels:
            raise CommandFailed("--synthetic cannot be combined with --data-images/--data-labels")
        h, w = args.input or (SYNTH_EXTENT, SYNTH_EXTENT)
        k = SYNTH_CLASSES if args.config is None else cfg.num_classes
        n_val = max(1, args.synthetic // 4)
        tr, va = synth_split(args.seed, args.synthetic, n_val, h, w, k)
        cfg = cfg.with_num_classes(k)
        cfg.input_size = (h, w)
        return cfg, tr, va, synth_palette(k)
    if not (args.data_images and args.data_labels):
        raise CommandFailed("give --data-images and --data-labels, or --synthetic N")
    palette = load_palette(args.palette) if args.palette else camvid_palette()
    h, w = args.input or cfg.input_size
    tr = load_dataset(args.data_images, args.data_labels, palette, (h, w))
    if tr.skipped:
        print(f"warning: skipped {len(tr.skipped)} unmatched files", file=sys.stderr)
    if len(tr) == 0:
        raise CommandFailed("no image/label pairs found")
    cfg = cfg.with_num_classes(palette.num_classes)
    cfg.input_size = (h, w)
    return cfg, tr, None, palette


def cmd_train(args) -> int:
    cfg, tr, va, palette = _training_data(args, _config(args))
    cfg.seed = args.seed
    graph = assemble_network(cfg)

    def report(epoch, loss):
        if not args.json:
            print(f"epoch {epoch:3d}  loss {loss:.4f}")

    hist = train(
        graph, tr, args.epochs, args.lr, args.momentum, args.batch,
        seed=args.seed, flip_augment=args.flip_augment, ignore_label=palette.ignore_label,
        on_epoch=report,
    )
    if hist.diverged:
        raise CommandFailed("training diverged (non-finite loss)")
    nbytes = save_checkpoint(graph, args.out)
    out = {"kind": "train_result", "checkpoint": str(args.out), "bytes": nbytes, "history": hist.to_dict()}
    if va is not None:
        out["validation"] = evaluate_dataset(graph, va, palette.ignore_label).to_dict()
    if args.json:
        _emit(out)
    else:
        if va is not None:
            m = out["validation"]
            print(f"validation  pixel accuracy {m['pixel_accuracy']:.4f}  mean IoU {m['mean_iou']:.4f}")
        print(f"wrote {args.out} ({nbytes:,} bytes)")
    return 0


def cmd_infer(args) -> int:
    graph = load_checkpoint(args.ckpt)
    cfg = graph.config
    if args.palette:
        palette = load_palette(args.palette)
    elif cfg.num_classes == 32:
        palette = camvid_palette()
    else:
        palette = synth_palette(cfg.num_classes)
    if palette.num_classes != cfg.num_classes:
        raise CommandFailed(f"palette has {palette.num_classes} classes, network predicts {cfg.num_classes}")
    rgb = read_rgb(args.input)
    x = image_to_tensor(rgb)
    hw = tuple(cfg.input_size)
    if x.shape[2:] != hw:
        x = np.clip(resize_bilinear(x, hw), 0, 1).astype(np.float32)
    t0 = time.perf_counter()
    logits = graph.forward(x)
    dt = time.perf_counter() - t0
    labels = np.argmax(logits, axis=1)[0]
    if labels.shape != rgb.shape[:2]:
        labels = resize_nearest(labels, rgb.shape[:2])
    write_label_png(labels, palette, args.out)
    print(f"{Path(args.input).name}: {dt * 1e3:.2f} ms -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    graph = load_checkpoint(args.ckpt) if args.ckpt else assemble_network(_config(args))
    cfg = graph.config
    h, w = args.input or cfg.input_size
    x = np.random.default_rng(0).uniform(0, 1, (1, cfg.input_channels, h, w)).astype(np.float32)
    for _ in range(args.warmup):
        graph.forward(x)
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        graph.forward(x)
        times.append(time.perf_counter() - t0)
    fps = [1.0 / t for t in times]
    rec = {
        "kind": "bench_result",
        "config": cfg.name,
        "input_shape": [1, cfg.input_channels, h, w],
        "iters": args.iters,
        "warmup": args.warmup,
        "fps_mean": statistics.fmean(fps),
        "fps_median": statistics.median(fps),
        "fps_std": statistics.pstdev(fps),
        "latency_ms_mean": 1e3 * statistics.fmean(times),
    }
    print(
        f"FPS mean {rec['fps_mean']:.2f}  median {rec['fps_median']:.2f}  std {rec['fps_std']:.2f}"
        f"  ({args.iters} iters, {args.warmup} warmup, {h}x{w})"
    )
    _emit(rec)
    return 0


def cmd_search(args) -> int:
    cfg = _config(args, toy_config())
    h, w = cfg.input_size
    data = synth_split(args.seed, args.synthetic, max(1, args.synthetic // 2), h, w, cfg.num_classes)
    settings = EvalSettings(args.budget, args.lr, args.momentum, args.batch)
    out = Path(args.out) if args.out else None
    state = search(
        cfg, Requirements(args.acc_min), data, args.iters, seed=args.seed,
        budget=args.budget, settings=settings,
        snapshot_dir=out / "configs" if out else None,
    )
    if out:
        write_trace(state, out / "trace.jsonl")
    summary = {
        "kind": "search_summary",
        "seed": state.seed,
        "iterations": state.k,
        "infeasible_start": state.infeasible_start,
        "accepted": len(state.trace),
        "best_digest": state.best.digest(),
        "best_u": state.best_perf.u if state.best_perf else None,
    }
    if args.json:
        _emit(summary)
    else:
        for rec in state.log:
            mark = "*" if rec.accepted else " "
            print(f"{mark} k={rec.k:3d}  a={rec.perf.a:6.2f}  p={rec.perf.p:.4f}M  "
                  f"f={rec.perf.f:.5f}G  u={rec.perf.u:8.3f}  {rec.mutation or 'initial'}")
        print(f"accepted {len(state.trace)} of {len(state.log)}; best {summary['best_digest']}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    graph = assemble_network(cfg, dtype=np.float64)
    rng = np.random.default_rng(args.seed)
    h, w = args.input
    x = rng.uniform(-1, 1, (1, cfg.input_channels, h, w))
    y = rng.integers(0, cfg.num_classes, (1, h, w))
    report = finite_diff_check(graph, x, y, args.tol, seed=args.seed)
    if args.json:
        _emit({"kind": "gradcheck_report", **report.to_dict()})
    else:
        for e in report.entries:
            print(f"{'ok  ' if e.passed else 'FAIL'}  {e.max_rel_error:.2e}  {e.path}")
        worst = max((e.max_rel_error for e in report.entries), default=0.0)
        n_bad = sum(not e.passed for e in report.entries)
        print(f"{len(report.entries)} tensors, worst {worst:.2e}, {n_bad} failing at tolerance {args.tol:g}")
    return 0 if report.all_passed else 1


COMMANDS = {
    "summarize": cmd_summarize,
    "train": cmd_train,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "search": cmd_search,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (EdgeSegError, CommandFailed, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
