"""Command-line entry point: ``segmini <command> [flags]``.

Exit status is 0 on success, 1 on usage errors and 2 on data or format
errors. Every error is one line on stderr starting ``error: <kind>:``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import cost, data, kernels, lut, model, train
from .errors import SegminiError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

OVERLAY_COLORS = np.array([[0, 0, 0], [255, 64, 0], [0, 128, 255], [255, 0, 255], [255, 255, 0]],
                          dtype=np.float64) / 255.0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _size(text: str) -> tuple[int, int]:
    """``HxW`` to ``(h, w)``."""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x48, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size dimensions must be positive")
    return h, w


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _threads() -> int:
    raw = os.environ.get("SEGMINI_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"SEGMINI_THREADS must be an integer, got {raw!r}") from None


def _parallel_map(fn, items) -> list:
    """Ordered map over at most ``SEGMINI_THREADS`` workers."""
    n = _threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="segmini", description="Small-footprint semantic segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--kind", choices=sorted(data.SYNTH_KINDS), required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=_size, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default="default")
    t.add_argument("--classes", type=int)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--holdout", type=float, default=0.1, help="holdout fraction")
    t.add_argument("--class-weights", type=_floats, help="comma-separated loss weights per class")
    t.add_argument("--out", required=True)

    i = sub.add_parser("infer", help="segment one image")
    i.add_argument("--model", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out-mask", required=True)
    i.add_argument("--out-overlay")

    e = sub.add_parser("eval", help="evaluate a model on a dataset directory")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("all", "holdout"), default="all",
                   help="'holdout' re-derives the split train used from --seed and --holdout")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--holdout", type=float, default=0.1)

    c = sub.add_parser("cost", help="print the MAC and parameter report")
    c.add_argument("--config", default="default")
    c.add_argument("--classes", type=int)
    c.add_argument("--size", type=_size, required=True)

    b = sub.add_parser("bench", help="time inference")
    b.add_argument("--model", required=True)
    b.add_argument("--size", type=_size, required=True)
    b.add_argument("--iters", type=int, default=20)

    l = sub.add_parser("lut", help="segment an image with HSV thresholds")
    l.add_argument("--thresholds", required=True)
    l.add_argument("--image", required=True)
    l.add_argument("--out-mask", required=True)
    return p


def _cmd_synth(a, out):
    h, w = a.size
    ds = data.synth_dataset(a.kind, a.n, h, w, a.seed)
    data.save_dataset(ds, a.out)
    print(f"wrote={len(ds)}", f"dir={a.out}", file=out)


def _cmd_train(a, out):
    ds = data.load_dataset(a.data)
    cfg = model.load_config(a.config, a.classes if a.classes is not None else ds.class_count)
    try:
        hyper = train.Hyperparams(a.lr, a.momentum, a.batch, a.epochs, a.seed, a.class_weights, a.holdout)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    m = model.init_model(cfg, a.seed)
    m, report = train.train(m, ds, hyper)
    model.save_model(m, a.out)
    print("\n".join(report.to_kv()), file=out)
    print(f"model={a.out}", file=out)


def _cmd_infer(a, out):
    m = model.load_model(a.model)
    image = data.load_ppm(a.image)
    labels = model.predict_labels(model.forward(m, image))
    data.save_mask(labels, a.out_mask)
    if a.out_overlay:
        data.save_ppm(overlay(image, labels), a.out_overlay)
    counts = np.bincount(labels.ravel(), minlength=m.config.class_count)
    print(" ".join(f"class.{k}={int(v)}" for k, v in enumerate(counts)), file=out)


def overlay(image, labels, alpha: float = 0.5) -> np.ndarray:
    """Tint non-background pixels of a 1x3xHxW image with a per-class color."""
    img = image[0].transpose(1, 2, 0).astype(np.float64)
    colors = OVERLAY_COLORS[np.minimum(labels, len(OVERLAY_COLORS) - 1)]
    fg = (labels > 0)[..., None]
    mixed = np.where(fg, (1 - alpha) * img + alpha * colors, img)
    return np.clip(mixed, 0, 1).transpose(2, 0, 1)[None].astype(image.dtype)


def _cmd_eval(a, out):
    m = model.load_model(a.model)
    ds = data.load_dataset(a.data)
    if a.split == "holdout":
        try:
            hyper = train.Hyperparams(seed=a.seed, holdout_fraction=a.holdout)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        train_idx, hold_idx = train.split_holdout(len(ds), hyper)
        ds = ds.subset(hold_idx or train_idx)
    preds = _parallel_map(lambda img: model.predict_labels(model.forward(m, img)), ds.images)
    res = data.evaluate(preds, ds.masks, ds.class_count)
    print("\n".join(res.to_kv(list(ds.class_names))), file=out)


def _cmd_cost(a, out):
    cfg = model.load_config(a.config, a.classes)
    report = cost.model_cost(cfg, a.size)
    print(report.to_table(), file=out)
    print(file=out)
    print("\n".join(report.to_kv()), file=out)


def _cmd_bench(a, out):
    if a.iters < 1:
        raise UsageError("--iters must be at least 1")
    m = model.load_model(a.model)
    h, w = a.size
    x = np.random.default_rng(0).random((1, m.config.input_channels, h, w)).astype(np.float32)
    model.forward(m, x)  # warm-up
    times = []
    for _ in range(a.iters):
        t0 = time.perf_counter()
        model.forward(m, x)
        times.append((time.perf_counter() - t0) * 1e3)
    print(f"backend={kernels.BACKEND}", f"size={h}x{w}", f"iters={a.iters}",
          f"ms_mean={np.mean(times):.3f}", f"ms_p95={np.percentile(times, 95):.3f}", file=out)


def _cmd_lut(a, out):
    table = lut.build_lut(lut.load_thresholds(a.thresholds))
    image = data.load_ppm(a.image)
    labels = lut.segment_lut(image, table)
    data.save_mask(labels, a.out_mask)
    counts = np.bincount(labels.ravel(), minlength=table.class_count)
    print(" ".join(f"class.{k}={int(v)}" for k, v in enumerate(counts)), file=out)


COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "infer": _cmd_infer, "eval": _cmd_eval,
            "cost": _cmd_cost, "bench": _cmd_bench, "lut": _cmd_lut}


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=err)
        COMMANDS[args.command](args, out)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=err)
        return EXIT_USAGE
    except SegminiError as exc:
        print(f"error: {exc.kind}: {exc}", file=err)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: io: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=err)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())
