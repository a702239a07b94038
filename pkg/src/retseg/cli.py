"""``retseg`` command line: train, eval, infer, verify, bench.

Exit status is 0 on success, 1 when a verification check fails and 2 for
usage, configuration or data errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    generate_synthetic_dataset,
    load_image,
    load_manifest,
    scan_dataset,
    split_dataset,
    split_samples,
    write_mask_png,
)
from .errors import ConfigError, RetSegError
from .losses import measure_fps
from .model import RetSegConfig, RetSegModel, init_params
from .tensor import Tensor
from .train import evaluate, load_train_config, train, write_run_log

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

EVAL_HEADER = ("dataset", "iou", "dice", "precision", "recall", "f1", "mse", "fps")


def _best_path(path: Path) -> Path:
    return path.with_name(f"{path.stem}.best{path.suffix or '.ckpt'}")


def _load_samples(args, size: int, train_fraction: float, seed: int):
    """Return ``(train, val)`` sample lists from ``--data`` or ``--synthetic``."""
    if args.data is not None:
        tr, va = split_dataset(scan_dataset(args.data), train_fraction, seed)
        return load_manifest(tr, size), load_manifest(va, size)
    samples = generate_synthetic_dataset(args.synthetic, size, args.synthetic_seed)
    return split_samples(samples, train_fraction, seed)


def cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    if args.size is not None:
        cfg = replace(cfg, model=cfg.model.with_image_size(args.size))
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    out = Path(args.out or cfg.checkpoint_out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    # all data is loaded and validated before the first optimizer step
    train_s, val_s = _load_samples(args, cfg.model.image_size, cfg.train_fraction, cfg.seed)
    print(f"train={len(train_s)} val={len(val_s)} size={cfg.model.image_size} kernels={kernels.BACKEND}")

    def report(row):
        print(
            f"epoch {row['epoch']:>3} step {row['steps']:>5} loss {row['train_loss']:.5f} "
            f"val_loss {row['val_loss']:.5f} val_iou {row['val_iou']:.4f}",
            flush=True,
        )

    result = train(train_s, val_s, cfg, on_epoch=report)
    save_checkpoint(result.params, cfg.model, out)
    save_checkpoint(result.best_params, cfg.model, _best_path(out))
    write_run_log(result.rows, log_path)
    print(f"wrote {out}, {_best_path(out)}, {log_path}")
    return EXIT_OK


def _eval_samples(args, config: RetSegConfig):
    if args.size is not None and args.size != config.image_size:
        raise ConfigError(
            f"checkpoint/config image-size mismatch: checkpoint expects {config.image_size}, --size is {args.size}"
        )
    if args.data is not None:
        manifest = scan_dataset(args.data)
        if args.split != "all":
            tr, va = split_dataset(manifest, args.train_fraction, args.seed)
            manifest = tr if args.split == "train" else va
        samples = load_manifest(manifest, config.image_size)
    else:
        samples = generate_synthetic_dataset(args.synthetic, config.image_size, args.synthetic_seed)
        if args.split != "all":
            tr, va = split_samples(samples, args.train_fraction, args.seed)
            samples = tr if args.split == "train" else va
    if not samples:
        raise ConfigError("evaluation dataset is empty")
    return samples


def cmd_eval(args) -> int:
    params, config = load_checkpoint(args.checkpoint)
    samples = _eval_samples(args, config)
    record, _ = evaluate(params, config, samples, batch_size=args.batch_size)
    if args.fps_iters:
        record.fps = measure_fps(RetSegModel(config, params), iterations=args.fps_iters)
    name = args.name or (Path(args.data).name if args.data is not None else f"synthetic{args.synthetic}")
    row = [name] + [repr(float(v)) for v in record.row()]
    print(",".join(EVAL_HEADER))
    print(",".join(row))
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVAL_HEADER)
            w.writerow(row)
    return EXIT_OK


def cmd_infer(args) -> int:
    params, config = load_checkpoint(args.checkpoint)
    s = config.image_size
    if args.no_resize:
        from PIL import Image

        with Image.open(args.image) as im:
            if im.size != (s, s):
                raise ConfigError(f"image is {im.size[0]}x{im.size[1]} but the model expects {s}x{s} (--no-resize)")
    img = load_image(args.image, s)
    prob = RetSegModel(config, params)(Tensor(img[None])).data[0]
    write_mask_png(prob, args.out, mode="raw" if args.raw else "threshold")
    fg = float((prob >= 0.5).mean())
    print(f"wrote {args.out} ({s}x{s}, foreground fraction {fg:.4f})")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks, suite_passed

    t0 = time.perf_counter()
    results = run_checks(args.level, args.seed)
    for r in results:
        print(r.line())
    ok = suite_passed(results)
    failed = [r.name for r in results if r.gating and not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s"
          + ("" if ok else f"; failed: {', '.join(failed)}"))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(args) -> int:
    if args.iters < 10:
        raise ConfigError(f"--iters must be >= 10, got {args.iters}")
    if args.checkpoint:
        params, config = load_checkpoint(args.checkpoint)
        source = str(args.checkpoint)
    else:
        config = RetSegConfig()
        params = init_params(config, args.seed)
        source = "default config, fresh init"
    model = RetSegModel(config, params)
    print(f"model: {source}; config {config.config_hash()}; kernels={kernels.BACKEND}")
    for size in args.size or [config.image_size]:
        fps = measure_fps(model, size, iterations=args.iters)
        print(f"size={size} fps={fps:.3f} ms_per_forward={1000.0 / fps:.2f} config={config.config_hash()}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="retseg", description="RetSeg segmentation: train, evaluate, verify.")
    ap.add_argument("--kernels", choices=("auto", "c", "python"), help="kernel backend (default: RETSEG_KERNELS or auto)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def data_source(p, required=True):
        g = p.add_mutually_exclusive_group(required=required)
        g.add_argument("--data", type=Path, help="dataset root with images/ and masks/")
        g.add_argument("--synthetic", type=int, metavar="N", help="use N generated blob images")
        p.add_argument("--synthetic-seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", type=Path, required=True, help="key=value train config")
    data_source(p)
    p.add_argument("--size", type=int, help="override model image_size")
    p.add_argument("--epochs", type=int, help="override epochs")
    p.add_argument("--out", help="final checkpoint path (best-val copy is written next to it)")
    p.add_argument("--log", help="run-log CSV path (default: checkpoint path with .csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pooled metrics of a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    data_source(p)
    p.add_argument("--size", type=int, help="expected image size; must match the checkpoint")
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--fps-iters", type=int, default=10, help="0 skips the FPS measurement")
    p.add_argument("--name", help="dataset column value")
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a mask for one image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--raw", action="store_true", help="write probabilities instead of a thresholded mask")
    p.add_argument("--no-resize", action="store_true", help="reject images not already at the model size")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="forward-pass throughput")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--size", type=int, nargs="+")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.kernels:
        kernels.use(args.kernels)
    try:
        return args.func(args)
    except (RetSegError, OSError) as exc:
        print(f"retseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
