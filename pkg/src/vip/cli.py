"""Command-line surface: train / eval / count / viz.

``VIP_SEED`` overrides the config seed; ``VIP_THREADS`` caps the BLAS thread
pools (applied before numpy loads).
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_cap():
    threads = os.environ.get("VIP_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def _parse_size(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vip", description="Part/whole two-level backbone toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training recipe")
    p_train.add_argument("--config", required=True, help="JSON config file")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")

    p_eval = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--format", required=True,
                        choices=("cifar10-bin", "image-dir", "synthetic"))

    p_count = sub.add_parser("count", help="parameter and FLOP report")
    p_count.add_argument("--variant", required=True)
    p_count.add_argument("--input", type=_parse_size, default=(224, 224),
                         metavar="HxW")
    p_count.add_argument("--breakdown", action="store_true")

    p_viz = sub.add_parser("viz", help="export per-part attention maps")
    p_viz.add_argument("--ckpt", required=True)
    p_viz.add_argument("--image", required=True)
    p_viz.add_argument("--block", type=int, required=True)
    p_viz.add_argument("--parts", required=True,
                       help="comma-separated part indices, e.g. 0,3,7")
    p_viz.add_argument("--out", required=True)
    return parser


def _load_image(path):
    import numpy as np

    if path.endswith((".pgm", ".ppm", ".pnm")):
        from .viz import read_pnm

        raw = read_pnm(path)
        if raw.ndim == 2:
            raw = np.stack([raw] * 3, axis=-1)
    else:
        from PIL import Image

        with Image.open(path) as img:
            raw = np.asarray(img.convert("RGB"))
    return raw.astype(np.float32).transpose(2, 0, 1) / 255.0


def main(argv=None):
    _apply_thread_cap()
    args = build_parser().parse_args(argv)

    if args.command == "train":
        from .train import load_config, train

        result = train(load_config(args.config), resume_from=args.resume, log=print)
        print(f"final checkpoint: {result.checkpoint_path}")
        return 0

    if args.command == "eval":
        from .data import load_dataset
        from .train import evaluate

        accuracy = evaluate(args.ckpt, load_dataset(args.data, args.format))
        print(f"top-1 accuracy: {accuracy:.4f}")
        return 0

    if args.command == "count":
        from .cost import cost_report
        from .network import build, preset

        model = build(preset(args.variant), init="zeros")
        report = cost_report(model, *args.input)
        print(f"{args.variant} @ {args.input[0]}x{args.input[1]}: "
              f"{report.params:,} params ({report.params / 1e6:.2f}M), "
              f"{report.macs:,} MACs ({report.macs / 1e9:.2f}G)")
        if args.breakdown:
            for name, (params, macs) in report.breakdown.items():
                print(f"  {name:20s} {params:12,d} {macs:16,d}")
        return 0

    if args.command == "viz":
        from .checkpoint import load_checkpoint, restore_model
        from .viz import export_affinity

        model = restore_model(load_checkpoint(args.ckpt))
        parts = [int(p) for p in args.parts.split(",") if p]
        maps = export_affinity(model, _load_image(args.image), args.block,
                               parts, args.out)
        for m in maps:
            print(f"wrote block{m.block}_part{m.part}.pgm "
                  f"({m.grid.shape[0]}x{m.grid.shape[1]})")
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
