"""Command-line surface: encode, stats, correct, train, eval, pair-metrics.

Exit codes: 0 success, 2 usage error (argparse), 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import imageio
from .photostats import stat_vector
from .metrics import psnr, ssim, format_db
from .checkpoint import CheckpointError
from .pipeline import correct, load_model
from .losses import LossWeights
from .train import TrainConfig, SynthPairSpec, make_pairs, train


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="exposhift",
        description="Reference-guided exposure transfer: train, apply, "
                    "inspect, and score.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("encode", help="print an image's 66-D exposure descriptor")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("stats", help="print photometric statistics as JSON")
    p.add_argument("--image", required=True)

    p = sub.add_parser("correct", help="transfer the reference exposure onto "
                                       "the source image")
    p.add_argument("--source", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="optimize a model on directory or "
                                     "synthetic pairs")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="directory of training images")
    src.add_argument("--synth", action="store_true",
                     help="procedural gamma/EV degradation pairs")
    p.add_argument("--ref", help="explicit reference image (directory mode)")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--count", type=int, default=20,
                   help="synthetic pair count")
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--lambda-dc", type=float, default=0.5)
    p.add_argument("--lambda-ctr", type=float, default=0.1)
    p.add_argument("--log", help="CSV loss log path")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint at --out")

    p = sub.add_parser("eval", help="score prediction dir against ground "
                                    "truth dir as CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)

    p = sub.add_parser("pair-metrics", help="PSNR/SSIM for one image pair")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    return ap


def _cmd_encode(args) -> int:
    model = load_model(args.ckpt)
    z = model.encoder.encode(imageio.load(args.image))
    print(",".join(f"{v:.8g}" for v in z))
    return 0


def _cmd_stats(args) -> int:
    img = imageio.load(args.image)
    s = stat_vector(imageio.to_gray(img))
    print(json.dumps({"mu": s.mu, "sigma": s.sigma, "skew": s.skew,
                      "kurt": s.kurt, "p_under": s.p_under,
                      "p_over": s.p_over}))
    return 0


def _cmd_correct(args) -> int:
    model = load_model(args.ckpt)
    out = correct(model, imageio.load(args.source), imageio.load(args.reference))
    imageio.save(args.out, out)
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig(lr=args.lr, batch=args.batch, image_size=args.size,
                      seed=args.seed,
                      weights=LossWeights(args.lambda_dc, args.lambda_ctr),
                      reference_path=args.ref)
    if args.synth:
        pairs = make_pairs(SynthPairSpec(), seed=args.seed, count=args.count,
                           size=args.size)
    else:
        pairs = make_pairs(args.data, seed=args.seed, size=args.size,
                           reference_path=args.ref)
    resume_from = args.out if args.resume else None
    res = train(cfg, pairs, args.out, steps=args.steps, log_path=args.log,
                resume_from=resume_from)
    last = res.history[-1] if res.history else None
    if last is not None:
        print(f"step {last[0]}: L_pix {last[1]:.5f} L_dc {last[2]:.5f} "
              f"L_ctr {last[3]:.5f} total {last[4]:.5f}")
    print(res.checkpoint_path)
    return 0


def _metric_row(name: str, p: float, s: float) -> str:
    return f"{name},{format_db(p)},{s:.6g}"


def _cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    exts = (".ppm", ".png")
    pred_names = {p.name for p in pred_dir.iterdir()
                  if p.suffix.lower() in exts}
    gt_names = {p.name for p in gt_dir.iterdir() if p.suffix.lower() in exts}
    common = sorted(pred_names & gt_names)
    if not common:
        raise ValueError("no common image filenames between --pred and --gt")
    print("filename,psnr_db,ssim")
    psnrs, ssims = [], []
    for name in common:
        a = imageio.load(pred_dir / name)
        b = imageio.load(gt_dir / name)
        p, s = psnr(a, b), ssim(a, b)
        psnrs.append(p)
        ssims.append(s)
        print(_metric_row(name, p, s))
    mean_p = math.inf if any(math.isinf(p) for p in psnrs) else \
        float(np.mean(psnrs))
    print(_metric_row("mean", mean_p, float(np.mean(ssims))))
    return 0


def _cmd_pair_metrics(args) -> int:
    a, b = imageio.load(args.a), imageio.load(args.b)
    print("psnr_db,ssim")
    print(f"{format_db(psnr(a, b))},{ssim(a, b):.6g}")
    return 0


_DISPATCH = {
    "encode": _cmd_encode,
    "stats": _cmd_stats,
    "correct": _cmd_correct,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "pair-metrics": _cmd_pair_metrics,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 0
    try:
        return _DISPATCH[args.cmd](args)
    except (imageio.ImageIOError, CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
