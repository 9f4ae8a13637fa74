"""Command-line entry point: train, compress, decompress, eval, sweep, inspect."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import codec
from .data import StereoPair, ingest_kitti, load_image, save_image, split_indices, synth_pairs
from .metrics import msssim, psnr
from .model import load_checkpoint, save_checkpoint
from .training import TrainConfig, train, write_log

log = logging.getLogger("wdsc")

RD_COLUMNS = ("bpp", "psnr", "msssim", "lambda", "alpha", "beta", "variant")


@dataclass
class RdPoint:
    bpp: float
    psnr_db: float
    msssim: float
    lmbda: float
    alpha: float
    beta: float
    variant: str

    def row(self) -> dict:
        return {
            "bpp": repr(self.bpp),
            "psnr": f"{self.psnr_db:.6f}",
            "msssim": "" if np.isnan(self.msssim) else f"{self.msssim:.6f}",
            "lambda": repr(self.lmbda),
            "alpha": repr(self.alpha),
            "beta": repr(self.beta),
            "variant": self.variant,
        }


def write_rd(points: Sequence[RdPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RD_COLUMNS)
        writer.writeheader()
        for p in points:
            writer.writerow(p.row())


def _msssim_or_nan(a, b) -> float:
    try:
        return msssim(a, b)
    except ValueError:
        # image too small for five 7x7 scales
        return float("nan")


def evaluate_pairs(model, pairs: Sequence[StereoPair]) -> list[RdPoint]:
    """Compress every left view, decode with the right view, one point per pair."""
    info = model.train_info
    points = []
    for pair in pairs:
        stream = model.compress(pair.left)
        x_hat = model.decompress(stream, pair.right)
        _, h, w = pair.left.shape
        bpp = codec.unpack(stream).payload_bits / (h * w)
        points.append(
            RdPoint(
                bpp=bpp,
                psnr_db=psnr(pair.left, x_hat),
                msssim=_msssim_or_nan(pair.left, x_hat),
                lmbda=float(info.get("lambda", float("nan"))),
                alpha=float(info.get("alpha", float("nan"))),
                beta=float(info.get("beta", float("nan"))),
                variant=model.variant,
            )
        )
    return points


def mean_point(points: Sequence[RdPoint]) -> RdPoint:
    first = points[0]
    return RdPoint(
        bpp=float(np.mean([p.bpp for p in points])),
        psnr_db=float(np.mean([p.psnr_db for p in points])),
        msssim=float(np.mean([p.msssim for p in points])),
        lmbda=first.lmbda,
        alpha=first.alpha,
        beta=first.beta,
        variant=first.variant,
    )


def _load_pairs(dataset: Optional[str], synthetic: int, seed: int, raw: bool, shape=(3, 32, 64)) -> list[StereoPair]:
    if dataset is None:
        return list(synth_pairs(seed, synthetic, shape))
    if raw:
        return list(ingest_kitti(dataset, raw=True))
    return list(ingest_kitti(dataset))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    pairs = _load_pairs(args.dataset, args.synthetic, cfg.seed, args.raw)
    train_idx, val_idx = split_indices(len(pairs))
    train_pairs = [pairs[i] for i in train_idx]
    val_pairs = [pairs[i] for i in val_idx]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, train_pairs, val_pairs, log_path=out / "train_log.csv", ckpt_path=out / "checkpoint.npz")
    print(f"trained {len(result.log_rows) and result.log_rows[-1]['iter']} iterations in {result.seconds:.1f}s -> {out / 'checkpoint.npz'}")
    if result.diverged:
        print("training diverged; last good weights saved", file=sys.stderr)
        return 3
    return 0


def cmd_compress(args) -> int:
    model = load_checkpoint(args.ckpt)
    x = load_image(args.input)
    data = model.compress(x)
    Path(args.out).write_bytes(data)
    bs = codec.unpack(data)
    print(f"{len(data)} bytes, {bs.payload_bits / (x.shape[1] * x.shape[2]):.5f} bpp")
    return 0


def cmd_decompress(args) -> int:
    model = load_checkpoint(args.ckpt)
    x_hat = model.decompress(Path(args.input).read_bytes(), load_image(args.side))
    save_image(x_hat, args.out)
    return 0


def cmd_inspect(args) -> int:
    model = load_checkpoint(args.ckpt)
    img = model.decompress(Path(args.input).read_bytes(), load_image(args.side), mode=args.mode)
    save_image(img, args.out)
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    pairs = _load_pairs(args.dataset, 0, 0, args.raw)
    points = evaluate_pairs(model, pairs)
    write_rd(points, args.out)
    print(f"{len(points)} rows -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    base.pop("lambda", None)
    base.pop("lmbda", None)
    if args.iters is not None:
        base["max_iters"] = args.iters
    base.setdefault("n", 8)
    base.setdefault("max_iters", 2000)
    base.setdefault("lr", 1e-3)
    pairs = _load_pairs(args.dataset, args.synthetic, base.get("seed", 0), args.raw)
    train_idx, test_idx = split_indices(len(pairs))
    train_pairs = [pairs[i] for i in train_idx]
    test_pairs = [pairs[i] for i in test_idx] or train_pairs
    points = []
    for k, lam in enumerate(sorted(args.lambdas)):
        cfg = TrainConfig(lmbda=lam, lambda_id=k, **base)
        result = train(cfg, train_pairs)
        if args.ckpt_dir:
            Path(args.ckpt_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(result.model, Path(args.ckpt_dir) / f"lambda{k}.npz")
            write_log(result.log_rows, Path(args.ckpt_dir) / f"lambda{k}_log.csv")
        pt = mean_point(evaluate_pairs(result.model, test_pairs))
        print(f"lambda={lam:g}: bpp={pt.bpp:.4f} psnr={pt.psnr_db:.2f}")
        points.append(pt)
    write_rd(points, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wdsc", description="Stereo image compression with decoder-side information.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p, synthetic_default=0):
        p.add_argument("--dataset", help="KITTI-style folder with left/right subfolders")
        p.add_argument("--raw", action="store_true", help="use images as stored, without crop/resample")
        p.add_argument("--synthetic", type=int, default=synthetic_default, help="number of synthetic pairs when no dataset is given")

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=".")
    data_args(p, 256)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="encode one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode with side information")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--side", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="rate-distortion rows for every pair of a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--raw", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train one model per lambda and write an RD curve")
    p.add_argument("--lambdas", type=float, nargs="+", required=True)
    p.add_argument("--config")
    p.add_argument("--iters", type=int)
    p.add_argument("--ckpt-dir")
    p.add_argument("--out", required=True)
    data_args(p, 128)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="decode only the common or only the private part")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--side", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=("common", "private"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, codec.BitstreamError, RuntimeError) as exc:
        print(f"wdsc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
