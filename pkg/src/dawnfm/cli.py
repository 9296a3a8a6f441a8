"""Command-line entry point: ``dawnfm <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from ._kernels import retain_freed_memory
from .config import ExperimentConfig
from .errors import DawnFMError
from .metrics import aggregate


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _pct(text):
    v = float(text)
    if not 0.0 <= v <= 20.0:
        raise argparse.ArgumentTypeError("noise percentage must lie in [0, 20]")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dawnfm", description="Data-aware, noise-informed flow matching.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a velocity model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--stop-after", type=int, help="stop once this many epochs are done")
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = sub.add_parser("infer", help="posterior ensembles for a set of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="DWNT tensor or IDX file of ground-truth images")
    p.add_argument("--noise-pct", type=_pct, required=True)
    p.add_argument("--ensemble", type=int, default=32)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=100, help="RK4 steps (h = 1/steps)")
    p.add_argument("--limit", type=int, help="only the first N images")

    p = sub.add_parser("eval", help="metrics CSV for predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--operator", required=True, help="experiment config JSON or checkpoint directory")
    p.add_argument("--csv", required=True)

    p = sub.add_parser("toy-duathlon", help="two-lobe scalar-sum toy problem")
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--noise-pct", type=_pct, default=2.0)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--checkpoint", help="reuse a trained toy checkpoint")

    p = sub.add_parser("op-test", help="adjoint, linearity and norm checks of an operator")
    p.add_argument("--operator", choices=("blur", "radon", "sum"), required=True)
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--trials", type=int, default=20)
    return ap


def _train(a):
    cfg = ExperimentConfig.load(a.config)
    tr = pipeline.train_experiment(cfg, a.out, resume=a.resume, stop_after=a.stop_after,
                                   checkpoint_every=a.checkpoint_every)
    last = tr.history[-1] if tr.history else {}
    print(json.dumps({"epoch": tr.epoch, "last": last}, sort_keys=True))
    return 0


def _infer(a):
    imgs = pipeline.load_images(a.input)
    if a.limit is not None:
        imgs = imgs[:a.limit]
    res = pipeline.infer_images(a.checkpoint, imgs, a.noise_pct, a.ensemble, a.seed, a.out, a.steps)
    print(f"wrote {res['mean'].shape[0]} posterior ensembles to {a.out}")
    return 0


def _eval(a):
    op = pipeline.operator_from_path(a.operator)
    reps = pipeline.evaluate_dirs(a.pred, a.truth, op, a.csv)
    for f in ("mse", "psnr", "ssim"):
        m, s = aggregate([getattr(r, f) for r in reps])
        print(f"{f}: {m:.6g} +- {s:.3g}")
    return 0


def _toy(a):
    s = pipeline.toy_duathlon(a.b, a.noise_pct, a.samples, a.out, seed=a.seed,
                              epochs=a.epochs, checkpoint=a.checkpoint)
    s.pop("ensemble")
    print(json.dumps(s, indent=1, sort_keys=True))
    return 0


def _optest(a):
    rep = pipeline.operator_report(a.operator, a.side, a.trials)
    print(json.dumps(rep, indent=1, sort_keys=True))
    return 0 if rep["ok"] else 1


COMMANDS = {"train": _train, "infer": _infer, "eval": _eval, "toy-duathlon": _toy, "op-test": _optest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    retain_freed_memory()
    try:
        return COMMANDS[args.command](args)
    except (DawnFMError, OSError) as exc:
        print(f"dawnfm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
