"""Command line front end.

Subcommands: train, denoise, eval, info, search, add-noise, gradcheck.
Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
stderr; machine-readable output (CSV, file paths) goes to stdout or the
requested output files. Sigma is always on the 0-255 scale.
"""

from __future__ import annotations

import argparse
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .evaluate import evaluate_dataset, write_report_csv
from .imageio import PgmFormatError, from_unit, read_pgm, to_unit, write_pgm
from .model import (ArchConfig, CheckpointError, build_flashlight, count_params,
                    enumerate_architectures, forward, load_checkpoint,
                    receptive_field, save_checkpoint)
from .train import TrainConfig, add_awgn, gradient_check, train, write_train_log_csv


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_arch(text: str) -> ArchConfig:
    parts = text.split(",")
    if len(parts) != 3:
        raise _UsageError(f"--arch expects 'l,m,n', got {text!r}")
    try:
        l, m, n = (int(p) for p in parts)
    except ValueError:
        raise _UsageError(f"--arch expects integers, got {text!r}") from None
    return ArchConfig(l, m, n)


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p != ""]
    except ValueError:
        raise _UsageError(f"expected a comma-separated integer list, got {text!r}") from None


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise _UsageError(f"--size expects 'H,W', got {text!r}")
    return int(parts[0]), int(parts[1])


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="bound internal BLAS parallelism; 1 is the determinism mode")
    common.add_argument("--dtype", choices=("f32", "f64"), default="f32")

    parser = _Parser(prog="flcnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("train", parents=[common], help="train a denoiser")
    p.add_argument("--data", required=True, help="directory of training PGMs")
    p.add_argument("--val", default=None, help="directory of validation PGMs")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--arch", type=_parse_arch, default=ArchConfig())
    p.add_argument("--epochs", type=int, default=55)
    p.add_argument("--epoch-length", type=int, default=4096)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-drop", type=int, default=30)
    p.add_argument("--lr-after", type=float, default=1e-4)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--out", required=True, help="checkpoint/log output directory")

    p = sub.add_parser("denoise", parents=[common], help="denoise one PGM image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True, help="directory of PGM images")
    p.add_argument("--name", default=None, help="dataset name in the report")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--report", required=True, help="CSV output path")
    p.add_argument("--save-images", default=None, help="directory for denoised PGMs")

    p = sub.add_parser("info", parents=[common], help="architecture summary")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--arch", type=_parse_arch)
    g.add_argument("--model")

    p = sub.add_parser("search", parents=[common], help="enumerate architecture grid")
    p.add_argument("--l", type=_parse_int_list, required=True)
    p.add_argument("--m", type=_parse_int_list, required=True)
    p.add_argument("--n", type=_parse_int_list, required=True)

    p = sub.add_parser("add-noise", parents=[common], help="corrupt a PGM with AWGN")
    p.add_argument("--input", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of the whole-model backward pass")
    p.add_argument("--arch", type=_parse_arch, default=ArchConfig(1, 1, 1))
    p.add_argument("--size", type=_parse_size, default=(10, 10))
    p.add_argument("--samples", type=int, default=200)
    return parser


def _load_corpus(directory) -> list[np.ndarray]:
    paths = sorted(Path(directory).glob("*.pgm"))
    if not paths:
        raise ValueError(f"no .pgm images found in {directory}")
    return [read_pgm(p).pixels.astype(np.float64) / 255.0 for p in paths]


def _stage_rows(g):
    """(stage, kind, kernel, c_in, c_out, params) per architectural layer."""
    by_prefix = {}
    for e in g.params.trainable_entries():
        stage = e.name.rsplit(".", 1)[0]
        for marker in (".b1.", ".b2.", ".b3.", ".b4.", ".proj.", ".post."):
            cut = stage.find(marker)
            if cut >= 0:
                stage = stage[:cut]
                break
        if stage.endswith(".conv") or stage.endswith(".bn"):
            stage = stage.rsplit(".", 1)[0]
        by_prefix[stage] = by_prefix.get(stage, 0) + e.array.size
    rows = []
    for stage, params in by_prefix.items():
        if stage == "first":
            rows.append((stage, "conv3x3+relu", 1, 64, params))
        elif stage == "last":
            rows.append((stage, "conv3x3", 64, 1, params))
        elif stage.startswith("warmup3") or stage.startswith("mid"):
            rows.append((stage, "conv3x3+bn+relu", 64, 64, params))
        elif stage.startswith("warmup5"):
            rows.append((stage, "conv5x5+bn+relu", 64, 64, params))
        else:
            rows.append((stage, "inception(residual)", 64, 64, params))
    return rows


def _cmd_info(args) -> int:
    if args.model is not None:
        g = load_checkpoint(args.model)
    else:
        g = build_flashlight(args.arch, dtype=args.dtype, seed=args.seed)
    print(f"{'stage':<12} {'kind':<22} {'in':>4} {'out':>4} {'params':>9}")
    for stage, kind, c_in, c_out, params in _stage_rows(g):
        print(f"{stage:<12} {kind:<22} {c_in:>4} {c_out:>4} {params:>9}")
    trainable, total = count_params(g)
    print(f"trainable_params={trainable}")
    print(f"total_params={total}")
    print(f"receptive_field={receptive_field(g)}")
    return 0


def _cmd_search(args) -> int:
    print("l,m,n,params")
    for l, m, n, params in enumerate_architectures(args.l, args.m, args.n):
        print(f"{l},{m},{n},{params}")
    return 0


def _cmd_denoise(args) -> int:
    g = load_checkpoint(args.model)
    img = read_pgm(args.input)
    z = to_unit(img, dtype=g.dtype)
    yhat, _ = forward(g, z, "infer")
    write_pgm(from_unit(yhat, clip=True), args.output)
    print(args.output)
    return 0


def _cmd_add_noise(args) -> int:
    img = read_pgm(args.input)
    z = to_unit(img, dtype=np.float64)
    noisy = add_awgn(z, args.sigma, np.random.default_rng(args.seed))
    write_pgm(from_unit(noisy, clip=True), args.output)
    print(args.output)
    return 0


def _cmd_eval(args) -> int:
    g = load_checkpoint(args.model)
    report = evaluate_dataset(g, args.dataset, args.sigma, seed=args.seed,
                              dataset_name=args.name,
                              save_images_dir=args.save_images)
    write_report_csv(report, args.report)
    print(args.report)
    print(f"mean_psnr={report.mean_psnr:.2f} mean_ssim={report.mean_ssim:.4f}",
          file=sys.stderr)
    return 0


def _cmd_gradcheck(args) -> int:
    err = gradient_check(args.arch, input_size=args.size, dtype=args.dtype,
                         n_samples=args.samples, seed=args.seed)
    print(f"max_rel_error={err:.6e}")
    return 0


def _cmd_train(args) -> int:
    corpus = _load_corpus(args.data)
    val = _load_corpus(args.val) if args.val else None
    cfg = TrainConfig(arch=args.arch, sigma=args.sigma, epochs=args.epochs,
                      epoch_length=args.epoch_length, batch_size=args.batch_size,
                      patch_size=args.patch, lr_initial=args.lr,
                      lr_drop_epoch=args.lr_drop, lr_after=args.lr_after,
                      seed=args.seed, augment=args.augment, dtype=args.dtype)
    g, log = train(cfg, corpus, val, checkpoint_dir=args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(g, out / "model.flcn")
    write_train_log_csv(log, out / "log.csv")
    print(out / "model.flcn")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "denoise": _cmd_denoise,
    "eval": _cmd_eval,
    "info": _cmd_info,
    "search": _cmd_search,
    "add-noise": _cmd_add_noise,
    "gradcheck": _cmd_gradcheck,
}


def _thread_limit_context(threads):
    if threads is None:
        return nullcontext()
    if threads < 1:
        raise _UsageError("--threads must be at least 1")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=threads)


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        if args.command is None:
            raise _UsageError("a subcommand is required")
        ctx = _thread_limit_context(args.threads)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return 0 if exc.code in (0, None) else 1
    try:
        with ctx:
            return _COMMANDS[args.command](args)
    except (CheckpointError, PgmFormatError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
