"""Command-line entry point: ``unsupflow <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 check failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys
import time

from . import kernels
from .config import Config, ConfigError, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("unsupflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)[xX](\d+)", text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _config(path) -> Config:
    if path is None:
        return Config()
    try:
        return load_config(path)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _refuse_existing(path, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def _atomic(path, write) -> None:
    """Write via a sibling temp file so a failure never leaves partial output."""
    root, ext = os.path.splitext(path)
    tmp = f"{root}.partial{ext}"
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import STRIDE, generate_dataset

    h, w = args.size
    if h <= 0 or w <= 0 or h % STRIDE or w % STRIDE:
        raise UsageError(f"size {h}x{w}: height and width must be positive multiples of the network stride {STRIDE}")
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    if not 0.0 <= args.test_fraction <= 1.0:
        raise UsageError("--test-fraction must lie in [0, 1]")
    manifest = generate_dataset(args.out, args.count, (h, w), args.seed, args.test_fraction, force=args.force)
    print(f"wrote {manifest['count']} pairs to {args.out} "
          f"(train {len(manifest['splits']['train'])}, test {len(manifest['splits']['test'])})")
    return EXIT_OK


def cmd_solve(args) -> int:
    from .evaluate import endpoint_error
    from .grid import colorize_flow, read_flo, read_image, write_flo, write_image
    from .variational import solve_flow

    cfg = _config(args.config)
    _refuse_existing(args.out, args.force)
    if args.viz:
        _refuse_existing(args.viz, args.force)
    img1 = read_image(args.pair[0])
    img2 = read_image(args.pair[1])
    gt = read_flo(args.gt) if args.gt else None
    t0 = time.perf_counter()
    flow, trace = solve_flow(img1, img2, cfg.solver_loss_config(), cfg.pyramid_config())
    elapsed = time.perf_counter() - t0
    _atomic(args.out, lambda p: write_flo(flow, p))
    if args.viz:
        _atomic(args.viz, lambda p: write_image(colorize_flow(flow), p))
    print(f"solved {img1.shape[1]}x{img1.shape[0]} pair in {elapsed:.2f} s, final loss {trace[-1].total:.6f}")
    if gt is not None:
        print(f"EPE {endpoint_error(flow, gt).epe_all:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_training_pairs
    from .net import MiniFlowNetSpec
    from .train import train

    if args.iterations is not None and args.iterations < 0:
        raise UsageError("--iterations must be >= 0")
    cfg = _config(args.config)
    saved_cfg = os.path.join(args.out, "config.cfg")
    if args.resume:
        if not os.path.isdir(args.out):
            raise FileNotFoundError(f"nothing to resume: {args.out} does not exist")
        if args.config is None and os.path.exists(saved_cfg):
            cfg = load_config(saved_cfg)
        elif os.path.exists(saved_cfg) and load_config(saved_cfg).values != cfg.values:
            raise UsageError(f"--config differs from the configuration saved in {saved_cfg}")
    elif os.path.isdir(args.out) and os.listdir(args.out):
        raise FileExistsError(f"{args.out} is not empty; use --resume to continue or choose a new directory")
    tcfg = cfg.train_config(args.iterations)
    pairs = load_training_pairs(args.data, "train")
    if not pairs:
        raise ValueError(f"{args.data} has an empty train split")
    os.makedirs(args.out, exist_ok=True)
    if not os.path.exists(saved_cfg):
        with open(saved_cfg, "w") as fh:
            fh.write(cfg.to_text())

    t0 = time.perf_counter()

    def progress(it, row):
        if (it + 1) % max(tcfg.log_every * 10, 1) == 0:
            log.info("iter %d  lr %.2e  loss %.5f  (%.0f s)", it + 1, row["lr"], row["total"], time.perf_counter() - t0)

    result = train(pairs, MiniFlowNetSpec(), tcfg, run_dir=args.out, resume=args.resume, progress=progress)
    final = result.curve[-1]["total"] if result.curve else float("nan")
    print(f"trained {tcfg.total_iterations} iterations on {len(pairs)} pairs, final loss {final:.5f}; "
          f"checkpoints in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import format_table, run_benchmark

    cfg = _config(args.config)
    try:
        rows = run_benchmark(args.data, args.method or ["zero"], args.out, split=args.split, config=cfg,
                             timing=not args.no_timing, overwrite=args.force)
    except ValueError as exc:
        if "unknown method" in str(exc):
            raise UsageError(str(exc)) from None
        raise
    print(format_table(rows))
    return EXIT_OK


def cmd_viz(args) -> int:
    from .grid import colorize_flow, read_flo, write_image

    _refuse_existing(args.out, args.force)
    flow = read_flo(args.flow)
    mm = "auto" if args.max_magnitude is None else args.max_magnitude
    _atomic(args.out, lambda p: write_image(colorize_flow(flow, mm), p))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import MODULES, format_results, run_suite

    if args.module != "all" and args.module not in MODULES:
        raise UsageError(f"unknown module {args.module!r}; choose from all, {', '.join(MODULES)}")
    results = run_suite(args.module, seed=args.seed)
    print(format_results(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed (kernel backend: {kernels.BACKEND})")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unsupflow", description="Unsupervised optical flow: solver, network, data and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=_size, default=(64, 64), help="HxW, multiples of 16 (default 64x64)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--test-fraction", type=float, default=0.125)
    g.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("solve", help="estimate flow for one pair with the coarse-to-fine solver")
    s.add_argument("--pair", nargs=2, metavar=("A.png", "B.png"), required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help=".flo output")
    s.add_argument("--viz", help="optional colour-wheel PNG")
    s.add_argument("--gt", help="ground-truth .flo; prints the EPE")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("train", help="train MiniFlowNet with the unsupervised loss")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--iterations", type=int, help="override train.iterations")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="benchmark methods on a dataset split")
    e.add_argument("--data", required=True)
    e.add_argument("--method", action="append", help="zero, solver or net:CHECKPOINT (repeatable)")
    e.add_argument("--out", required=True, help="CSV report")
    e.add_argument("--config")
    e.add_argument("--split", default="test")
    e.add_argument("--no-timing", action="store_true", help="write 0 in the runtime column")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="render a .flo file as a colour-wheel PNG")
    v.add_argument("--flow", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--max-magnitude", type=float)
    v.add_argument("--force", action="store_true")
    v.set_defaults(func=cmd_viz)

    c = sub.add_parser("gradcheck", help="run the finite-difference gradient suites")
    c.add_argument("--module", default="all")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"unsupflow {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"unsupflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
