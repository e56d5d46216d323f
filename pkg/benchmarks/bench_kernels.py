"""Time the numba and numpy kernel backends.

Kernel timings run both implementations in this process. The end-to-end
timings (one solver call, ten training iterations) start a fresh
interpreter per backend, since the backend is fixed at import time by
``UNSUPFLOW_NO_NUMBA``.

    python benchmarks/bench_kernels.py [--repeat 20] [--no-e2e]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from unsupflow import kernels

E2E_SNIPPET = r"""
import time, numpy as np
from unsupflow import kernels
from unsupflow.config import Config
from unsupflow.data import SceneSpec, generate_pair
from unsupflow.train import train
from unsupflow.variational import PyramidConfig, solve_flow
cfg = Config()
pair = generate_pair(SceneSpec(), 3)
solve_flow(pair.img1[:16, :16], pair.img2[:16, :16], cfg.solver_loss_config(), PyramidConfig(levels=1, iterations_per_level=1))
t = time.perf_counter(); solve_flow(pair.img1, pair.img2, cfg.solver_loss_config(), cfg.pyramid_config()); solve = time.perf_counter() - t
pairs = [generate_pair(SceneSpec(), i).images() for i in range(8)]
train(pairs, cfg=cfg.train_config(1))
t = time.perf_counter(); train(pairs, cfg=cfg.train_config(10)); tr = (time.perf_counter() - t) / 10
print(kernels.BACKEND, solve, tr)
"""


def _cases(rng):
    img = rng.random((64, 64, 3))
    flow = rng.normal(0, 3, size=(64, 64, 2))
    up = rng.normal(size=(64, 64, 3))
    x = rng.normal(size=(4, 16, 32, 32)).astype(np.float32)
    cols = kernels.numpy_impl.im2col(x, 5, 2, 2)
    return {
        "warp_gather 64x64x3": lambda impl: impl.warp_gather(img, flow),
        "warp_scatter 64x64x3": lambda impl: impl.warp_scatter(up, flow),
        "im2col 4x16x32x32 k5 s2": lambda impl: impl.im2col(x, 5, 2, 2),
        "col2im 4x16x32x32 k5 s2": lambda impl: impl.col2im(cols, x.shape, 5, 2, 2),
    }


def bench_kernels(repeat: int) -> list[tuple[str, float, float | None]]:
    rng = np.random.default_rng(0)
    rows = []
    impls = [kernels.numpy_impl] + ([kernels.numba_impl] if kernels.HAVE_NUMBA else [])
    for name, fn in _cases(rng).items():
        for impl in impls:
            fn(impl)  # compile / warm up
        times = [min(timeit.repeat(lambda: fn(impl), number=1, repeat=repeat)) for impl in impls]
        rows.append((name, times[0] * 1e3, times[1] * 1e3 if len(times) > 1 else None))
    return rows


def bench_end_to_end() -> dict[str, tuple[float, float]]:
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, UNSUPFLOW_NO_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", E2E_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, solve, it = res.stdout.split()[-3:]
        out[backend] = (float(solve), float(it))
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-e2e", action="store_true")
    args = ap.parse_args(argv)

    print(f"{'kernel':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, t_np, t_nb in bench_kernels(args.repeat):
        if t_nb is None:
            print(f"{name:<26} {t_np:10.3f} {'-':>10} {'-':>8}")
        else:
            print(f"{name:<26} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:7.1f}x")
    if not args.no_e2e:
        print()
        print(f"{'backend':<8} {'solve 64x64 (s)':>16} {'train iter (ms)':>16}")
        for backend, (solve, it) in bench_end_to_end().items():
            print(f"{backend:<8} {solve:16.3f} {it * 1e3:16.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
