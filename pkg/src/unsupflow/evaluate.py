"""Endpoint error and the benchmark harness."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .data import SamplePair, load_samples
from .grid import as_flow, check_same_size
from .variational import solve_flow

CSV_FIELDS = ("method", "split", "epe_all", "epe_noc", "n_pixels_all", "n_pixels_noc", "runtime_ms_per_pair")


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class EpeReport:
    """Pixel-pooled endpoint errors; ``per_image`` holds ``(epe_all, epe_noc)`` per pair."""

    epe_all: float
    epe_noc: float
    n_pixels_all: int
    n_pixels_noc: int
    per_image: list = field(default_factory=list)


def epe_map(pred, gt) -> np.ndarray:
    pred = as_flow(pred)
    gt = as_flow(gt)
    check_same_size(pred, gt)
    d = pred - gt
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def endpoint_error(pred, gt, mask=None) -> EpeReport:
    """Mean endpoint error over all pixels and over ``mask`` (all pixels when omitted)."""
    err = epe_map(pred, gt)
    if mask is None:
        mask = np.ones(err.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != err.shape:
        raise ValueError(f"dimension mismatch: mask {mask.shape} vs flow {err.shape}")
    if not mask.any():
        raise EmptyMaskError("mask selects no pixels")
    all_ = float(err.mean())
    noc = float(err[mask].mean())
    return EpeReport(all_, noc, int(err.size), int(mask.sum()), [(all_, noc)])


def combine(reports: list[EpeReport]) -> EpeReport:
    """Pool several single-image reports by pixel count."""
    if not reports:
        raise ValueError("nothing to combine")
    n_all = sum(r.n_pixels_all for r in reports)
    n_noc = sum(r.n_pixels_noc for r in reports)
    s_all = sum(r.epe_all * r.n_pixels_all for r in reports)
    s_noc = sum(r.epe_noc * r.n_pixels_noc for r in reports)
    per = [pi for r in reports for pi in r.per_image]
    return EpeReport(s_all / n_all, s_noc / n_noc, n_all, n_noc, per)


# ---------------------------------------------------------------------------
# methods
# ---------------------------------------------------------------------------

def zero_method(pair: SamplePair) -> np.ndarray:
    return np.zeros(pair.img1.shape[:2] + (2,))


def solver_method(config: Config):
    loss_cfg = config.solver_loss_config()
    pyr = config.pyramid_config()

    def run(pair: SamplePair) -> np.ndarray:
        return solve_flow(pair.img1, pair.img2, loss_cfg, pyr)[0]

    return run


def net_method(checkpoint):
    from .train import load_checkpoint  # keeps evaluation importable without the training stack

    checkpoint = os.fspath(checkpoint)
    if not os.path.isfile(checkpoint):
        raise FileNotFoundError(f"missing checkpoint: {checkpoint}")
    net, _, _ = load_checkpoint(checkpoint)

    def run(pair: SamplePair) -> np.ndarray:
        return net.predict(pair.img1, pair.img2)

    return run


def resolve_method(name: str, config: Config | None = None):
    """``zero``, ``solver`` or ``net:PATH``."""
    if name == "zero":
        return zero_method
    if name == "solver":
        return solver_method(config or Config())
    if name.startswith("net:"):
        return net_method(name[4:])
    raise ValueError(f"unknown method {name!r} (expected zero, solver or net:CHECKPOINT)")


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def evaluate_method(method, samples: list[SamplePair]) -> tuple[EpeReport, float]:
    """Return the pooled report and the mean wall time per pair in milliseconds."""
    reports = []
    elapsed = 0.0
    for pair in samples:
        t0 = time.perf_counter()
        flow = method(pair)
        elapsed += time.perf_counter() - t0
        if not np.all(np.isfinite(flow)):
            raise FloatingPointError("method returned non-finite flow")
        err = epe_map(flow, pair.gt_flow)
        mask = np.asarray(pair.noc_mask, dtype=bool)
        noc = float(err[mask].mean()) if mask.any() else 0.0
        reports.append(EpeReport(float(err.mean()), noc, int(err.size), int(mask.sum()), [(float(err.mean()), noc)]))
    if not reports:
        raise ValueError("empty test split")
    return combine(reports), 1000.0 * elapsed / len(samples)


def run_benchmark(data_dir, methods: list[str], out_csv, split: str = "test", config: Config | None = None,
                  timing: bool = True, overwrite: bool = False) -> list[dict]:
    """Evaluate each method on ``split`` and write the CSV report.

    A zero-flow row is always included. With ``timing=False`` the runtime
    column is written as 0 so the file is byte-reproducible.
    """
    out_csv = os.fspath(out_csv)
    if os.path.exists(out_csv) and not overwrite:
        raise FileExistsError(f"refusing to overwrite {out_csv}")
    # resolve everything first so a bad checkpoint fails before any work
    names = list(dict.fromkeys(["zero", *methods]))
    resolved = [(n, resolve_method(n, config)) for n in names]
    samples = load_samples(data_dir, split)
    rows = []
    for name, method in resolved:
        rep, ms = evaluate_method(method, samples)
        rows.append({
            "method": name, "split": split,
            "epe_all": rep.epe_all, "epe_noc": rep.epe_noc,
            "n_pixels_all": rep.n_pixels_all, "n_pixels_noc": rep.n_pixels_noc,
            "runtime_ms_per_pair": ms if timing else 0.0,
        })
    with open(out_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'method':<28} {'split':<6} {'EPE all':>9} {'EPE noc':>9} {'ms/pair':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['method']:<28} {r['split']:<6} {r['epe_all']:9.4f} {r['epe_noc']:9.4f} "
                     f"{r['runtime_ms_per_pair']:9.1f}")
    return "\n".join(lines)
