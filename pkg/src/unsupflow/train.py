"""Unsupervised training loop, checkpoints and the loss-curve CSV."""

from __future__ import annotations

import csv
import glob
import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentConfig, ImagePair, training_batch
from .losses import LossConfig, multiscale_terms
from .net import MiniFlowNet, MiniFlowNetSpec, to_flow_fields
from .optim import AdamParams, AdamState, adam_step, halved_lr

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MFNCKPT\x00"
CKPT_VERSION = 1
CURVE_FIELDS = ("iteration", "lr", "photo", "smooth", "total")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, level: int, batch_seed: int):
        super().__init__(f"non-finite loss at iteration {iteration}, level {level}, batch seed {batch_seed}")
        self.iteration = iteration
        self.level = level
        self.batch_seed = batch_seed


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    total_iterations: int = 20_000
    adam: AdamParams = field(default_factory=lambda: AdamParams(lr=1e-4))
    lr_halving_period: int = 5_000
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    level_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    response_norm: bool = True
    checkpoint_every: int = 1000
    log_every: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")


@dataclass
class TrainResult:
    net: MiniFlowNet
    curve: list[dict]
    checkpoints: list[str]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, net: MiniFlowNet, iteration: int, state: AdamState | None = None) -> None:
    """Header (magic, version, JSON with the MiniFlowNetSpec), then little-endian float32 blobs.

    Blob order: parameters in layer declaration order, then the Adam first
    and second moments when ``state`` is given.
    """
    header = {
        "spec": json.loads(net.spec.to_json()),
        "iteration": int(iteration),
        "n_params": int(net.n_params),
        "layers": [name for name in net.slots],
        "adam_t": None if state is None else int(state.t),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.asarray(net.params, dtype="<f4").tobytes())
        if state is not None:
            fh.write(np.asarray(state.m, dtype="<f4").tobytes())
            fh.write(np.asarray(state.v, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(net, iteration, adam_state_or_None)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a MiniFlowNet checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    spec = MiniFlowNetSpec.from_json(json.dumps(header["spec"]))
    net = MiniFlowNet(spec, seed=0, dtype=np.float32)
    n = header["n_params"]
    if n != net.n_params:
        raise ValueError(f"checkpoint has {n} parameters, spec implies {net.n_params}")
    body = np.frombuffer(raw, dtype="<f4", offset=16 + hlen)
    expected = n * (3 if header["adam_t"] is not None else 1)
    if body.size != expected:
        raise ValueError(f"checkpoint payload has {body.size} floats, expected {expected}")
    net.params[:] = body[:n]
    state = None
    if header["adam_t"] is not None:
        state = AdamState(body[n:2 * n].astype(np.float32), body[2 * n:].astype(np.float32), header["adam_t"])
    return net, header["iteration"], state


def checkpoint_path(run_dir, iteration: int) -> str:
    return os.path.join(run_dir, f"ckpt_{iteration:07d}.bin")


def latest_checkpoint(run_dir) -> str | None:
    found = sorted(glob.glob(os.path.join(run_dir, "ckpt_*.bin")))
    return found[-1] if found else None


# ---------------------------------------------------------------------------
# loss curve
# ---------------------------------------------------------------------------

def _fmt(row) -> list[str]:
    return [str(row["iteration"])] + [repr(float(row[k])) for k in CURVE_FIELDS[1:]]


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"iteration": int(r["iteration"]), **{k: float(r[k]) for k in CURVE_FIELDS[1:]}}
            for r in csv.DictReader(fh)
        ]


def write_curve(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for row in rows:
            w.writerow(_fmt(row))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def batch_loss(net: MiniFlowNet, batch, cfg: TrainConfig, iteration: int = 0):
    """Forward pass plus the mean multiscale loss over the batch.

    Returns ``(preds, grads_by_level, photo, smooth, total)``. The loss
    only sees ``batch.loss_pairs``; nothing here can reach ground truth.
    """
    x = np.concatenate([net.prepare_input(p.img1, p.img2) for p in batch.net_pairs])
    preds = net.forward(x)
    n = len(batch.net_pairs)
    per_level = [to_flow_fields(p) for p in preds]
    grads = [np.zeros(p.shape, dtype=np.float64) for p in preds]
    photo = smooth = total = 0.0
    weights = cfg.level_weights
    if len(weights) != len(preds):
        raise ValueError(f"{len(preds)} prediction levels but {len(weights)} level weights")
    for i, pair in enumerate(batch.loss_pairs):
        reports = multiscale_terms([lvl[i] for lvl in per_level], pair.img1, pair.img2, cfg.loss)
        for k, (w, rep) in enumerate(zip(weights, reports)):
            if not np.isfinite(rep.total):
                raise TrainingDivergedError(iteration, k, batch.seed)
            photo += w * rep.photometric / n
            smooth += w * rep.smoothness / n
            total += w * rep.total / n
            grads[k][i] = (w / n) * rep.grad_flow.transpose(2, 0, 1)
    return preds, grads, photo, smooth, total


def train(pairs: list[ImagePair], spec: MiniFlowNetSpec = MiniFlowNetSpec(), cfg: TrainConfig = TrainConfig(),
          run_dir=None, resume: bool = False, progress=None) -> TrainResult:
    """Train MiniFlowNet on image pairs with the unsupervised multiscale loss.

    ``pairs`` must be :class:`ImagePair` objects: the training path has no
    access to ground-truth flow. With ``run_dir`` the loss curve
    (``loss.csv``) is flushed every ``cfg.log_every`` iterations and a
    checkpoint is written every ``cfg.checkpoint_every`` iterations and at
    the end. ``resume`` continues from the latest checkpoint in ``run_dir``.
    """
    if any(not isinstance(p, ImagePair) for p in pairs):
        raise TypeError("train() accepts ImagePair objects only (no ground truth on the training path)")
    curve: list[dict] = []
    checkpoints: list[str] = []
    start = 0
    net = state = None
    curve_path = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        curve_path = os.path.join(run_dir, "loss.csv")
        if resume:
            ckpt = latest_checkpoint(run_dir)
            if ckpt is None:
                raise FileNotFoundError(f"nothing to resume in {run_dir}")
            net, start, state = load_checkpoint(ckpt)
            if net.spec != spec:
                raise ValueError("checkpoint spec differs from the requested network spec")
            if os.path.exists(curve_path):
                curve = [r for r in read_curve(curve_path) if r["iteration"] < start]
    if net is None:
        net = MiniFlowNet(spec, seed=cfg.seed, dtype=np.float32)
    if state is None:
        state = AdamState.zeros(net.n_params, dtype=np.float32)

    def flush():
        # a zero-iteration run leaves only its initial checkpoint behind
        if curve_path is not None and (curve or os.path.exists(curve_path)):
            write_curve(curve_path, curve)

    def checkpoint(it):
        if run_dir is not None:
            path = checkpoint_path(run_dir, it)
            save_checkpoint(path, net, it, state)
            checkpoints.append(path)

    if start == 0 and run_dir is not None:
        checkpoint(0)
    for it in range(start, cfg.total_iterations):
        lr = halved_lr(cfg.adam.lr, it, cfg.lr_halving_period)
        batch = training_batch(pairs, it, cfg.batch_size, cfg.augment, response_norm=cfg.response_norm)
        _, grads, photo, smooth, total = batch_loss(net, batch, cfg, it)
        g = net.backward(grads)
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(it, -1, batch.seed)
        net.params += adam_step(state, g, cfg.adam, lr=lr)
        curve.append({"iteration": it, "lr": lr, "photo": photo, "smooth": smooth, "total": total})
        done = it + 1
        if done % cfg.log_every == 0:
            flush()
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            checkpoint(done)
        if progress is not None:
            progress(it, curve[-1])
    flush()
    if run_dir is not None and (not checkpoints or checkpoints[-1] != checkpoint_path(run_dir, cfg.total_iterations)):
        if cfg.total_iterations > start:
            checkpoint(cfg.total_iterations)
    return TrainResult(net, curve, checkpoints)
