"""Flat ``key = value`` configuration files.

One setting per line, ``#`` starts a comment, keys are dotted names from
:data:`KEYS`. Keys missing from a file keep their defaults; unknown or
repeated keys are errors. Ranges and weight lists are comma separated.

The defaults are the desk-scale settings this package is tuned for. The
``profiles/`` directory at the repository root ships the published
Flying Chairs and KITTI settings alongside them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Callable

from .data import AugmentConfig
from .losses import LossConfig
from .optim import AdamParams
from .penalty import CharbonnierParams
from .train import TrainConfig
from .variational import PyramidConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


def _pair(text: str) -> tuple[float, float]:
    vals = _floats(text)
    if len(vals) != 2:
        raise ValueError(f"expected 'lo,hi', got {text!r}")
    return vals


@dataclass(frozen=True)
class _Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str


KEYS: dict[str, _Key] = {
    "penalty.epsilon": _Key(float, 1e-3, "Charbonnier epsilon (both terms)"),
    "penalty.alpha_photo": _Key(float, 0.25, "Charbonnier exponent of the photometric term"),
    "penalty.alpha_smooth": _Key(float, 0.37, "Charbonnier exponent of the smoothness term"),
    "loss.lambda": _Key(float, 0.05, "smoothness weight for network training"),
    "loss.mask_out_of_bounds": _Key(_bool, True, "drop pixels whose warp sample leaves the image"),
    "loss.normalize": _Key(_bool, True, "average rather than sum the loss terms"),
    "loss.level_weights": _Key(_floats, (0.25, 0.5, 1.0), "weights of the coarse-to-fine prediction losses"),
    "adam.beta1": _Key(float, 0.9, "Adam first-moment decay"),
    "adam.beta2": _Key(float, 0.999, "Adam second-moment decay"),
    "adam.eps_hat": _Key(float, 1e-8, "Adam denominator stabiliser"),
    "train.lr": _Key(float, 3e-4, "initial network learning rate"),
    "train.lr_halving_period": _Key(int, 5000, "iterations between learning-rate halvings"),
    "train.batch_size": _Key(int, 4, "pairs per iteration"),
    "train.iterations": _Key(int, 20000, "total training iterations"),
    "train.seed": _Key(int, 0, "weight-init and batch seed"),
    "train.response_norm": _Key(_bool, True, "9x9 response normalisation on both image paths"),
    "train.checkpoint_every": _Key(int, 1000, "iterations between checkpoints"),
    "train.log_every": _Key(int, 10, "iterations between loss-curve flushes"),
    "augment.noise_sigma": _Key(float, 0.02, "additive Gaussian noise"),
    "augment.contrast_range": _Key(_pair, (0.8, 1.2), "contrast factor about 0.5"),
    "augment.color_multiplier_range": _Key(_pair, (0.9, 1.1), "per-channel gain"),
    "augment.gamma_range": _Key(_pair, (0.8, 1.25), "gamma exponent"),
    "augment.brightness_delta_range": _Key(_pair, (-0.1, 0.1), "additive brightness"),
    "augment.translation_range": _Key(float, 4.0, "shared translation, pixels"),
    "augment.allow_flip": _Key(_bool, True, "random left-right flip"),
    "augment.rotation_range": _Key(float, 10.0, "shared rotation, degrees"),
    "augment.scale_range": _Key(_pair, (0.9, 1.1), "shared zoom"),
    "augment.relative_translation": _Key(float, 2.0, "extra translation of frame 2, pixels"),
    "solver.lambda": _Key(float, 0.1, "smoothness weight for the per-pair solver"),
    "solver.levels": _Key(int, 3, "pyramid levels"),
    "solver.iterations_per_level": _Key(int, 200, "Adam steps per level"),
    "solver.lr": _Key(float, 0.05, "Adam step size on the flow field"),
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return repr(value)


@dataclass(frozen=True)
class Config:
    values: dict = field(default_factory=lambda: {k: spec.default for k, spec in KEYS.items()})

    def __getitem__(self, key):
        return self.values[key]

    def _loss(self, lam: float) -> LossConfig:
        eps = self["penalty.epsilon"]
        return LossConfig(
            lam=lam,
            photo=CharbonnierParams(self["penalty.alpha_photo"], eps),
            smooth=CharbonnierParams(self["penalty.alpha_smooth"], eps),
            mask_out_of_bounds=self["loss.mask_out_of_bounds"],
            normalize=self["loss.normalize"],
        )

    def loss_config(self) -> LossConfig:
        return self._loss(self["loss.lambda"])

    def solver_loss_config(self) -> LossConfig:
        return self._loss(self["solver.lambda"])

    def adam(self, lr: float) -> AdamParams:
        return AdamParams(lr=lr, beta1=self["adam.beta1"], beta2=self["adam.beta2"], eps_hat=self["adam.eps_hat"])

    def pyramid_config(self) -> PyramidConfig:
        return PyramidConfig(levels=self["solver.levels"], iterations_per_level=self["solver.iterations_per_level"],
                             optimizer=self.adam(self["solver.lr"]))

    def augment_config(self) -> AugmentConfig:
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("augment.")}
        return AugmentConfig(seed=self["train.seed"], **kw)

    def train_config(self, iterations: int | None = None) -> TrainConfig:
        return TrainConfig(
            batch_size=self["train.batch_size"],
            total_iterations=self["train.iterations"] if iterations is None else iterations,
            adam=self.adam(self["train.lr"]),
            lr_halving_period=self["train.lr_halving_period"],
            seed=self["train.seed"],
            loss=self.loss_config(),
            level_weights=self["loss.level_weights"],
            augment=self.augment_config(),
            response_norm=self["train.response_norm"],
            checkpoint_every=self["train.checkpoint_every"],
            log_every=self["train.log_every"],
        )

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.values.items())


def parse_config(text: str, source: str = "<string>") -> Config:
    values = {k: spec.default for k, spec in KEYS.items()}
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{source}:{lineno}"
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        seen.add(key)
        try:
            values[key] = KEYS[key].parse(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from None
    cfg = Config(values)
    try:  # surface range violations at load time
        cfg.train_config()
        cfg.pyramid_config()
        cfg.solver_loss_config()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path) -> Config:
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=path)
