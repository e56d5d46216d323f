"""Synthetic "mini-chairs" pairs, augmentation and on-disk datasets.

A scene is a textured background plus textured polygonal sprites, each
layer moved by its own affine map between the two frames. Because every
layer's motion is analytic, the ground-truth flow and the visibility mask
are exact.

Ground truth only ever lives in :class:`SamplePair`. The training path
works on :class:`ImagePair`, which has no flow field at all.
"""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from .grid import (
    as_flow,
    as_image,
    read_flo,
    read_image,
    read_mask,
    sample_bilinear,
    write_flo,
    write_image,
    write_mask,
)

MANIFEST = "manifest.json"
STRIDE = 16  # MiniFlowNet downsamples by 2**4


@dataclass(frozen=True)
class ImagePair:
    img1: np.ndarray
    img2: np.ndarray


@dataclass(frozen=True)
class SamplePair:
    img1: np.ndarray
    img2: np.ndarray
    gt_flow: np.ndarray
    noc_mask: np.ndarray

    def images(self) -> ImagePair:
        return ImagePair(self.img1, self.img2)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionRange:
    """Ranges for a random affine motion about a layer's centre."""

    translation: float = 0.0
    rotation_deg: float = 0.0
    scale: tuple[float, float] = (1.0, 1.0)
    shear: float = 0.0

    def is_static(self) -> bool:
        return self.translation == 0 and self.rotation_deg == 0 and self.scale == (1.0, 1.0) and self.shear == 0


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    sprites: int = 2
    sprite_radius: tuple[float, float] = (7.0, 16.0)
    background_motion: MotionRange = field(
        default_factory=lambda: MotionRange(translation=3.0, rotation_deg=3.0, scale=(0.96, 1.04))
    )
    sprite_motion: MotionRange = field(
        default_factory=lambda: MotionRange(translation=4.0, rotation_deg=8.0, scale=(0.9, 1.1), shear=0.05)
    )
    check_divisible: bool = True

    def __post_init__(self):
        if self.check_divisible and (self.height % STRIDE or self.width % STRIDE):
            raise ValueError(
                f"image size {self.height}x{self.width} must be divisible by {STRIDE} "
                "(the network's total stride)"
            )


@dataclass(frozen=True)
class Affine:
    """``p -> A (p - c) + c + t`` with ``p = (x, y)``."""

    A: np.ndarray
    c: np.ndarray
    t: np.ndarray

    def apply(self, x, y):
        dx, dy = x - self.c[0], y - self.c[1]
        a = self.A
        return (a[0, 0] * dx + a[0, 1] * dy + self.c[0] + self.t[0],
                a[1, 0] * dx + a[1, 1] * dy + self.c[1] + self.t[1])

    def inverse(self, x, y):
        ai = np.linalg.inv(self.A)
        dx, dy = x - self.c[0] - self.t[0], y - self.c[1] - self.t[1]
        return (ai[0, 0] * dx + ai[0, 1] * dy + self.c[0],
                ai[1, 0] * dx + ai[1, 1] * dy + self.c[1])


def _rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def draw_affine(rng: np.random.Generator, rng_spec: MotionRange, centre) -> Affine:
    """Random affine motion; draws with ``|det A| < 0.1`` are rejected and redrawn."""
    while True:
        theta = math.radians(rng.uniform(-rng_spec.rotation_deg, rng_spec.rotation_deg))
        sx = rng.uniform(*rng_spec.scale)
        sy = sx * rng.uniform(1.0 - rng_spec.shear, 1.0 + rng_spec.shear)
        k = rng.uniform(-rng_spec.shear, rng_spec.shear)
        A = _rotation(theta) @ np.array([[sx, k], [0.0, sy]])
        t = rng.uniform(-rng_spec.translation, rng_spec.translation, size=2)
        if abs(np.linalg.det(A)) >= 0.1:
            return Affine(A, np.asarray(centre, dtype=np.float64), t)


def _texture(rng, h, w, channels=3) -> np.ndarray:
    """Multi-octave smoothed noise with a random base colour, values in [0.05, 0.95]."""
    tex = np.zeros((h, w, channels))
    for sigma, amp in ((1.0, 0.6), (2.0, 1.0), (4.0, 1.4), (8.0, 1.8)):
        noise = rng.standard_normal((h, w, channels))
        mix = rng.uniform(0.5, 1.0, size=(channels, channels))
        noise = noise @ mix
        layer = np.stack([gaussian_filter(noise[..., c], sigma, mode="wrap") for c in range(channels)], axis=-1)
        tex += amp * layer / (layer.std() + 1e-12)
    tex = (tex - tex.min()) / (tex.max() - tex.min() + 1e-12)
    base = rng.uniform(0.2, 0.8, size=channels)
    contrast = rng.uniform(0.6, 0.9)
    tex = base + contrast * (tex - 0.5)
    return np.clip(tex, 0.05, 0.95)


def _random_polygon(rng, radius, n_vertices=None) -> np.ndarray:
    n = n_vertices or int(rng.integers(5, 9))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = radius * rng.uniform(0.6, 1.0, size=n)
    return np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)


def _inside_polygon(poly, x, y) -> np.ndarray:
    """Even-odd rule point-in-polygon test, vectorised over points."""
    inside = np.zeros(np.shape(x), dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside


@dataclass(frozen=True)
class _Layer:
    texture: np.ndarray
    origin: np.ndarray  # texture coordinate of the layer's local (0, 0)
    placement: np.ndarray  # image position of local (0, 0) in frame 1
    motion: Affine
    polygon: np.ndarray | None  # None for the background

    def local(self, x, y, frame):
        if frame == 2:
            x, y = self.motion.inverse(x, y)
        return x - self.placement[0], y - self.placement[1]

    def covers(self, x, y, frame):
        if self.polygon is None:
            return np.ones(np.shape(x), dtype=bool)
        lx, ly = self.local(x, y, frame)
        return _inside_polygon(self.polygon, lx, ly)

    def colour(self, x, y, frame):
        lx, ly = self.local(x, y, frame)
        return sample_bilinear(self.texture, lx + self.origin[0], ly + self.origin[1], mode="edge")


def _build_scene(spec: SceneSpec, rng: np.random.Generator) -> list[_Layer]:
    h, w = spec.height, spec.width
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    margin = int(math.ceil(spec.background_motion.translation + 0.25 * max(h, w))) + 4
    bg_tex = _texture(rng, h + 2 * margin, w + 2 * margin)
    bg_motion = draw_affine(rng, spec.background_motion, centre)
    layers = [_Layer(bg_tex, np.array([margin, margin], float), np.zeros(2), bg_motion, None)]
    for _ in range(spec.sprites):
        radius = rng.uniform(*spec.sprite_radius)
        poly = _random_polygon(rng, radius)
        size = int(math.ceil(2 * radius * 1.5)) + 4
        tex = _texture(rng, size, size)
        pos = np.array([rng.uniform(0, w - 1), rng.uniform(0, h - 1)])
        motion = draw_affine(rng, spec.sprite_motion, pos)
        layers.append(_Layer(tex, np.array([size / 2.0, size / 2.0]), pos, motion, poly))
    return layers


def _render(layers, x, y, frame):
    """Colour and index of the topmost layer at each point (sprites drawn in list order)."""
    owner = np.zeros(np.shape(x), dtype=np.int64)
    for idx, layer in enumerate(layers[1:], start=1):
        owner[layer.covers(x, y, frame)] = idx
    img = np.zeros(np.shape(x) + (3,))
    for idx, layer in enumerate(layers):
        sel = owner == idx
        if sel.any():
            img[sel] = layer.colour(x[sel], y[sel], frame)
    return img, owner


def generate_pair(spec: SceneSpec = SceneSpec(), seed: int = 0) -> SamplePair:
    rng = np.random.default_rng(seed)
    layers = _build_scene(spec, rng)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img1, owner1 = _render(layers, xx, yy, 1)
    img2, _ = _render(layers, xx, yy, 2)

    flow = np.zeros((h, w, 2))
    for idx, layer in enumerate(layers):
        sel = owner1 == idx
        if sel.any():
            tx, ty = layer.motion.apply(xx[sel], yy[sel])
            flow[sel, 0] = tx - xx[sel]
            flow[sel, 1] = ty - yy[sel]
    tx = xx + flow[..., 0]
    ty = yy + flow[..., 1]
    in_frame = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    _, owner2 = _render(layers, tx, ty, 2)
    noc = in_frame & (owner2 == owner1)
    return SamplePair(img1, img2, flow, noc)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.02
    contrast_range: tuple[float, float] = (0.8, 1.2)
    color_multiplier_range: tuple[float, float] = (0.9, 1.1)
    gamma_range: tuple[float, float] = (0.8, 1.25)
    brightness_delta_range: tuple[float, float] = (-0.1, 0.1)
    translation_range: float = 4.0
    allow_flip: bool = True
    rotation_range: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    relative_translation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("contrast_range", "color_multiplier_range", "gamma_range",
                     "brightness_delta_range", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not ordered: {lo} > {hi}")
        if self.gamma_range[0] <= 0:
            raise ValueError("gamma must be positive")
        if self.scale_range[0] <= 0:
            raise ValueError("scale must be positive")
        if min(self.noise_sigma, self.translation_range, self.rotation_range, self.relative_translation) < 0:
            raise ValueError("noise and motion ranges must be non-negative")

    @classmethod
    def identity(cls, **overrides) -> "AugmentConfig":
        base = cls(noise_sigma=0.0, contrast_range=(1.0, 1.0), color_multiplier_range=(1.0, 1.0),
                   gamma_range=(1.0, 1.0), brightness_delta_range=(0.0, 0.0), translation_range=0.0,
                   allow_flip=False, rotation_range=0.0, scale_range=(1.0, 1.0), relative_translation=0.0)
        return replace(base, **overrides)


@dataclass(frozen=True)
class PhotometricDraw:
    color: np.ndarray
    contrast: float
    gamma: float
    brightness: float
    noise_sigma: float


@dataclass(frozen=True)
class GeometricDraw:
    flip: bool = False
    angle_deg: float = 0.0
    scale: float = 1.0
    translation: tuple[float, float] = (0.0, 0.0)
    relative: tuple[float, float] = (0.0, 0.0)


def draw_photometric(cfg: AugmentConfig, rng: np.random.Generator, channels: int = 3) -> PhotometricDraw:
    return PhotometricDraw(
        color=rng.uniform(*cfg.color_multiplier_range, size=channels),
        contrast=float(rng.uniform(*cfg.contrast_range)),
        gamma=float(rng.uniform(*cfg.gamma_range)),
        brightness=float(rng.uniform(*cfg.brightness_delta_range)),
        noise_sigma=cfg.noise_sigma,
    )


def draw_geometric(cfg: AugmentConfig, rng: np.random.Generator) -> GeometricDraw:
    return GeometricDraw(
        flip=bool(cfg.allow_flip and rng.random() < 0.5),
        angle_deg=float(rng.uniform(-cfg.rotation_range, cfg.rotation_range)),
        scale=float(rng.uniform(*cfg.scale_range)),
        translation=tuple(rng.uniform(-cfg.translation_range, cfg.translation_range, size=2)),
        relative=tuple(rng.uniform(-cfg.relative_translation, cfg.relative_translation, size=2)),
    )


def photometric_augment(img, draw: PhotometricDraw, rng: np.random.Generator | None = None) -> np.ndarray:
    """Colour, contrast, gamma, brightness, then noise; result clamped to [0, 1].

    Apply the same ``draw`` to both frames of a pair; the noise comes from
    ``rng`` and so differs per call.
    """
    img = as_image(img)
    out = img
    # identity settings are skipped so an all-identity draw is exact
    color = draw.color[: img.shape[2]]
    if np.any(color != 1.0):
        out = out * color
    if draw.contrast != 1.0:
        out = (out - 0.5) * draw.contrast + 0.5
    if draw.gamma != 1.0:
        out = np.clip(out, 0.0, 1.0) ** draw.gamma
    if draw.brightness != 0.0:
        out = out + draw.brightness
    if draw.noise_sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise_sigma > 0")
        out = out + rng.normal(0.0, draw.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def _geometric_maps(draw: GeometricDraw, h: int, w: int):
    """Content map ``F(q) = s R Phi (q - c) + c + t`` as matrix, centre, translation."""
    phi = np.diag([-1.0, 1.0]) if draw.flip else np.eye(2)
    fwd = draw.scale * _rotation(math.radians(draw.angle_deg)) @ phi
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    return fwd, centre, np.asarray(draw.translation, dtype=np.float64)


def geometric_augment(pair, draw: GeometricDraw):
    """Apply one similarity transform to both frames (frame 2 additionally shifted by ``draw.relative``).

    Works on :class:`SamplePair` (ground truth transformed alongside) and on
    :class:`ImagePair`.
    """
    h, w = pair.img1.shape[:2]
    fwd, c, t = _geometric_maps(draw, h, w)
    inv = np.linalg.inv(fwd)
    d = np.asarray(draw.relative, dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    def source_coords(shift):
        px = xx - t[0] - shift[0] - c[0]
        py = yy - t[1] - shift[1] - c[1]
        return inv[0, 0] * px + inv[0, 1] * py + c[0], inv[1, 0] * px + inv[1, 1] * py + c[1]

    sx1, sy1 = source_coords((0.0, 0.0))
    sx2, sy2 = source_coords(d)
    img1 = sample_bilinear(as_image(pair.img1), sx1, sy1, mode="edge")
    img2 = sample_bilinear(as_image(pair.img2), sx2, sy2, mode="edge")
    if isinstance(pair, ImagePair):
        return ImagePair(img1, img2)

    src_flow = sample_bilinear(as_flow(pair.gt_flow), sx1, sy1, mode="edge")
    flow = src_flow @ fwd.T + d
    inside = (sx1 >= 0) & (sx1 <= w - 1) & (sy1 >= 0) & (sy1 <= h - 1)
    near_x = np.clip(np.rint(sx1), 0, w - 1).astype(np.int64)
    near_y = np.clip(np.rint(sy1), 0, h - 1).astype(np.int64)
    tx = xx + flow[..., 0]
    ty = yy + flow[..., 1]
    target_ok = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    mask = inside & pair.noc_mask[near_y, near_x] & target_ok
    return SamplePair(img1, img2, flow, mask)


def response_normalize(img, window: int = 9, kappa: float = 0.01) -> np.ndarray:
    """Divide each channel by its local ``window x window`` mean (window clipped at borders) plus ``kappa``."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd size, got {window}")
    img = as_image(img)
    ones = np.ones(img.shape[:2])
    count = uniform_filter(ones, size=window, mode="constant", cval=0.0)
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        mean = uniform_filter(img[..., ch], size=window, mode="constant", cval=0.0) / count
        out[..., ch] = img[..., ch] / (np.abs(mean) + kappa)
    return out


# ---------------------------------------------------------------------------
# training batches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingBatch:
    net_pairs: list[ImagePair]  # fully augmented, fed to the network
    loss_pairs: list[ImagePair]  # geometric augmentation only (+ response normalisation)
    indices: np.ndarray
    seed: int


def batch_seed(base_seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([base_seed, iteration]).generate_state(1)[0])


def training_batch(pairs: list[ImagePair], iteration: int, batch_size: int, cfg: AugmentConfig,
                   response_norm: bool = True) -> TrainingBatch:
    """Batch for one iteration, a pure function of ``(cfg.seed, iteration)``.

    The network sees photometrically and geometrically augmented images;
    the loss sees the same geometric draw without photometric changes.
    """
    if not pairs:
        raise ValueError("empty training set")
    if pairs and not isinstance(pairs[0], ImagePair):
        raise TypeError("training batches are built from ImagePair objects only")
    seed = batch_seed(cfg.seed, iteration)
    rng = np.random.default_rng(seed)
    indices = rng.integers(0, len(pairs), size=batch_size)
    net_pairs, loss_pairs = [], []
    for idx in indices:
        geo = geometric_augment(pairs[idx], draw_geometric(cfg, rng))
        photo = draw_photometric(cfg, rng, channels=geo.img1.shape[2])
        net_pairs.append(ImagePair(photometric_augment(geo.img1, photo, rng),
                                   photometric_augment(geo.img2, photo, rng)))
        if response_norm:
            geo = ImagePair(response_normalize(geo.img1), response_normalize(geo.img2))
        loss_pairs.append(geo)
    return TrainingBatch(net_pairs, loss_pairs, indices, seed)


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

def _sample_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, 1_000_003, index]).generate_state(1)[0])


def generate_dataset(out_dir, count: int, size=(64, 64), seed: int = 0, test_fraction: float = 0.125,
                     force: bool = False, spec: SceneSpec | None = None) -> dict:
    """Write ``count`` pairs plus ``manifest.json``; the last ``round(count * test_fraction)`` form the test split."""
    h, w = size
    spec = replace(spec or SceneSpec(), height=h, width=w)
    out_dir = os.fspath(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir):
        if not force:
            raise FileExistsError(f"output directory {out_dir} is not empty (use force to overwrite)")
        shutil.rmtree(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    n_test = int(round(count * test_fraction))
    names = []
    for i in range(count):
        pair = generate_pair(spec, _sample_seed(seed, i))
        name = f"{i:05d}"
        write_image(pair.img1, os.path.join(out_dir, f"{name}_img1.png"))
        write_image(pair.img2, os.path.join(out_dir, f"{name}_img2.png"))
        write_flo(pair.gt_flow, os.path.join(out_dir, f"{name}_flow.flo"))
        write_mask(pair.noc_mask, os.path.join(out_dir, f"{name}_mask.png"))
        names.append(name)
    manifest = {
        "format": "unsupflow-dataset",
        "version": 1,
        "size": [h, w],
        "seed": seed,
        "count": count,
        "splits": {"train": names[: count - n_test], "test": names[count - n_test:]},
    }
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(data_dir) -> dict:
    path = os.path.join(os.fspath(data_dir), MANIFEST)
    with open(path) as fh:
        return json.load(fh)


def load_training_pairs(data_dir, split: str = "train") -> list[ImagePair]:
    """Images only; flow files are never opened on this path."""
    manifest = read_manifest(data_dir)
    return [
        ImagePair(read_image(os.path.join(data_dir, f"{n}_img1.png")),
                  read_image(os.path.join(data_dir, f"{n}_img2.png")))
        for n in manifest["splits"][split]
    ]


def load_samples(data_dir, split: str = "test") -> list[SamplePair]:
    manifest = read_manifest(data_dir)
    out = []
    for n in manifest["splits"][split]:
        base = os.path.join(data_dir, n)
        out.append(SamplePair(read_image(f"{base}_img1.png"), read_image(f"{base}_img2.png"),
                              read_flo(f"{base}_flow.flo"), read_mask(f"{base}_mask.png")))
    return out
