"""MiniFlowNet: a small FlowNet-Simple style encoder/decoder with manual backprop.

Tensors are ``(N, C, H, W)``. All parameters live in one flat vector
(``net.params``) with per-layer views, which keeps the optimiser, the
checkpoint format and gradient checks trivial.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .grid import bilinear_upsample2, bilinear_upsample2_adjoint

LEAK = 0.1


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvLayerSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    transposed: bool = False
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.kernel not in (3, 5, 7):
            raise ValueError(f"{self.name}: kernel must be 3, 5 or 7")
        if self.stride not in (1, 2):
            raise ValueError(f"{self.name}: stride must be 1 or 2")
        if self.transposed and self.stride != 2:
            raise ValueError(f"{self.name}: transposed layers upsample by 2")
        if self.activation not in ("leaky_relu", "none"):
            raise ValueError(f"{self.name}: unknown activation {self.activation!r}")

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        if self.transposed:
            return (self.in_channels, self.out_channels, self.kernel, self.kernel)
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


def leaky_relu_fwd(x, slope: float = LEAK):
    return np.where(x >= 0, x, slope * x)


def leaky_relu_bwd(x, upstream, slope: float = LEAK):
    """Gradient gate; the ``x >= 0`` branch (slope 1) is used at exactly 0."""
    return np.where(x >= 0, upstream, slope * upstream)


def conv_forward(x, spec: ConvLayerSpec, weights, bias):
    """Cross-correlation with zero padding (or its stride-2 transpose).

    Returns ``(y, cache)``; ``y`` is pre-activation.
    """
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"{spec.name}: expected {spec.in_channels} input channels, got {c}")
    k, p = spec.kernel, spec.pad
    if spec.transposed:
        xm = x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
        cols = weights.reshape(c, -1).T @ xm
        y = kernels.col2im(cols, (n, spec.out_channels, 2 * h, 2 * w), k, 2, p)
        y += bias[None, :, None, None]
        return y, (x.shape, xm)
    cols = kernels.im2col(x, k, spec.stride, p)
    ho = (h + 2 * p - k) // spec.stride + 1
    wo = (w + 2 * p - k) // spec.stride + 1
    y = (weights.reshape(spec.out_channels, -1) @ cols).reshape(spec.out_channels, n, ho, wo)
    y = y.transpose(1, 0, 2, 3) + bias[None, :, None, None]
    return np.ascontiguousarray(y), (x.shape, cols)


def conv_backward(cache, spec: ConvLayerSpec, weights, upstream):
    """Gradients ``(grad_x, grad_w, grad_b)`` of ``sum(upstream * y)``."""
    x_shape, saved = cache
    n, c, h, w = x_shape
    k, p = spec.kernel, spec.pad
    grad_b = upstream.sum(axis=(0, 2, 3))
    if spec.transposed:
        if upstream.shape != (n, spec.out_channels, 2 * h, 2 * w):
            raise ValueError(f"{spec.name}: upstream shape {upstream.shape} does not match forward")
        ucols = kernels.im2col(upstream, k, 2, p)
        wm = weights.reshape(c, -1)
        grad_x = (wm @ ucols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        grad_w = (saved @ ucols.T).reshape(weights.shape)
        return np.ascontiguousarray(grad_x), grad_w, grad_b
    o = spec.out_channels
    um = upstream.transpose(1, 0, 2, 3).reshape(o, -1)
    if um.shape[1] != saved.shape[1]:
        raise ValueError(f"{spec.name}: upstream shape {upstream.shape} does not match forward")
    grad_w = (um @ saved.T).reshape(weights.shape)
    grad_cols = weights.reshape(o, -1).T @ um
    grad_x = kernels.col2im(grad_cols, x_shape, k, spec.stride, p)
    return grad_x, grad_w, grad_b


def upsample_flow_t(f):
    """Bilinear x2 upsampling of ``(N, 2, h, w)`` flow with values doubled."""
    return 2.0 * bilinear_upsample2(f, axes=(2, 3))


def upsample_flow_t_adjoint(g):
    return 2.0 * bilinear_upsample2_adjoint(g, axes=(2, 3))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MiniFlowNetSpec:
    channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    kernels: tuple[int, int, int, int] = (5, 5, 3, 3)
    input_channels: int = 6
    head_kernel: int = 3
    prediction_levels: int = 3

    def __post_init__(self):
        if len(self.channels) != 4 or len(self.kernels) != 4:
            raise ValueError("MiniFlowNet has exactly four contractive stages")
        if self.prediction_levels != 3:
            raise ValueError("MiniFlowNet predicts at exactly three levels (1/8, 1/4, 1/2)")

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    def layers(self) -> list[ConvLayerSpec]:
        c1, c2, c3, c4 = self.channels
        k1, k2, k3, k4 = self.kernels
        hk = self.head_kernel
        return [
            ConvLayerSpec("conv1", self.input_channels, c1, k1, 2),
            ConvLayerSpec("conv2", c1, c2, k2, 2),
            ConvLayerSpec("conv3", c2, c3, k3, 2),
            ConvLayerSpec("conv4", c3, c4, k4, 2),
            ConvLayerSpec("deconv3", c4, c3, 3, 2, transposed=True),
            ConvLayerSpec("flow3", 2 * c3, 2, hk, 1, activation="none"),
            ConvLayerSpec("deconv2", 2 * c3, c2, 3, 2, transposed=True),
            ConvLayerSpec("flow2", 2 * c2 + 2, 2, hk, 1, activation="none"),
            ConvLayerSpec("deconv1", 2 * c2 + 2, c1, 3, 2, transposed=True),
            ConvLayerSpec("flow1", 2 * c1 + 2, 2, hk, 1, activation="none"),
        ]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MiniFlowNetSpec":
        raw = json.loads(text)
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


class StaleActivationError(RuntimeError):
    pass


@dataclass
class _Slot:
    spec: ConvLayerSpec
    w_slice: slice
    b_slice: slice


class MiniFlowNet:
    """Contractive stack of four stride-2 convolutions, expanding stack of three upconvolutions.

    Each expanding stage concatenates the matching encoder features, the
    upconvolved decoder features and (below the coarsest level) the
    upsampled coarser flow, and predicts a residual on that upsampled flow.
    """

    def __init__(self, spec: MiniFlowNetSpec = MiniFlowNetSpec(), seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.slots: dict[str, _Slot] = {}
        offset = 0
        for ls in spec.layers():
            nw = int(np.prod(ls.weight_shape))
            self.slots[ls.name] = _Slot(ls, slice(offset, offset + nw), slice(offset + nw, offset + nw + ls.out_channels))
            offset += nw + ls.out_channels
        self.n_params = offset
        self.params = np.zeros(offset, dtype=self.dtype)
        self._cache = None
        self.init_params(seed)

    # -- parameters -------------------------------------------------------

    def init_params(self, seed: int) -> None:
        """Seeded fan-in (Kaiming) init; flow heads start small with zero bias."""
        rng = np.random.default_rng(seed)
        gain = np.sqrt(2.0 / (1.0 + LEAK ** 2))
        for name, slot in self.slots.items():
            ls = slot.spec
            fan_in = ls.in_channels * ls.kernel ** 2
            if ls.transposed:
                fan_in //= 4  # each output sees about a quarter of the taps
            std = gain / np.sqrt(fan_in)
            if name.startswith("flow"):
                std *= 0.1
            self.params[slot.w_slice] = rng.normal(0.0, std, size=slot.w_slice.stop - slot.w_slice.start)
            self.params[slot.b_slice] = 0.0

    def weight(self, name, params=None):
        slot = self.slots[name]
        p = self.params if params is None else params
        return p[slot.w_slice].reshape(slot.spec.weight_shape)

    def bias(self, name, params=None):
        slot = self.slots[name]
        p = self.params if params is None else params
        return p[slot.b_slice]

    def astype(self, dtype) -> "MiniFlowNet":
        clone = MiniFlowNet.__new__(MiniFlowNet)
        clone.spec = self.spec
        clone.dtype = np.dtype(dtype)
        clone.slots = self.slots
        clone.n_params = self.n_params
        clone.params = self.params.astype(dtype)
        clone._cache = None
        return clone

    # -- forward / backward ------------------------------------------------

    def _layer(self, name, x, cache):
        slot = self.slots[name]
        y, c = conv_forward(x, slot.spec, self.weight(name), self.bias(name))
        cache[name] = (c, y if slot.spec.activation == "leaky_relu" else None)
        if slot.spec.activation == "leaky_relu":
            y = leaky_relu_fwd(y)
        return y

    def _layer_bwd(self, name, g, cache, grads):
        slot = self.slots[name]
        c, pre = cache[name]
        if pre is not None:
            g = leaky_relu_bwd(pre, g)
        gx, gw, gb = conv_backward(c, slot.spec, self.weight(name), g)
        grads[slot.w_slice] += gw.ravel()
        grads[slot.b_slice] += gb
        return gx

    def prepare_input(self, img1, img2):
        """Stack two ``(H, W, 3)`` images (or batches ``(N, H, W, 3)``) into a centred ``(N, 6, H, W)`` tensor."""
        a = np.asarray(img1, dtype=self.dtype)
        b = np.asarray(img2, dtype=self.dtype)
        if a.ndim == 3:
            a, b = a[None], b[None]
        x = np.concatenate([a, b], axis=3).transpose(0, 3, 1, 2) - self.dtype.type(0.5)
        return np.ascontiguousarray(x)

    def forward(self, x):
        """Predict flows for a ``(N, 6, H, W)`` input.

        Returns three ``(N, 2, h, w)`` arrays at 1/8, 1/4 and 1/2 resolution,
        coarsest first, each in its own level's pixel units. Activations
        are kept for one :meth:`backward` call.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise ValueError(f"expected (N, {self.spec.input_channels}, H, W) input, got {x.shape}")
        h, w = x.shape[2:]
        if h % self.spec.stride or w % self.spec.stride:
            raise ValueError(f"input size {h}x{w} must be divisible by {self.spec.stride}")
        cache: dict = {}
        c1 = self._layer("conv1", x, cache)
        c2 = self._layer("conv2", c1, cache)
        c3 = self._layer("conv3", c2, cache)
        c4 = self._layer("conv4", c3, cache)
        d3 = self._layer("deconv3", c4, cache)
        cat3 = np.concatenate([c3, d3], axis=1)
        f3 = self._layer("flow3", cat3, cache)
        up3 = upsample_flow_t(f3)
        d2 = self._layer("deconv2", cat3, cache)
        cat2 = np.concatenate([c2, d2, up3], axis=1)
        f2 = up3 + self._layer("flow2", cat2, cache)
        up2 = upsample_flow_t(f2)
        d1 = self._layer("deconv1", cat2, cache)
        cat1 = np.concatenate([c1, d1, up2], axis=1)
        f1 = up2 + self._layer("flow1", cat1, cache)
        cache["splits"] = (c1.shape[1], c2.shape[1], c3.shape[1])
        self._cache = cache
        return [f3, f2, f1]

    def backward(self, grads_by_level):
        """Parameter gradient (flat, like ``params``) from per-level flow gradients.

        ``grads_by_level`` matches :meth:`forward`'s output. Consumes the
        cached activations.
        """
        cache = self._cache
        if cache is None:
            raise StaleActivationError("backward() needs a fresh forward() pass")
        self._cache = None
        g3, g2, g1 = (np.asarray(g, dtype=self.dtype) for g in grads_by_level)
        n1, n2, n3 = cache["splits"]
        grads = np.zeros(self.n_params, dtype=self.dtype)

        g2 = g2 + upsample_flow_t_adjoint(g1)
        g_cat1 = self._layer_bwd("flow1", g1, cache, grads)
        g_c1 = g_cat1[:, :n1]
        g2 = g2 + upsample_flow_t_adjoint(g_cat1[:, 2 * n1:])
        g_cat2 = self._layer_bwd("deconv1", g_cat1[:, n1:2 * n1], cache, grads)

        g3 = g3 + upsample_flow_t_adjoint(g2)
        g_cat2 = g_cat2 + self._layer_bwd("flow2", g2, cache, grads)
        g_c2 = g_cat2[:, :n2]
        g3 = g3 + upsample_flow_t_adjoint(g_cat2[:, 2 * n2:])
        g_cat3 = self._layer_bwd("deconv2", g_cat2[:, n2:2 * n2], cache, grads)

        g_cat3 = g_cat3 + self._layer_bwd("flow3", g3, cache, grads)
        g_c3 = g_cat3[:, :n3]
        g_c4 = self._layer_bwd("deconv3", g_cat3[:, n3:], cache, grads)

        g_c3 = g_c3 + self._layer_bwd("conv4", g_c4, cache, grads)
        g_c2 = g_c2 + self._layer_bwd("conv3", g_c3, cache, grads)
        g_c1 = g_c1 + self._layer_bwd("conv2", g_c2, cache, grads)
        self._layer_bwd("conv1", g_c1, cache, grads)
        return grads

    def predict(self, img1, img2) -> np.ndarray:
        """Full-resolution ``(H, W, 2)`` flow for a single pair (finest level upsampled x2)."""
        finest = self.forward(self.prepare_input(img1, img2))[-1]
        self._cache = None
        return upsample_flow_t(finest.astype(np.float64))[0].transpose(1, 2, 0)


def to_flow_fields(level_tensor) -> list[np.ndarray]:
    """``(N, 2, h, w)`` -> list of ``(h, w, 2)`` float64 flow fields."""
    return [np.asarray(t, dtype=np.float64).transpose(1, 2, 0) for t in level_tensor]


def from_flow_fields(fields, dtype=np.float32) -> np.ndarray:
    return np.stack([np.asarray(f).transpose(2, 0, 1) for f in fields]).astype(dtype)
