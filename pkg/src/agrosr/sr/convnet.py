"""A small conv/deconv network with hand-written backpropagation.

Layers are either ``conv`` (stride 1, odd kernel, zero "same" padding) or
``deconv`` (stride-2 transposed convolution, even kernel, output exactly
twice the input size). Each layer may apply a ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidArchitectureError

MAX_LAYERS = 10
MAX_PARAMS_PER_LAYER = 300_000


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "deconv"
    out_channels: int
    kernel: int = 3
    activation: str = "relu"  # "relu" | "linear"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "out_channels": self.out_channels, "kernel": self.kernel,
                "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def layer_param_count(spec: LayerSpec, in_channels: int) -> int:
    return in_channels * spec.out_channels * spec.kernel * spec.kernel + spec.out_channels


def validate_arch(arch: list[LayerSpec], in_channels: int, out_channels: int, scale_factor: int) -> None:
    if not arch:
        raise InvalidArchitectureError("architecture needs at least one layer")
    if len(arch) > MAX_LAYERS:
        raise InvalidArchitectureError(f"{len(arch)} layers exceeds the limit of {MAX_LAYERS}")
    c = in_channels
    upscale = 1
    for i, layer in enumerate(arch):
        if layer.kind not in ("conv", "deconv"):
            raise InvalidArchitectureError(f"layer {i}: unknown kind {layer.kind!r}")
        if layer.activation not in ("relu", "linear"):
            raise InvalidArchitectureError(f"layer {i}: unknown activation {layer.activation!r}")
        if layer.out_channels < 1 or layer.kernel < 1:
            raise InvalidArchitectureError(f"layer {i}: channels and kernel must be positive")
        if layer.kind == "conv" and layer.kernel % 2 == 0:
            raise InvalidArchitectureError(f"layer {i}: conv kernels must be odd")
        if layer.kind == "deconv":
            if layer.kernel % 2 == 1:
                raise InvalidArchitectureError(f"layer {i}: deconv kernels must be even")
            upscale *= 2
        n = layer_param_count(layer, c)
        if n > MAX_PARAMS_PER_LAYER:
            raise InvalidArchitectureError(f"layer {i}: {n} parameters exceeds {MAX_PARAMS_PER_LAYER}")
        c = layer.out_channels
    if c != out_channels:
        raise InvalidArchitectureError(f"last layer emits {c} channels, task needs {out_channels}")
    if upscale != scale_factor:
        raise InvalidArchitectureError(f"deconv strides multiply to {upscale}, task scale factor is {scale_factor}")


def default_arch(in_channels: int, out_channels: int, scale_factor: int, width: int = 8) -> list[LayerSpec]:
    n_up = int(np.log2(scale_factor))
    layers = [LayerSpec("conv", width, 3, "relu")]
    layers += [LayerSpec("deconv", width, 2, "relu") for _ in range(n_up)]
    if n_up == 0:
        layers.append(LayerSpec("conv", width, 3, "relu"))
    layers.append(LayerSpec("conv", out_channels, 3, "linear"))
    return layers


# --------------------------------------------------------------------------
# layer primitives
# --------------------------------------------------------------------------


def _conv_forward(x, w, b):
    k = w.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # (n, c, h, w, k, k)
    out = np.einsum("nchwuv,ocuv->nohw", cols, w, optimize=True) + b[None, :, None, None]
    return out, xp


def _conv_backward(dout, xp, w):
    k = w.shape[2]
    p = k // 2
    n, c, hp, wp = xp.shape
    h, wd = hp - 2 * p, wp - 2 * p
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.einsum("nchwuv,nohw->ocuv", cols, dout, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u: u + h, v: v + wd] += np.einsum("nohw,oc->nchw", dout, w[:, :, u, v], optimize=True)
    return dxp[:, :, p: p + h, p: p + wd], dw, db


def _deconv_forward(x, w, b):
    n, c, h, wd = x.shape
    k = w.shape[2]
    p = (k - 2) // 2
    o = w.shape[1]
    full = np.zeros((n, o, 2 * h + k - 2, 2 * wd + k - 2))
    for u in range(k):
        for v in range(k):
            full[:, :, u: u + 2 * h: 2, v: v + 2 * wd: 2] += np.einsum("nchw,co->nohw", x, w[:, :, u, v], optimize=True)
    return full[:, :, p: p + 2 * h, p: p + 2 * wd] + b[None, :, None, None]


def _deconv_backward(dout, x, w):
    n, c, h, wd = x.shape
    k = w.shape[2]
    p = (k - 2) // 2
    dfull = np.zeros((n, w.shape[1], 2 * h + k - 2, 2 * wd + k - 2))
    dfull[:, :, p: p + 2 * h, p: p + 2 * wd] = dout
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for u in range(k):
        for v in range(k):
            sl = dfull[:, :, u: u + 2 * h: 2, v: v + 2 * wd: 2]
            dx += np.einsum("nohw,co->nchw", sl, w[:, :, u, v], optimize=True)
            dw[:, :, u, v] = np.einsum("nchw,nohw->co", x, sl, optimize=True)
    return dx, dw, dout.sum(axis=(0, 2, 3))


class ConvNet:
    def __init__(self, arch: list[LayerSpec], in_channels: int, rng: np.random.Generator | None = None):
        self.arch = list(arch)
        self.in_channels = in_channels
        self.params: list[tuple[np.ndarray, np.ndarray]] = []
        rng = rng or np.random.default_rng(0)
        c = in_channels
        for layer in self.arch:
            k = layer.kernel
            fan_in = c * k * k if layer.kind == "conv" else c * (k // 2) ** 2
            gain = 2.0 if layer.activation == "relu" else 1.0
            std = np.sqrt(gain / fan_in)
            shape = (layer.out_channels, c, k, k) if layer.kind == "conv" else (c, layer.out_channels, k, k)
            self.params.append((rng.normal(0.0, std, size=shape), np.zeros(layer.out_channels)))
            c = layer.out_channels

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.params)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        new = []
        for w, b in self.params:
            nw = flat[i: i + w.size].reshape(w.shape)
            i += w.size
            nb = flat[i: i + b.size].copy()
            i += b.size
            new.append((nw.copy(), nb))
        self.params = new

    def forward(self, x: np.ndarray, cache: bool = False):
        caches = []
        for layer, (w, b) in zip(self.arch, self.params):
            if layer.kind == "conv":
                z, xp = _conv_forward(x, w, b)
                saved = xp
            else:
                z = _deconv_forward(x, w, b)
                saved = x
            out = np.maximum(z, 0.0) if layer.activation == "relu" else z
            if cache:
                caches.append((saved, z))
            x = out
        return (x, caches) if cache else x

    def backward(self, dout: np.ndarray, caches) -> list[tuple[np.ndarray, np.ndarray]]:
        grads = [None] * len(self.arch)
        for i in range(len(self.arch) - 1, -1, -1):
            layer = self.arch[i]
            w, _ = self.params[i]
            saved, z = caches[i]
            if layer.activation == "relu":
                dout = dout * (z > 0)
            if layer.kind == "conv":
                dout, dw, db = _conv_backward(dout, saved, w)
            else:
                dout, dw, db = _deconv_backward(dout, saved, w)
            grads[i] = (dw, db)
        return grads

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean squared error over all output elements and its flat gradient."""
        pred, caches = self.forward(x, cache=True)
        diff = pred - y
        loss = float(np.mean(diff * diff))
        grads = self.backward(2.0 * diff / diff.size, caches)
        flat = np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])
        return loss, flat
