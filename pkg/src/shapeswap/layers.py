"""Parameterized network building blocks (conv, linear, normalization).

Every block owns its parameter tensors and exposes them through
``named_params(prefix)`` so the model can assemble a flat, uniquely-named
parameter dictionary for optimization and checkpointing.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

IN_EPS = 1e-5  # additive epsilon inside the normalization square root


def he_normal(rng, shape, fan_in, dtype, gain=np.sqrt(2.0)):
    return (rng.standard_normal(shape) * (gain / np.sqrt(fan_in))).astype(dtype)


class Conv2d:
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0, dtype=np.float64):
        fan_in = in_ch * kernel * kernel
        self.w = ad.parameter(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype))
        self.b = ad.parameter(np.zeros(out_ch, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def named_params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Linear:
    def __init__(self, rng, in_dim, out_dim, dtype=np.float64):
        self.w = ad.parameter(he_normal(rng, (in_dim, out_dim), in_dim, dtype))
        self.b = ad.parameter(np.zeros(out_dim, dtype=dtype))

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b

    def named_params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def instance_norm(x, eps=IN_EPS):
    """Per-sample, per-channel spatial normalization (no learned affine)."""
    mu = ad.tmean(x, axis=(2, 3), keepdims=True)
    xc = x - mu
    var = ad.tmean(ad.square(xc), axis=(2, 3), keepdims=True)
    return xc / ad.sqrt(var + eps)


def adain(x, gamma, beta, eps=IN_EPS):
    """Renormalize each channel of each sample to the supplied statistics.

    gamma, beta: [N, C] tensors (or arrays); x: [N, C, H, W].  The channel is
    first standardized with its own spatial mean and population standard
    deviation, then scaled by gamma and shifted by beta.
    """
    x = ad.as_tensor(x)
    gamma = ad.as_tensor(gamma)
    beta = ad.as_tensor(beta)
    n, c = x.shape[0], x.shape[1]
    if gamma.shape != (n, c) or beta.shape != (n, c):
        raise ValueError(
            f"adain expects gamma/beta of shape {(n, c)}, got {gamma.shape} and {beta.shape}")
    g = ad.reshape(gamma, (n, c, 1, 1))
    b = ad.reshape(beta, (n, c, 1, 1))
    return g * instance_norm(x, eps) + b


class ConvBlock:
    """Conv followed by optional instance norm and an activation."""

    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0,
                 norm=False, activation="relu", dtype=np.float64):
        self.conv = Conv2d(rng, in_ch, out_ch, kernel, stride, padding, dtype)
        self.norm = norm
        self.activation = activation

    def __call__(self, x):
        h = self.conv(x)
        if self.norm:
            h = instance_norm(h)
        if self.activation == "relu":
            h = ad.relu(h)
        elif self.activation == "lrelu":
            h = ad.leaky_relu(h, 0.2)
        elif self.activation == "tanh":
            h = ad.tanh(h)
        elif self.activation is not None:
            raise ValueError(f"unknown activation {self.activation!r}")
        return h

    def named_params(self, prefix):
        return self.conv.named_params(f"{prefix}.conv")


class ResBlock:
    """Two 3x3 convs with instance norm; identity skip connection."""

    def __init__(self, rng, ch, dtype=np.float64):
        self.conv1 = Conv2d(rng, ch, ch, 3, 1, 1, dtype)
        self.conv2 = Conv2d(rng, ch, ch, 3, 1, 1, dtype)

    def __call__(self, x):
        h = ad.relu(instance_norm(self.conv1(x)))
        h = instance_norm(self.conv2(h))
        return x + h

    def named_params(self, prefix):
        return {**self.conv1.named_params(f"{prefix}.conv1"),
                **self.conv2.named_params(f"{prefix}.conv2")}


class AdainResBlock:
    """Residual block whose normalizations take externally supplied stats."""

    def __init__(self, rng, ch, dtype=np.float64):
        self.ch = ch
        self.conv1 = Conv2d(rng, ch, ch, 3, 1, 1, dtype)
        self.conv2 = Conv2d(rng, ch, ch, 3, 1, 1, dtype)

    def __call__(self, x, params1, params2):
        h = ad.relu(adain(self.conv1(x), *params1))
        h = adain(self.conv2(h), *params2)
        return x + h

    def named_params(self, prefix):
        return {**self.conv1.named_params(f"{prefix}.conv1"),
                **self.conv2.named_params(f"{prefix}.conv2")}
