"""Layers built from tensor primitives. Parameters are plain ``Tensor`` leaves."""
from __future__ import annotations

import numpy as np

from . import settings
from .tensor import Tensor, apply


def glorot(rng, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def own_parameters(self) -> dict[str, Tensor]:
        return {}

    def children(self) -> dict[str, "Module"]:
        return {}

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}{k}": v for k, v in self.own_parameters().items()}
        for name, child in self.children().items():
            out.update(child.parameters(f"{prefix}{name}."))
        return out


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng):
        self.weight = glorot(rng, (n_in, n_out), n_in, n_out)
        self.bias = zeros((n_out,))

    def own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return apply("bias_add", apply("matmul", x, self.weight), self.bias, axis=-1)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng, stride: int = 1, padding: int = 0):
        self.stride, self.padding = stride, padding
        self.weight = glorot(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
        self.bias = zeros((c_out,))

    def own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        y = apply("conv2d", x, self.weight, stride=self.stride, padding=self.padding)
        return apply("bias_add", y, self.bias, axis=1)


class ConvTranspose2d(Conv2d):
    def __init__(self, c_in: int, c_out: int, k: int, rng, stride: int = 1, padding: int = 0):
        self.stride, self.padding = stride, padding
        self.weight = glorot(rng, (c_in, c_out, k, k), c_in * k * k, c_out * k * k)
        self.bias = zeros((c_out,))

    def forward(self, x):
        y = apply("conv_transpose2d", x, self.weight, stride=self.stride, padding=self.padding)
        return apply("bias_add", y, self.bias, axis=1)


class ReLU(Module):
    def forward(self, x):
        return apply("relu", x)


class LeakyReLU(Module):
    def __init__(self, slope: float = settings.LEAKY_SLOPE):
        self.slope = slope

    def forward(self, x):
        return apply("leaky_relu", x, slope=self.slope)


class Reshape(Module):
    """Keeps the batch axis, reshapes the rest."""

    def __init__(self, *shape):
        self.shape = shape

    def forward(self, x):
        return apply("reshape", x, shape=(x.shape[0], *self.shape))


def Flatten():
    return Reshape(-1)


class SpatialBroadcast(Module):
    """Tile a latent vector over an (H+pad)x(W+pad) grid and append x/y coordinate channels."""

    def __init__(self, height: int, width: int, pad: int = 9):
        self.h, self.w = height + pad, width + pad
        ys, xs = np.meshgrid(np.linspace(-1, 1, self.h), np.linspace(-1, 1, self.w), indexing="ij")
        self.coords = np.stack([xs, ys])[None]

    def forward(self, z):
        n, d = z.shape
        tiled = apply("mul", apply("reshape", z, shape=(n, d, 1, 1)), np.ones((1, 1, self.h, self.w)))
        coords = Tensor(np.broadcast_to(self.coords, (n, 2, self.h, self.w)))
        return apply("concat", tiled, coords, axis=1)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def children(self):
        return {str(i): layer for i, layer in enumerate(self.layers)}

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
