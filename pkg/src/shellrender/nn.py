"""Trainable building blocks: linear layers, MLPs, convolutions, attention, Adam."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def he_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, bound, size=shape)


class Module:
    """Minimal container with named-parameter traversal."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                for sub, t in value.parameters().items():
                    out[f"{name}.{sub}"] = t
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, t in item.parameters().items():
                            out[f"{name}.{i}.{sub}"] = t
        return out

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, t in self.parameters().items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing parameter {key} in checkpoint")
            if tuple(state[key].shape) != t.data.shape:
                raise ValueError(f"{key}: shape {state[key].shape} != {t.data.shape}")
            t.data = np.asarray(state[key], dtype=t.data.dtype).copy()


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, zero_init: bool = False):
        w = np.zeros((n_in, n_out)) if zero_init else he_init(rng, n_in, (n_in, n_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return ad.affine(x, self.w, self.b)


class MLP(Module):
    """Stack of linear layers with relu between; the final layer is linear."""

    def __init__(self, rng, dims, zero_init_last: bool = False):
        self.layers = [
            Linear(rng, dims[i], dims[i + 1], zero_init=zero_init_last and i == len(dims) - 2)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = ad.relu(layer(x))
        return self.layers[-1](x)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 padding: int | None = None, zero_init: bool = False):
        shape = (c_out, c_in, k, k)
        w = np.zeros(shape) if zero_init else he_init(rng, c_in * k * k, shape)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """3x3 stride-2 transposed convolution doubling the spatial extents."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.w = Tensor(he_init(rng, c_in * 9, (c_in, c_out, 3, 3)), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.w, self.b, stride=2, padding=1, output_padding=1)


class Attention(Module):
    """Single-head dot-product attention pooling a per-view axis.

    Query comes from per-point features (N, Dq); keys/values from per-view
    features (N, V, Dk) / (N, V, Dv).  The softmax runs over the view axis, so
    the output is invariant to view order.
    """

    def __init__(self, rng, q_in: int, k_in: int, v_in: int, out_dim: int, dim: int = 32):
        self.q = Linear(rng, q_in, dim)
        self.k = Linear(rng, k_in, dim)
        self.v = Linear(rng, v_in, dim)
        self.out = Linear(rng, dim, out_dim)
        self.dim = dim

    def __call__(self, q_feat, k_feat, v_feat):
        n, n_views, dk = k_feat.shape
        q = self.q(q_feat)  # (N, dim)
        k = ad.reshape(self.k(ad.reshape(k_feat, (n * n_views, dk))), (n, n_views, self.dim))
        v = ad.reshape(self.v(ad.reshape(v_feat, (n * n_views, v_feat.shape[2]))), (n, n_views, self.dim))
        logits = ad.tensor_sum(ad.mul(ad.expand(q, 1, n_views), k), axis=2)  # (N, V)
        att = ad.softmax(ad.mul(logits, 1.0 / np.sqrt(self.dim)), axis=1)
        pooled = ad.tensor_sum(ad.mul(ad.expand(att, 2, self.dim), v), axis=1)  # (N, dim)
        return self.out(pooled)


class Adam:
    """Classic Adam over a named-parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        lr_t = self.lr * np.sqrt(1 - self.b2 ** self.t) / (1 - self.b1 ** self.t)
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            p.data -= lr_t * m / (np.sqrt(v) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
