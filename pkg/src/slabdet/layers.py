"""Parameterized building blocks on top of the autodiff tensor.

Each block exposes ``params()`` returning a flat name -> Tensor mapping;
containers prefix child names with dots, so a whole model flattens into
one namespace suitable for the optimizer and for checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class ModelError(ValueError):
    pass


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    lim = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-lim, lim, size=shape)


class Linear:
    """Affine map on the last axis: x @ w + b, w of shape (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = ad.parameter(_uniform_init(rng, d_in, (d_in, d_out)))
        self.b = ad.parameter(np.zeros(d_out))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return x @ self.w + self.b

    def params(self):
        return {"w": self.w, "b": self.b}


class Conv2d:
    """2D convolution on (H, W, C) maps with (kh, kw, Cin, Cout) weights."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0):
        fan_in = kernel * kernel * c_in
        self.w = ad.parameter(_uniform_init(rng, fan_in, (kernel, kernel, c_in, c_out)))
        self.b = ad.parameter(np.zeros(c_out))
        self.kernel = kernel
        self.stride = stride
        self.pad = pad

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if self.kernel == 1 and self.stride == 1 and self.pad == 0:
            # 1x1 convolution is a per-pixel affine map
            h, w, c_in = x.shape
            flat = x.reshape(h * w, c_in) @ self.w.reshape(c_in, self.w.shape[3])
            return flat.reshape(h, w, self.w.shape[3]) + self.b
        return ad.conv2d(x, self.w, stride=self.stride, pad=self.pad) + self.b

    def params(self):
        return {"w": self.w, "b": self.b}


class LayerNorm:
    """Normalization over the last axis with learned scale and shift."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = ad.parameter(np.ones(dim))
        self.beta = ad.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / ad.sqrt(var + self.eps) * self.gamma + self.beta

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


class Mlp:
    """Two-layer feed-forward block with ReLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return self.fc2(ad.relu(self.fc1(x)))

    def params(self):
        out = {}
        for name, child in (("fc1", self.fc1), ("fc2", self.fc2)):
            for key, p in child.params().items():
                out[f"{name}.{key}"] = p
        return out


class MultiHeadSelfAttention:
    """Dense softmax self-attention over a (N, d) sequence."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ModelError(f"d_model {d_model} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)

    def __call__(self, x: ad.Tensor, pos: ad.Tensor | None = None) -> ad.Tensor:
        n, d = x.shape
        with_pos = x if pos is None else x + pos
        q = self.q_proj(with_pos).reshape(n, self.n_heads, self.d_head).transpose(1, 0, 2)
        k = self.k_proj(with_pos).reshape(n, self.n_heads, self.d_head).transpose(1, 0, 2)
        v = self.v_proj(x).reshape(n, self.n_heads, self.d_head).transpose(1, 0, 2)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(self.d_head))
        attn = ad.softmax(scores, axis=-1)
        mixed = (attn @ v).transpose(1, 0, 2).reshape(n, d)
        return self.out_proj(mixed)

    def params(self):
        out = {}
        for name, child in (("q_proj", self.q_proj), ("k_proj", self.k_proj),
                            ("v_proj", self.v_proj), ("out_proj", self.out_proj)):
            for key, p in child.params().items():
                out[f"{name}.{key}"] = p
        return out


def collect_params(children: dict) -> dict:
    """Flatten {child_name: block} into {child_name.param_name: Tensor}."""
    out = {}
    for name, child in children.items():
        for key, p in child.params().items():
            out[f"{name}.{key}"] = p
    return out
