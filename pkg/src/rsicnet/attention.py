"""Attention layers over ``[..., H, W, C]`` feature maps.

All layers preserve the input shape. SE, CA, SA and CBAM multiply the input by
a sigmoid gate; the tri-axis layer multiplies it by raw multi-head
self-attention scores computed on three pooled 2-D views of the map and
averages the three products.
"""
from __future__ import annotations

import math
from enum import Enum

import numpy as np

from . import tensor as T
from .layers import Module, glorot_uniform, zeros
from .tensor import ShapeError, Tensor


class AttentionKind(str, Enum):
    SE = "SE"
    CA = "CA"
    SA = "SA"
    CBAM = "CBAM"
    TRIAXIS = "TRIAXIS"


def _check_rank3(x: Tensor):
    if x.ndim < 3:
        raise ShapeError(f"attention expects [..., H, W, C] input, got {x.shape}")


def _check_channels(x: Tensor, c: int):
    _check_rank3(x)
    if x.shape[-1] != c:
        raise ShapeError(f"layer built for {c} channels, input has shape {x.shape}")


def mlp(v: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return T.matmul(T.relu(T.matmul(v, w1) + b1), w2) + b2


def se_layer(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    _check_channels(x, w1.shape[0])
    gap = T.mean(x, (-3, -2), keepdims=True)
    return x * T.sigmoid(mlp(gap, w1, b1, w2, b2))


def ca_layer(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    # one MLP, shared by both pooled descriptors
    _check_channels(x, w1.shape[0])
    gap = T.mean(x, (-3, -2), keepdims=True)
    gmp = T.max(x, (-3, -2), keepdims=True)
    return x * T.sigmoid(mlp(gap, w1, b1, w2, b2) + mlp(gmp, w1, b1, w2, b2))


def sa_layer(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    _check_rank3(x)
    if x.ndim > 4:
        raise ShapeError(f"spatial attention supports at most one batch axis, got {x.shape}")
    pooled = T.concat([T.mean(x, -1, keepdims=True), T.max(x, -1, keepdims=True)], axis=-1)
    return x * T.sigmoid(T.conv2d(pooled, w, b, stride=1, padding="same"))


def msa_scores(m: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Sum over heads of ``softmax(Q K^T / sqrt(d_k)) V`` for tokens ``m[..., T, d]``.

    Weights are stacked per head: ``wq, wk: [N, d, d_k]``, ``wv: [N, d, d]``.
    """
    if m.ndim < 2:
        raise ShapeError(f"msa expects [..., T, d] tokens, got {m.shape}")
    d = m.shape[-1]
    if wq.shape[1] != d or wk.shape[1] != d or wv.shape[1] != d:
        raise ShapeError(f"token width {d} does not match weights {wq.shape}, {wk.shape}, {wv.shape}")
    key_dim = wq.shape[-1]
    m4 = T.reshape(m, m.shape[:-2] + (1,) + m.shape[-2:])
    q = T.matmul(m4, wq)
    k = T.matmul(m4, wk)
    v = T.matmul(m4, wv)
    att = T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(key_dim)), axis=-1)
    return T.sum(T.matmul(att, v), -3)


def _pool2(x: Tensor, axis: int) -> Tensor:
    return (T.mean(x, axis) + T.max(x, axis)) * 0.5


def triaxis_attention(x: Tensor, hw: tuple, hc: tuple, wc: tuple) -> Tensor:
    """Each of ``hw``, ``hc``, ``wc`` is a ``(wq, wk, wv)`` triple."""
    _check_rank3(x)
    h, w, c = x.shape[-3:]
    lead = x.shape[:-3]
    s_hw = msa_scores(_pool2(x, -1), *hw)  # [..., H, W]
    s_hc = msa_scores(_pool2(x, -2), *hc)  # [..., H, C]
    s_wc = msa_scores(_pool2(x, -3), *wc)  # [..., W, C]
    y = (x * T.reshape(s_hw, lead + (h, w, 1))
         + x * T.reshape(s_hc, lead + (h, 1, c))
         + x * T.reshape(s_wc, lead + (1, w, c)))
    return y * (1.0 / 3.0)


# ---------------------------------------------------------------- layer objects

class _ChannelMLP(Module):
    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        if channels < 1 or reduction < 1:
            raise ValueError("channels and reduction must be >= 1")
        hidden = -(-channels // reduction)
        self.channels = channels
        self.w1 = glorot_uniform(rng, (channels, hidden), channels, hidden)
        self.b1 = zeros((hidden,))
        self.w2 = glorot_uniform(rng, (hidden, channels), hidden, channels)
        self.b2 = zeros((channels,))

    @property
    def weights(self):
        return self.w1, self.b1, self.w2, self.b2


class SELayer(_ChannelMLP):
    def __call__(self, x: Tensor) -> Tensor:
        return se_layer(x, *self.weights)


class CALayer(_ChannelMLP):
    def __call__(self, x: Tensor) -> Tensor:
        return ca_layer(x, *self.weights)


class SALayer(Module):
    def __init__(self, rng: np.random.Generator, kernel: int = 7):
        self.w = glorot_uniform(rng, (kernel, kernel, 2, 1), kernel * kernel * 2, kernel * kernel)
        self.b = zeros((1,))

    def __call__(self, x: Tensor) -> Tensor:
        return sa_layer(x, self.w, self.b)


class CBAMLayer(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        self.ca = CALayer(channels, reduction, rng)
        self.sa = SALayer(rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.sa(self.ca(x))


class MultiHeadSelfAttention(Module):
    def __init__(self, token_dim: int, rng: np.random.Generator, num_heads: int = 32, key_dim: int = 8):
        if token_dim < 1 or num_heads < 1 or key_dim < 1:
            raise ValueError("token_dim, num_heads and key_dim must be >= 1")
        self.token_dim = token_dim
        self.wq = glorot_uniform(rng, (num_heads, token_dim, key_dim), token_dim, key_dim)
        self.wk = glorot_uniform(rng, (num_heads, token_dim, key_dim), token_dim, key_dim)
        self.wv = glorot_uniform(rng, (num_heads, token_dim, token_dim), token_dim, token_dim)

    @property
    def weights(self):
        return self.wq, self.wk, self.wv

    def __call__(self, m: Tensor) -> Tensor:
        return msa_scores(m, *self.weights)


class TriAxisAttention(Module):
    """Multi-head attention on the [H x W], [H x C] and [W x C] pooled views."""

    def __init__(self, height: int, width: int, channels: int, rng: np.random.Generator,
                 num_heads: int = 32, key_dim: int = 8):
        self.dims = (height, width, channels)
        self.hw = MultiHeadSelfAttention(width, rng, num_heads, key_dim)
        self.hc = MultiHeadSelfAttention(channels, rng, num_heads, key_dim)
        self.wc = MultiHeadSelfAttention(channels, rng, num_heads, key_dim)

    def __call__(self, x: Tensor) -> Tensor:
        if tuple(x.shape[-3:]) != self.dims:
            raise ShapeError(f"tri-axis layer built for {self.dims}, input has shape {x.shape}")
        return triaxis_attention(x, self.hw.weights, self.hc.weights, self.wc.weights)


def make_attention(kind: AttentionKind | str, height: int, width: int, channels: int,
                   rng: np.random.Generator, *, reduction: int = 4, num_heads: int = 32,
                   key_dim: int = 8) -> Module:
    kind = AttentionKind(kind)
    if kind is AttentionKind.SE:
        return SELayer(channels, reduction, rng)
    if kind is AttentionKind.CA:
        return CALayer(channels, reduction, rng)
    if kind is AttentionKind.SA:
        return SALayer(rng)
    if kind is AttentionKind.CBAM:
        return CBAMLayer(channels, rng, reduction)
    return TriAxisAttention(height, width, channels, rng, num_heads, key_dim)
