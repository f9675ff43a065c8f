"""Attention and feed-forward building blocks.

All blocks operate on batched token tensors of shape ``(B, N, d)``. The
functional entry points (:func:`self_attention`, :func:`cross_attention`,
:func:`xca`, :func:`local_patch_interaction`) also accept an unbatched
``(N, d)`` sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class Module:
    """Container whose ``Tensor`` attributes with ``requires_grad`` are parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Init:
    """Seeded parameter factory; every parameter draws from one generator in creation order."""

    def __init__(self, rng: np.random.Generator, dtype=None):
        self.rng = rng
        self.dtype = np.dtype(dtype or ad.get_default_dtype())

    def _param(self, value: np.ndarray) -> Tensor:
        return Tensor(value, requires_grad=True, dtype=self.dtype)

    def xavier(self, fan_in: int, fan_out: int) -> Tensor:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self._param(self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def normal(self, shape, std: float) -> Tensor:
        return self._param(self.rng.normal(0.0, std, size=shape))

    def zeros(self, shape) -> Tensor:
        return self._param(np.zeros(shape))

    def ones(self, shape) -> Tensor:
        return self._param(np.ones(shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, init: Init):
        self.weight = init.xavier(d_in, d_out)
        self.bias = init.zeros((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, init: Init, eps: float = 1e-5):
        self.gain = init.ones((d,))
        self.shift = init.zeros((d,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x, self.eps), self.gain), self.shift)


class MLP(Module):
    """Linear layers with gelu between them; no activation after the last."""

    def __init__(self, sizes: list[int], init: Init):
        self.layers = [Linear(a, b, init) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected (N, d) or (B, N, d) tokens, got {x.shape}")
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return ad.reshape(x, x.shape[1:]) if squeeze else x


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


@dataclass
class GridShape:
    rows: int
    cols: int

    @property
    def tokens(self) -> int:
        return self.rows * self.cols


class Attention(Module):
    """Multi-head scaled dot-product attention with Q/K/V/output projections."""

    def __init__(self, d_model: int, n_heads: int, init: Init):
        if n_heads <= 0 or d_model % n_heads:
            raise ValueError(f"n_heads={n_heads} must divide d_model={d_model}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, init)
        self.k = Linear(d_model, d_model, init)
        self.v = Linear(d_model, d_model, init)
        self.out = Linear(d_model, d_model, init)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 return_weights: bool = False):
        for t in (query, key, value):
            if t.shape[-1] != self.d_model:
                raise ShapeError(f"token width {t.shape[-1]} != d_model {self.d_model}")
        if key.shape[:-1] != value.shape[:-1]:
            raise ShapeError(f"key {key.shape} and value {value.shape} disagree")
        q = _split_heads(self.q(query), self.n_heads)
        k = _split_heads(self.k(key), self.n_heads)
        v = _split_heads(self.v(value), self.n_heads)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(self.d_model // self.n_heads))
        weights = ad.softmax(scores, axis=-1)
        out = self.out(_merge_heads(ad.matmul(weights, v)))
        return (out, weights) if return_weights else out


class XCA(Module):
    """Cross-covariance attention: a (d/h) x (d/h) channel map per head."""

    def __init__(self, d_model: int, n_heads: int, init: Init):
        if n_heads <= 0 or d_model % n_heads:
            raise ValueError(f"n_heads={n_heads} must divide d_model={d_model}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, init)
        self.k = Linear(d_model, d_model, init)
        self.v = Linear(d_model, d_model, init)
        self.out = Linear(d_model, d_model, init)
        # temperature = exp(log_temperature) stays positive under any update
        self.log_temperature = init.zeros((n_heads, 1, 1))

    def __call__(self, x: Tensor, return_weights: bool = False):
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"token width {x.shape[-1]} != d_model {self.d_model}")
        # (B, h, dh, N): channels as rows, tokens along the last axis
        q = ad.transpose(_split_heads(self.q(x), self.n_heads), (0, 1, 3, 2))
        k = ad.transpose(_split_heads(self.k(x), self.n_heads), (0, 1, 3, 2))
        v = ad.transpose(_split_heads(self.v(x), self.n_heads), (0, 1, 3, 2))
        q = ad.l2_normalize(q, axis=-1, eps=1e-6)
        k = ad.l2_normalize(k, axis=-1, eps=1e-6)
        gram = ad.matmul(q, ad.transpose(k))
        weights = ad.softmax(ad.mul(gram, ad.exp(self.log_temperature)), axis=-1)
        mixed = ad.matmul(weights, v)  # (B, h, dh, N)
        out = self.out(_merge_heads(ad.transpose(mixed, (0, 1, 3, 2))))
        return (out, weights) if return_weights else out


class LPI(Module):
    """Local patch interaction: depthwise 3x3 conv, gelu, depthwise 3x3 conv."""

    def __init__(self, d_model: int, init: Init):
        self.conv1 = init.normal((3, 3, d_model), 1.0 / 3.0)
        self.bias1 = init.zeros((d_model,))
        self.conv2 = init.normal((3, 3, d_model), 1.0 / 3.0)
        self.bias2 = init.zeros((d_model,))

    def __call__(self, x: Tensor, grid: GridShape) -> Tensor:
        b, n, d = x.shape
        if n != grid.tokens:
            raise ShapeError(f"{n} tokens do not fill a {grid.rows}x{grid.cols} grid")
        img = ad.reshape(x, (b, grid.rows, grid.cols, d))
        img = ad.depthwise_conv2d(img, self.conv1, self.bias1)
        img = ad.depthwise_conv2d(ad.gelu(img), self.conv2, self.bias2)
        return ad.reshape(img, (b, n, d))


class EncoderLayer(Module):
    """Pre-norm encoder layer.

    ``variant="token"``: x + SA(LN(x)), then x + MLP(LN(x)).
    ``variant="channel"``: x + XCA(LN(x)), x + LPI(LN(x)) on patch tokens only,
    then x + MLP(LN(x)).
    """

    def __init__(self, d_model: int, n_heads: int, init: Init, variant: str = "token",
                 mlp_ratio: int = 4):
        if variant not in ("token", "channel"):
            raise ValueError(f"unknown encoder layer variant {variant!r}")
        self.variant = variant
        self.norm1 = LayerNorm(d_model, init)
        if variant == "token":
            self.attn = Attention(d_model, n_heads, init)
        else:
            self.attn = XCA(d_model, n_heads, init)
            self.norm3 = LayerNorm(d_model, init)
            self.lpi = LPI(d_model, init)
        self.norm2 = LayerNorm(d_model, init)
        self.mlp = MLP([d_model, mlp_ratio * d_model, d_model], init)

    def __call__(self, x: Tensor, grid: GridShape | None = None, has_cls: bool = True) -> Tensor:
        x, squeeze = _batched(x)
        h = self.norm1(x)
        if self.variant == "token":
            x = ad.add(x, self.attn(h, h, h))
        else:
            x = ad.add(x, self.attn(h))
            if grid is None:
                raise ShapeError("channel-attention layers need the token grid")
            h = self.norm3(x)
            if has_cls:
                patches = ad.add(x[:, 1:], self.lpi(h[:, 1:], grid))
                x = ad.concat([x[:, :1], patches], axis=1)
            else:
                x = ad.add(x, self.lpi(h, grid))
        x = ad.add(x, self.mlp(self.norm2(x)))
        return _unbatched(x, squeeze)


class DecoderLayer(Module):
    """Pre-norm DETR-style decoder layer.

    Query position embeddings are added to Q and K of the query self-attention
    and to Q of the cross-attention; ``memory_pos`` (if given) is added to the
    cross-attention keys.
    """

    def __init__(self, d_model: int, n_heads: int, init: Init, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(d_model, init)
        self.self_attn = Attention(d_model, n_heads, init)
        self.norm2 = LayerNorm(d_model, init)
        self.cross_attn = Attention(d_model, n_heads, init)
        self.norm3 = LayerNorm(d_model, init)
        self.mlp = MLP([d_model, mlp_ratio * d_model, d_model], init)

    def __call__(self, tgt: Tensor, memory: Tensor, query_pos: Tensor,
                 memory_pos: Tensor | None = None) -> Tensor:
        tgt, squeeze = _batched(tgt)
        memory, _ = _batched(memory)
        h = self.norm1(tgt)
        qk = ad.add(h, query_pos)
        tgt = ad.add(tgt, self.self_attn(qk, qk, h))
        h = self.norm2(tgt)
        keys = memory if memory_pos is None else ad.add(memory, memory_pos)
        tgt = ad.add(tgt, self.cross_attn(ad.add(h, query_pos), keys, memory))
        tgt = ad.add(tgt, self.mlp(self.norm3(tgt)))
        return _unbatched(tgt, squeeze)


# --- functional entry points ------------------------------------------------

def self_attention(x: Tensor, params: Attention) -> Tensor:
    xb, squeeze = _batched(x)
    return _unbatched(params(xb, xb, xb), squeeze)


def cross_attention(queries: Tensor, memory: Tensor, params: Attention) -> Tensor:
    qb, squeeze = _batched(queries)
    mb, _ = _batched(memory)
    if qb.shape[0] != mb.shape[0]:
        raise ShapeError(f"batch sizes differ: {qb.shape[0]} vs {mb.shape[0]}")
    return _unbatched(params(qb, mb, mb), squeeze)


def xca(x: Tensor, params: XCA) -> Tensor:
    xb, squeeze = _batched(x)
    return _unbatched(params(xb), squeeze)


def local_patch_interaction(x: Tensor, grid: GridShape, params: LPI) -> Tensor:
    xb, squeeze = _batched(x)
    return _unbatched(params(xb, grid), squeeze)


def encoder_layer(x: Tensor, params: EncoderLayer, grid: GridShape | None = None,
                  has_cls: bool = True) -> Tensor:
    return params(x, grid=grid, has_cls=has_cls)


def decoder_layer(queries: Tensor, memory: Tensor, params: DecoderLayer,
                  query_pos: Tensor, memory_pos: Tensor | None = None) -> Tensor:
    return params(queries, memory, query_pos, memory_pos)
