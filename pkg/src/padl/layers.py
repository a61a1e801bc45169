"""Parameter containers and transformer building blocks on top of ``autodiff``."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal parameter container.

    Attributes holding a ``Tensor`` with ``requires_grad`` count as parameters;
    attributes holding a ``Module`` (or a list of them) are walked recursively.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    # truncated-normal-free variant of the usual 0.02-scaled ViT init, scaled by fan-in
    std = 1.0 / math.sqrt(fan_in)
    return rng.normal(0.0, std, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = _param(_init_weight(rng, d_in, d_out))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self._eps)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d: int, hidden: int):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head scaled dot-product attention.

    ``query`` is (B, Q, d) and ``context`` is (B, K, d); with ``context=None``
    the queries attend to themselves. The output projection is applied but the
    residual is left to the caller. The last attention matrix is kept in
    ``last_weights`` for inspection.
    """

    def __init__(self, rng: np.random.Generator, d: int, heads: int, head_dim: int):
        if heads * head_dim != d:
            raise ValueError(f"heads*head_dim = {heads}*{head_dim} != token dim {d}")
        self.w_q = Linear(rng, d, d, bias=False)
        self.w_k = Linear(rng, d, d, bias=False)
        self.w_v = Linear(rng, d, d, bias=False)
        self.w_out = Linear(rng, d, d)
        self._heads = heads
        self._head_dim = head_dim
        self._scale = 1.0 / math.sqrt(head_dim)
        self._last_weights: np.ndarray | None = None

    @property
    def last_weights(self) -> np.ndarray | None:
        return self._last_weights

    def _split(self, t: Tensor) -> Tensor:
        B, L, _ = t.shape
        return t.reshape(B, L, self._heads, self._head_dim).transpose(0, 2, 1, 3)

    def __call__(self, query: Tensor, context: Tensor | None = None) -> Tensor:
        if context is None:
            context = query
        if query.shape[-1] != context.shape[-1]:
            raise ValueError(f"query dim {query.shape[-1]} != context dim {context.shape[-1]}")
        B, Q, d = query.shape
        q = self._split(self.w_q(query))
        k = self._split(self.w_k(context))
        v = self._split(self.w_v(context))
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * self._scale
        weights = ad.softmax(scores, axis=-1)
        self._last_weights = weights.data
        out = ad.matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, Q, d)
        return self.w_out(out)


class TransformerBlock(Module):
    """Pre-norm block: self-attention, optional cross-attention, feed-forward.

    Each sub-layer is ``x + f(norm(x))``. Cross-attention takes an external
    context (B, K, d) as keys and values.
    """

    def __init__(self, rng: np.random.Generator, d: int, heads: int, head_dim: int,
                 cross: bool, mlp_ratio: int = 4):
        self.norm_self = LayerNorm(d)
        self.self_attn = Attention(rng, d, heads, head_dim)
        if cross:
            self.norm_cross = LayerNorm(d)
            self.cross_attn = Attention(rng, d, heads, head_dim)
        else:
            self.norm_cross = None
            self.cross_attn = None
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(rng, d, mlp_ratio * d)

    @property
    def has_cross(self) -> bool:
        return self.cross_attn is not None

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        h = self.norm_self(x)
        x = x + self.self_attn(h)
        if self.cross_attn is not None:
            if context is None:
                raise ValueError("cross-attention block called without context")
            x = x + self.cross_attn(self.norm_cross(x), context)
        return x + self.ff(self.norm_ff(x))


def patchify(images: Tensor, p: int) -> Tensor:
    """(B, C, H, W) -> (B, P, C*p*p); patches in row-major order."""
    B, C, H, W = images.shape
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    t = images.reshape(B, C, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(B, gh * gw, C * p * p)


def unpatchify(tokens: Tensor, p: int, channels: int, height: int, width: int) -> Tensor:
    """Inverse of ``patchify``."""
    B = tokens.shape[0]
    gh, gw = height // p, width // p
    t = tokens.reshape(B, gh, gw, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    return t.reshape(B, channels, height, width)


class PatchEmbedder(Module):
    """Non-overlapping p x p patches, linear projection, learnable positions."""

    def __init__(self, rng: np.random.Generator, in_channels: int, patch: int, num_patches: int,
                 d: int):
        self.proj = Linear(rng, in_channels * patch * patch, d)
        self.pos = _param(rng.normal(0.0, 0.02, size=(num_patches, d)))
        self._patch = patch
        self._channels = in_channels
        self._num_patches = num_patches

    def embed_raw(self, images: Tensor) -> Tensor:
        """Projected patches before positional encodings are added."""
        if images.ndim != 4 or images.shape[1] != self._channels:
            raise ValueError(f"expected (B, {self._channels}, H, W) input, got {images.shape}")
        patches = patchify(images, self._patch)
        if patches.shape[1] != self._num_patches:
            raise ValueError(f"input yields {patches.shape[1]} patches, embedder expects {self._num_patches}")
        return self.proj(patches)

    def __call__(self, images: Tensor) -> Tensor:
        tokens = self.embed_raw(images)
        return tokens + self.pos
