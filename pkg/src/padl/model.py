"""Perturbation encoder, perturbation decoder and map block, plus protect/detect."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear, LayerNorm, Module, PatchEmbedder, TransformerBlock, patchify, unpatchify


class ConfigError(ValueError):
    """Invalid model/training configuration or incompatible input dimensions."""


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    patch_size: int = 4
    token_dim: int = 128
    heads: int = 4
    head_dim: int = 32
    depth: int = 3
    alpha: float = 0.03
    mlp_head_hidden: int = 64

    def __post_init__(self):
        p = self.patch_size
        if self.image_height % p or self.image_width % p:
            raise ConfigError(f"image {self.image_height}x{self.image_width} not divisible into {p}x{p} patches")
        if self.token_dim != self.heads * self.head_dim:
            raise ConfigError(f"token_dim {self.token_dim} != heads*head_dim = {self.heads * self.head_dim}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")

    @property
    def num_patches(self) -> int:
        return (self.image_height * self.image_width) // (self.patch_size ** 2)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.image_height, self.image_width)

    @classmethod
    def full_scale(cls, depth: int = 3) -> "ModelConfig":
        """128x128 images, 8x8 patches, 512-d tokens, 8 heads of 64."""
        return cls(image_height=128, image_width=128, patch_size=8, token_dim=512,
                   heads=8, head_dim=64, depth=depth, alpha=0.03, mlp_head_hidden=256)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _check_images(x: Tensor, cfg: ModelConfig) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != cfg.image_shape:
        raise ConfigError(f"expected images of shape (B, {', '.join(map(str, cfg.image_shape))}), got {x.shape}")


class PerturbationEncoder(Module):
    """Learnable tokens refined by self-attention and cross-attention to the image."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, counts: Counter):
        P, d, p, C = cfg.num_patches, cfg.token_dim, cfg.patch_size, cfg.channels
        self.tokens = Tensor(rng.standard_normal((P, d)), requires_grad=True)
        self.embed = PatchEmbedder(rng, C, p, P, d)
        self.blocks = [TransformerBlock(rng, d, cfg.heads, cfg.head_dim, cross=True) for _ in range(cfg.depth)]
        self.norm = LayerNorm(d)
        self.head = Linear(rng, d, p * p * C)
        self._cfg = cfg
        self._counts = counts

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self._cfg
        self._counts["encoder"] += 1
        context = self.embed(x)
        t = _broadcast_tokens(self.tokens, x.shape[0])
        for block in self.blocks:
            t = block(t, context)
        out = self.head(self.norm(t))
        out = unpatchify(out, cfg.patch_size, cfg.channels, cfg.image_height, cfg.image_width)
        return ad.tanh(out)


def _broadcast_tokens(tokens: Tensor, batch: int) -> Tensor:
    P, d = tokens.shape
    ones = Tensor(np.ones((batch, 1, 1), dtype=tokens.data.dtype))
    return ad.mul(ones, tokens.reshape(1, P, d))


class PerturbationDecoder(Module):
    """Self-attention only; maps any image back to a perturbation estimate."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, counts: Counter):
        P, d, p, C = cfg.num_patches, cfg.token_dim, cfg.patch_size, cfg.channels
        self.embed = PatchEmbedder(rng, C, p, P, d)
        self.blocks = [TransformerBlock(rng, d, cfg.heads, cfg.head_dim, cross=False) for _ in range(cfg.depth)]
        self.norm = LayerNorm(d)
        self.head = Linear(rng, d, p * p * C)
        self._cfg = cfg
        self._counts = counts

    def __call__(self, y: Tensor) -> Tensor:
        cfg = self._cfg
        self._counts["decoder"] += 1
        t = self.embed(y)
        for block in self.blocks:
            t = block(t)
        out = self.head(self.norm(t))
        return unpatchify(out, cfg.patch_size, cfg.channels, cfg.image_height, cfg.image_width)


class MapBlock(Module):
    """Image tokens plus a class token, cross-attending to the decoded perturbation.

    Returns the manipulation map (B, 1, H, W) in [0, 1] and the detection
    logit (B, 1) from one shared trunk pass.
    """

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, counts: Counter):
        P, d, p, C = cfg.num_patches, cfg.token_dim, cfg.patch_size, cfg.channels
        self.embed = PatchEmbedder(rng, C, p, P, d)
        self.cls_token = Tensor(rng.normal(0.0, 0.02, size=(1, d)), requires_grad=True)
        # decoded perturbation -> context tokens, with its own positions
        self.context_embed = PatchEmbedder(rng, C, p, P, d)
        self.blocks = [TransformerBlock(rng, d, cfg.heads, cfg.head_dim, cross=True) for _ in range(cfg.depth)]
        self.norm = LayerNorm(d)
        self.map_head = Linear(rng, d, p * p)
        self.cls_fc1 = Linear(rng, d, cfg.mlp_head_hidden)
        self.cls_fc2 = Linear(rng, cfg.mlp_head_hidden, 1)
        self._cfg = cfg
        self._counts = counts

    def __call__(self, y: Tensor, delta_d: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self._cfg
        if y.shape != delta_d.shape:
            raise ValueError(f"image {y.shape} and decoded perturbation {delta_d.shape} differ in shape")
        self._counts["map_block"] += 1
        B = y.shape[0]
        P = cfg.num_patches
        x = ad.concat([self.embed(y), _broadcast_tokens(self.cls_token, B)], axis=1)
        context = self.context_embed(delta_d)
        for block in self.blocks:
            x = block(x, context)
        x = self.norm(x)
        patches = x[:, :P]
        cls = x[:, P]
        logit = self.cls_fc2(ad.gelu(self.cls_fc1(cls)))
        m = self.map_head(patches)
        m = unpatchify(m, cfg.patch_size, 1, cfg.image_height, cfg.image_width)
        return ad.sigmoid(m), logit


@dataclass
class Detection:
    protected_intact: np.ndarray  # (B,) bool
    score: np.ndarray             # (B,) sigmoid of the class logit
    map: np.ndarray               # (B, 1, H, W)

    def __len__(self) -> int:
        return len(self.score)


class PADL(Module):
    """Encoder, decoder and map block with disjoint weights.

    ``perturbation_hook`` (test hook) is applied to the encoder output before
    scaling by alpha when set.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        cfg = cfg or ModelConfig()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self._counts: Counter = Counter()
        self.encoder = PerturbationEncoder(rng, cfg, self._counts)
        self.decoder = PerturbationDecoder(rng, cfg, self._counts)
        self.map_block = MapBlock(rng, cfg, self._counts)
        self.perturbation_hook: Callable[[Tensor], Tensor] | None = None

    @property
    def forward_counts(self) -> Counter:
        return self._counts

    # -- encoding
    def encode_perturbation(self, x) -> Tensor:
        x = ad._as_tensor(x)
        _check_images(x, self.config)
        delta = self.encoder(x)
        if self.perturbation_hook is not None:
            delta = self.perturbation_hook(delta)
        return delta

    def protect(self, x, delta: Tensor | None = None) -> Tensor:
        """x + alpha * delta_e(x); not clamped.

        Entries where float rounding pushes |tau - x| past alpha are stepped
        back by one ulp, so the bound holds exactly on the stored values.
        """
        x = ad._as_tensor(x)
        if delta is None:
            delta = self.encode_perturbation(x)
        alpha = self.config.alpha
        tau = x + delta * alpha
        fixed = tau.data
        over = np.abs(fixed - x.data) > alpha
        if over.any():
            fixed = fixed.copy()
            while over.any():
                fixed[over] = np.nextafter(fixed[over], x.data[over])
                over = np.abs(fixed - x.data) > alpha
            tau = tau + Tensor(fixed - tau.data)
        return tau

    # -- decoding
    def decode_perturbation(self, y) -> Tensor:
        y = ad._as_tensor(y)
        _check_images(y, self.config)
        return self.decoder(y)

    def map_and_logit(self, y, delta_d: Tensor) -> tuple[Tensor, Tensor]:
        return self.map_block(ad._as_tensor(y), delta_d)

    def detect(self, y, batch_size: int = 64) -> Detection:
        """Decode the perturbation, then run the map block on the same image."""
        y_arr = y.data if isinstance(y, Tensor) else np.asarray(y)
        scores, maps = [], []
        with ad.no_grad():
            for i in range(0, len(y_arr), batch_size):
                chunk = Tensor(y_arr[i:i + batch_size])
                delta_d = self.decode_perturbation(chunk)
                m, logit = self.map_and_logit(chunk, delta_d)
                scores.append(_sigmoid(logit.data[:, 0]))
                maps.append(m.data)
        score = np.concatenate(scores) if scores else np.zeros(0, dtype=np.float32)
        return Detection(protected_intact=score > 0.5, score=score,
                         map=np.concatenate(maps) if maps else np.zeros((0, 1) + self.config.image_shape[1:]))

    def protect_images(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Protection for arrays, without recording gradients."""
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.protect(Tensor(x[i:i + batch_size])).data)
        return np.concatenate(out)

    def perturbations(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.encode_perturbation(Tensor(x[i:i + batch_size])).data)
        return np.concatenate(out)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))


def named_tensors(model: Module) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def load_named_tensors(model: Module, arrays: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ConfigError(f"tensor table mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.shape:
            raise ConfigError(f"tensor {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = np.array(arr, dtype=p.data.dtype, copy=True)


__all__ = [
    "ConfigError", "ModelConfig", "PADL", "Detection", "PerturbationEncoder",
    "PerturbationDecoder", "MapBlock", "named_tensors", "load_named_tensors", "patchify",
]
