"""Black-box reverse engineering of protective perturbations, and the fixed-perturbation baseline.

The attack functions only ever see image arrays: protected images handed over
by the victim and unprotected images from an unrelated pool. Detection of the
forged images goes through a ``detect_fn`` callable supplied by the harness.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Module
from .losses import attack_loss, l_div
from .model import PADL, ConfigError, ModelConfig
from .optim import AdamW

DEFAULT_KS = (4, 8, 16, 32, 64)


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 2000
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    channels: tuple[int, ...] = (16, 32, 16)
    # max |perturbation| when the reversed estimate is pasted onto new images
    apply_strength: float = 0.03
    init_scale: float = 1e-2
    trials: int = 10


class Extractor(Module):
    """3x3 same-padded CNN, ``y - f(y)``: the residual after predicting clean content.

    Pixels are mapped from [0, 1] to [-1, 1] first. On uncentred inputs the
    residual starts out dominated by mean brightness, and the reversed
    perturbation drifts toward it instead of toward the hidden signal.
    """

    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = (16, 32, 16), in_channels: int = 3):
        dims = [in_channels, *channels, in_channels]
        self.kernels = []
        self.biases = []
        for cin, cout in zip(dims[:-1], dims[1:]):
            std = math.sqrt(2.0 / (cin * 9))
            self.kernels.append(Tensor(rng.normal(0, std, size=(cout, cin, 3, 3)), requires_grad=True))
            self.biases.append(Tensor(np.zeros(cout), requires_grad=True))

    def content(self, y: Tensor) -> Tensor:
        h = y
        last = len(self.kernels) - 1
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            h = ad.conv2d(h, k, b, stride=1, padding=1)
            if i < last:
                h = ad.gelu(h)
        return h

    def __call__(self, y) -> Tensor:
        y = ad._as_tensor(y) * 2.0 - 1.0
        return y - self.content(y)


def fit_attack(protected: np.ndarray, unprotected: np.ndarray, adaptive: bool = False,
               cfg: AttackConfig | None = None, seed: int = 0, trace: list | None = None) -> np.ndarray:
    """Jointly fit reversed perturbation(s) and an extractor.

    Returns an array (M, C, H, W): M = 1 for the base attack, M = K (one per
    protected image, with a diversity penalty across them) when adaptive.
    Per-step losses are appended to ``trace`` when given.
    """
    cfg = cfg or AttackConfig()
    protected = np.asarray(protected, dtype=np.float32)
    unprotected = np.asarray(unprotected, dtype=np.float32)
    K = len(protected)
    if K < 1:
        raise ConfigError("attack needs at least one protected image")
    rng = np.random.default_rng(seed)
    extractor = Extractor(rng, cfg.channels, protected.shape[1])
    M = K if adaptive else 1
    delta = Tensor(rng.normal(0, cfg.init_scale, size=(M,) + protected.shape[1:]), requires_grad=True)
    opt = AdamW([delta, *extractor.parameters()], lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    bs = min(cfg.batch_size, K)
    for _ in range(cfg.steps):
        idx = rng.choice(K, size=bs, replace=False) if bs < K else np.arange(K)
        uidx = rng.choice(len(unprotected), size=min(cfg.batch_size, len(unprotected)), replace=False)
        ext_p = extractor(Tensor(protected[idx]))
        ext_u = extractor(Tensor(unprotected[uidx]))
        if adaptive:
            d = delta[idx]
            loss = attack_loss(d, ext_p, ext_u)
            if M > 1:
                loss = loss + l_div(d)
        else:
            loss = attack_loss(delta, ext_p, ext_u)
        if trace is not None:
            trace.append(float(loss.data))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
    return delta.data.copy()


def scale_to_strength(delta: np.ndarray, strength: float) -> np.ndarray:
    """Rescale each perturbation so that its largest magnitude equals ``strength``."""
    flat = np.abs(delta.reshape(len(delta), -1)).max(axis=1)
    flat = np.where(flat > 0, flat, 1.0)
    return (delta / flat.reshape(-1, *([1] * (delta.ndim - 1))) * strength).astype(np.float32)


def evaluate_attack(reversed_deltas: np.ndarray, fresh_images: np.ndarray,
                    detect_fn: Callable[[np.ndarray], np.ndarray], strength: float = 0.03) -> float:
    """Fraction of forged images classified as protected.

    Each reversed perturbation is pasted on every fresh image; with several
    perturbations the most successful one is reported.
    """
    deltas = scale_to_strength(np.asarray(reversed_deltas), strength) if strength else np.asarray(reversed_deltas)
    rates = []
    for d in deltas:
        forged = np.clip(fresh_images + d[None], 0.0, 1.0).astype(np.float32)
        rates.append(float(np.mean(detect_fn(forged))))
    return max(rates)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel().astype(np.float64)
    b = b.ravel().astype(np.float64)
    return float(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12))


@dataclass
class AttackRow:
    K: int
    mean: float
    std: float
    rates: list[float]
    cosine_to_true: float | None = None


def attack_sweep(protect_fn: Callable[[np.ndarray], np.ndarray],
                 detect_fn: Callable[[np.ndarray], np.ndarray],
                 victim_pool: np.ndarray, attacker_pool: np.ndarray, fresh_images: np.ndarray,
                 ks: Sequence[int] = DEFAULT_KS, adaptive: bool = False,
                 cfg: AttackConfig | None = None, seed: int = 0,
                 true_perturbations: np.ndarray | None = None) -> list[AttackRow]:
    """Attack success rate per K, over ``cfg.trials`` different protected subsets.

    ``protect_fn`` and ``detect_fn`` are the only handles on the defender;
    ``detect_fn`` returns a boolean "protected" verdict per image.
    ``true_perturbations`` (harness-only) lets the report include the best
    cosine between the reversed estimate and the defender's real templates.
    """
    cfg = cfg or AttackConfig()
    rng = np.random.default_rng(seed)
    rows = []
    for K in ks:
        if K > len(victim_pool):
            raise ConfigError(f"K={K} exceeds the victim pool of {len(victim_pool)} images")
        rates, cosines = [], []
        for trial in range(cfg.trials):
            subset = victim_pool[rng.choice(len(victim_pool), size=K, replace=False)]
            protected = protect_fn(subset)
            rev = fit_attack(protected, attacker_pool, adaptive=adaptive, cfg=cfg,
                             seed=int(rng.integers(0, 2**31 - 1)))
            rates.append(evaluate_attack(rev, fresh_images, detect_fn, cfg.apply_strength))
            if true_perturbations is not None:
                cosines.append(max(cosine(r, t) for r in rev for t in true_perturbations))
        rows.append(AttackRow(K=K, mean=float(np.mean(rates)), std=float(np.std(rates)), rates=rates,
                              cosine_to_true=float(np.mean(cosines)) if cosines else None))
    return rows


def attack_report(rows: Sequence[AttackRow], **meta) -> dict:
    return {"rows": [asdict(r) for r in rows], **meta}


ATTACK_REPORT_SCHEMA = {
    "type": "object",
    "required": ["rows", "defender", "adaptive", "trials"],
    "properties": {
        "defender": {"type": "string"},
        "adaptive": {"type": "boolean"},
        "trials": {"type": "integer", "minimum": 1},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["K", "mean", "std", "rates"],
                "properties": {
                    "K": {"type": "integer", "minimum": 1},
                    "mean": {"type": "number", "minimum": 0, "maximum": 1},
                    "std": {"type": "number", "minimum": 0},
                    "rates": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                    "cosine_to_true": {"type": ["number", "null"]},
                },
            },
        },
    },
}


# ---------------------------------------------------------------- baseline
class FixedPerturbations(Module):
    """A small set of image-independent perturbations, tanh-bounded."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, count: int):
        self.raw = Tensor(rng.normal(0, 1.0, size=(count,) + cfg.image_shape), requires_grad=True)
        self._choice_rng = np.random.default_rng(int(rng.integers(0, 2**31 - 1)))

    @property
    def count(self) -> int:
        return self.raw.shape[0]

    def templates(self) -> np.ndarray:
        return np.tanh(self.raw.data)

    def __call__(self, x: Tensor) -> Tensor:
        idx = self._choice_rng.integers(0, self.count, size=x.shape[0])
        return ad.tanh(self.raw[idx])


class FixedPerturbationBaseline(PADL):
    """Same decoder and map block as PADL; protection draws from a fixed template set."""

    def __init__(self, cfg: ModelConfig | None = None, num_perturbations: int = 1, seed: int = 0):
        if num_perturbations not in (1, 3):
            raise ConfigError("baseline supports 1 or 3 fixed perturbations")
        super().__init__(cfg, seed)
        self.encoder = FixedPerturbations(np.random.default_rng(seed + 7919), self.config, num_perturbations)

    def encode_perturbation(self, x) -> Tensor:
        x = ad._as_tensor(x)
        delta = self.encoder(x)
        if self.perturbation_hook is not None:
            delta = self.perturbation_hook(delta)
        return delta


def baseline_train_config(base=None, **overrides):
    """Training settings for the baseline: no diversity loss, no noise injection."""
    from .training import TrainConfig

    d = (base or TrainConfig()).to_dict()
    d.update(use_div=False, noise_prob=0.0)
    d.update(overrides)
    return TrainConfig.from_dict(d)


def train_baseline(num_perturbations: int = 1, model_cfg: ModelConfig | None = None, train_cfg=None,
                   seed: int = 0) -> FixedPerturbationBaseline:
    """Train the fixed-perturbation baseline with reconstruction, map and BCE losses only."""
    from .training import Trainer

    cfg = baseline_train_config(train_cfg)
    model = FixedPerturbationBaseline(model_cfg, num_perturbations, seed)
    Trainer(model, cfg).run()
    return model


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
