"""Joint training of encoder, decoder and map block, with degradation scheduling."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import LossBreakdown, l_bce, l_div, l_map, l_rec
from .manipulator import (
    DEGRADATION_KINDS,
    ToyDataset,
    degrade,
    ground_truth_map,
    random_manipulation_spec,
    scaled_degradation,
    toy_manipulate,
)
from .model import PADL, ConfigError
from .optim import AdamW

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    # "constant" or "cosine" (decays to lr_min_frac * learning_rate at the last iteration)
    lr_schedule: str = "constant"
    lr_min_frac: float = 0.05
    degradation_p_max: float = 0.5
    degradation_kinds: tuple[str, ...] = DEGRADATION_KINDS
    noise_sigma_range: tuple[float, float] = (0.01, 0.05)
    noise_prob: float = 0.5
    # straight-through 8-bit rounding applied to this fraction of protected images
    quantize_prob: float = 0.5
    use_div: bool = True
    map_on_clean: bool = False
    zero_gt_weight: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    algorithm1_literal: bool = False

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for the diversity loss")
        unknown = set(self.degradation_kinds) - set(DEGRADATION_KINDS)
        if unknown:
            raise ConfigError(f"unknown degradation kinds {sorted(unknown)}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.degradation_p_max <= 1:
            raise ConfigError("degradation_p_max must lie in [0, 1]")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Settings tuned for the 32x32 default model on one CPU core (about 25 CPU-minutes).

        Degradations are off, and batch 3 keeps the summed pairwise diversity
        term from crowding out reconstruction.
        """
        base = dict(iterations=8000, batch_size=3, learning_rate=5e-4, lr_schedule="cosine",
                    degradation_p_max=0.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degradation_kinds"] = list(self.degradation_kinds)
        d["noise_sigma_range"] = list(self.noise_sigma_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("degradation_kinds", "noise_sigma_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class DegradationScheduler:
    """Linear ramp of degradation probability and intensity over training."""

    p_max: float
    total: int
    kinds: tuple[str, ...] = DEGRADATION_KINDS
    counts: Counter = field(default_factory=Counter)

    def schedule(self, it: int) -> tuple[float, float]:
        if not 0 <= it <= self.total:
            raise ValueError(f"iteration {it} outside [0, {self.total}]")
        frac = it / self.total
        return self.p_max * frac, 0.25 + 0.75 * frac

    def sample(self, it: int, rng: np.random.Generator):
        """A DegradationSpec to apply at this iteration, or None."""
        p, intensity = self.schedule(it)
        if not self.kinds or rng.uniform() >= p:
            return None
        kind = self.kinds[int(rng.integers(0, len(self.kinds)))]
        self.counts[kind] += 1
        return scaled_degradation(kind, intensity)


def _straight_through(x: Tensor, target: np.ndarray) -> Tensor:
    """Forward value ``target``, gradient of the identity with respect to x."""
    return x + Tensor((target - x.data).astype(x.data.dtype))


class Trainer:
    """Runs the training loop for a PADL-shaped model.

    The model must provide ``encode_perturbation``, ``decode_perturbation``,
    ``map_and_logit``, ``parameters`` and ``config`` (alpha, image dims).
    """

    def __init__(self, model: PADL, cfg: TrainConfig, dataset=None,
                 log_path: str | Path | None = None,
                 checkpoint_fn: Callable[[int], None] | None = None):
        self.model = model
        self.cfg = cfg
        mc = model.config
        self.dataset = dataset or ToyDataset(mc.image_height, mc.image_width, seed=cfg.seed)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.optimizer = AdamW(model.parameters(), lr=cfg.learning_rate,
                               betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
        self.scheduler = DegradationScheduler(cfg.degradation_p_max, cfg.iterations, tuple(cfg.degradation_kinds))
        self.iteration = 0
        self.history: list[LossBreakdown] = []
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_fn = checkpoint_fn
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("")

    def learning_rate_at(self, it: int) -> float:
        cfg = self.cfg
        if cfg.lr_schedule == "constant":
            return cfg.learning_rate
        frac = min(it, cfg.iterations) / cfg.iterations
        floor = cfg.lr_min_frac * cfg.learning_rate
        return floor + 0.5 * (cfg.learning_rate - floor) * (1 + np.cos(np.pi * frac))

    # ------------------------------------------------------------------ step
    def _noisy_raw(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.cfg.noise_sigma_range
        out = x.copy()
        for i in range(len(x)):
            if self.rng.uniform() < self.cfg.noise_prob:
                sigma = self.rng.uniform(lo, hi)
                out[i] = np.clip(x[i] + self.rng.normal(0, sigma, size=x[i].shape), 0, 1)
        return out

    def _protected_stream(self, tau: Tensor) -> Tensor:
        cfg = self.cfg
        target = tau.data.copy()
        changed = False
        it = min(self.iteration, cfg.iterations)
        for i in range(len(target)):
            spec = self.scheduler.sample(it, self.rng)
            if spec is not None:
                target[i] = degrade(target[i:i + 1], spec, self.rng)[0]
                changed = True
            elif self.rng.uniform() < cfg.quantize_prob:
                target[i] = np.round(np.clip(target[i], 0, 1) * 255) / 255
                changed = True
        return _straight_through(tau, target) if changed else tau

    def train_step(self, x: np.ndarray) -> LossBreakdown:
        cfg, model = self.cfg, self.model
        B = len(x)
        H, W = x.shape[2:]
        xt = Tensor(x)

        delta_e = model.encode_perturbation(xt)
        tau = model.protect(xt, delta_e)

        # manipulation sees detached values only
        specs = [random_manipulation_spec(self.rng, H, W) for _ in range(B)]
        manipulated = toy_manipulate(tau.data, specs)
        y_gt = ground_truth_map(tau.data, manipulated)

        protected_in = self._protected_stream(tau)
        raw_in = Tensor(self._noisy_raw(x))
        manip_in = Tensor(manipulated)

        images = ad.concat([manip_in, protected_in, raw_in], axis=0)
        deltas = model.decode_perturbation(images)
        map_inputs = images
        if cfg.algorithm1_literal:
            map_inputs = ad.concat([tau, tau, tau], axis=0)
        maps, logits = model.map_and_logit(map_inputs, deltas)

        loss_rec = l_rec(delta_e, deltas[B:2 * B])
        if cfg.map_on_clean:
            gt_all = np.concatenate([y_gt, np.zeros_like(y_gt), np.zeros_like(y_gt)])
            loss_map = l_map(gt_all, maps, zero_gt_weight=cfg.zero_gt_weight)
        else:
            loss_map = l_map(y_gt, maps[:B])
        loss_div = l_div(delta_e) if cfg.use_div else Tensor(np.zeros((), dtype=np.float32))
        labels = np.concatenate([np.zeros(B), np.ones(B), np.zeros(B)]).reshape(-1, 1)
        loss_bce = l_bce(logits, labels)
        total = loss_rec + loss_map + loss_div + loss_bce

        parts = LossBreakdown(rec=float(loss_rec.data), map=float(loss_map.data), div=float(loss_div.data),
                              bce=float(loss_bce.data), total=float(total.data))
        if not np.all(np.isfinite([parts.rec, parts.map, parts.div, parts.bce, parts.total])):
            raise NumericalError(f"non-finite loss at iteration {self.iteration}: {parts.to_dict()}")

        self.optimizer.lr = self.learning_rate_at(self.iteration)
        self.optimizer.zero_grad()
        ad.backward(total)
        self.optimizer.step()
        return parts

    # ------------------------------------------------------------------ loop
    def run(self, iterations: int | None = None, progress: bool = False) -> list[LossBreakdown]:
        total = iterations if iterations is not None else self.cfg.iterations
        for _ in range(total):
            x = self.dataset.batch(self.cfg.batch_size)
            parts = self.train_step(x)
            self.history.append(parts)
            self.iteration += 1
            if self.log_path:
                with self.log_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"iteration": self.iteration, **parts.to_dict()}) + "\n")
            if progress and self.iteration % 50 == 0:
                log.info("iter %d %s", self.iteration, parts.to_dict())
            every = self.cfg.checkpoint_every
            if self.checkpoint_fn and every and self.iteration % every == 0:
                self.checkpoint_fn(self.iteration)
        if self.checkpoint_fn:
            self.checkpoint_fn(self.iteration)
        return self.history


def leave_one_out_config(base: TrainConfig, excluded: str | None) -> TrainConfig:
    """Training config with one degradation kind withheld (None keeps all four)."""
    if excluded is None:
        kinds: Sequence[str] = DEGRADATION_KINDS
    elif excluded not in DEGRADATION_KINDS:
        raise ConfigError(f"unknown degradation kind {excluded!r}")
    else:
        kinds = tuple(k for k in DEGRADATION_KINDS if k != excluded)
    d = base.to_dict()
    d["degradation_kinds"] = tuple(kinds)
    return TrainConfig.from_dict(d)


def leave_one_out_train(excluded: str | None, model_cfg=None, train_cfg: TrainConfig | None = None,
                        seed: int | None = None) -> tuple[PADL, Trainer, dict]:
    """Train with one degradation withheld; returns model, trainer and report metadata."""
    train_cfg = leave_one_out_config(train_cfg or TrainConfig(), excluded)
    model = PADL(model_cfg, seed=train_cfg.seed if seed is None else seed)
    trainer = Trainer(model, train_cfg)
    trainer.run()
    meta = {"excluded_degradation": excluded, "trained_kinds": list(train_cfg.degradation_kinds),
            "degradation_counts": dict(trainer.scheduler.counts)}
    return model, trainer, meta
