"""Detection and localization metrics, the detection-conditioned protocol, and sweeps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .manipulator import ground_truth_map, random_manipulation_spec, toy_manipulate

THRESHOLDS = (0.1, 0.25, 0.5)


def rank_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """ROC AUC from the Mann-Whitney statistic; ties between classes count 1/2.

    Returns None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def detection_metrics(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, float | None]:
    """Accuracy at threshold 0.5 and rank AUC; label 1 marks the positive class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    acc = float(np.mean((scores > 0.5).astype(int) == labels)) if len(labels) else float("nan")
    return acc, rank_auc(scores, labels)


def pixel_auc(gt_maps: np.ndarray, pred_maps: np.ndarray, t: float) -> float | None:
    """Pooled pixel AUC: labels gt >= t, scores the predicted values."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold {t} outside (0, 1)")
    gt = np.asarray(gt_maps)
    pred = np.asarray(pred_maps)
    if gt.shape != pred.shape:
        raise ValueError(f"map shapes {gt.shape} and {pred.shape} differ")
    return rank_auc(pred.ravel(), gt.ravel() >= t)


@dataclass
class ConditionedSample:
    is_manipulated_gt: bool
    detected_manipulated: bool
    gt_map: np.ndarray
    pred_map: np.ndarray

    @property
    def scenario(self) -> str:
        if self.is_manipulated_gt:
            return "manipulated_detected" if self.detected_manipulated else "manipulated_missed"
        return "clean_false_alarm" if self.detected_manipulated else "clean_correct"


def conditioned_maps(samples: Sequence[ConditionedSample]) -> tuple[np.ndarray, np.ndarray]:
    """Apply the four-scenario substitutions and stack the (gt, pred) pairs."""
    gts, preds = [], []
    for s in samples:
        gt = np.asarray(s.gt_map, dtype=np.float32)
        pred = np.asarray(s.pred_map, dtype=np.float32)
        if gt.shape != pred.shape:
            raise ValueError(f"sample maps {gt.shape} and {pred.shape} differ")
        scen = s.scenario
        if scen == "manipulated_missed":
            pred = np.zeros_like(pred)
        elif scen == "clean_correct":
            gt, pred = np.zeros_like(gt), np.zeros_like(pred)
        elif scen == "clean_false_alarm":
            gt = np.zeros_like(gt)
        gts.append(gt)
        preds.append(pred)
    return np.stack(gts), np.stack(preds)


def conditioned_protocol(samples: Sequence[ConditionedSample],
                         thresholds: Sequence[float] = THRESHOLDS) -> dict[float, float | None]:
    """Localization AUC per threshold after detection-conditioned substitution."""
    gt, pred = conditioned_maps(samples)
    return {t: pixel_auc(gt, pred, t) for t in thresholds}


def scenario_counts(samples: Sequence[ConditionedSample]) -> dict[str, int]:
    counts = {k: 0 for k in ("manipulated_detected", "manipulated_missed", "clean_correct", "clean_false_alarm")}
    for s in samples:
        counts[s.scenario] += 1
    return counts


def protection_quality(x: np.ndarray, protected: np.ndarray) -> float:
    """Mean squared error over all pixels and channels."""
    x = np.asarray(x, dtype=np.float64)
    protected = np.asarray(protected, dtype=np.float64)
    if x.shape != protected.shape:
        raise ValueError(f"shapes {x.shape} and {protected.shape} differ")
    return float(np.mean((x - protected) ** 2))


def noise_robustness_sweep(detector, images: np.ndarray, sigmas: Sequence[float], seed: int = 0) -> dict[float, float]:
    """Fraction of noisy unprotected images that the detector calls protected, per sigma."""
    rng = np.random.default_rng(seed)
    out = {}
    for sigma in sigmas:
        noisy = np.clip(images + rng.normal(0.0, sigma, size=images.shape), 0.0, 1.0).astype(np.float32) \
            if sigma > 0 else images
        out[float(sigma)] = float(np.mean(detector.detect(noisy).protected_intact))
    return out


@dataclass
class EvalReport:
    detection_accuracy: float
    detection_auc: float | None
    localization_auc: dict[str, float | None]
    mse_quality: float
    scenario_counts: dict[str, int]
    num_images: int
    protected_accuracy: float
    raw_rejection: float
    attack_success: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_model(model, images: np.ndarray, seed: int = 0, thresholds: Sequence[float] = THRESHOLDS) -> EvalReport:
    """Balanced evaluation: every image is protected, and half are then manipulated.

    Detection treats "manipulated" as the positive class with score
    1 - P(protected intact); the raw (unprotected) copies feed the
    protected-versus-raw rejection rate.
    """
    n = len(images)
    if n == 0:
        raise ValueError("empty evaluation set")
    rng = np.random.default_rng(seed)
    H, W = images.shape[2:]
    protected = model.protect_images(images)
    is_manip = np.zeros(n, dtype=bool)
    is_manip[rng.permutation(n)[: n // 2]] = True
    specs = [random_manipulation_spec(rng, H, W) for _ in range(n)]
    edited = toy_manipulate(protected, specs)
    inputs = np.where(is_manip[:, None, None, None], edited, protected)
    gt = ground_truth_map(protected, inputs)

    det = model.detect(inputs)
    manip_score = 1.0 - det.score
    detected = ~det.protected_intact
    acc, auc = detection_metrics(manip_score, is_manip.astype(int))
    samples = [ConditionedSample(bool(m), bool(d), g, p) for m, d, g, p in zip(is_manip, detected, gt, det.map)]
    loc = conditioned_protocol(samples, thresholds)

    raw_det = model.detect(images)
    clean = ~is_manip
    return EvalReport(
        detection_accuracy=acc,
        detection_auc=auc,
        localization_auc={str(t): v for t, v in loc.items()},
        mse_quality=protection_quality(images, protected),
        scenario_counts=scenario_counts(samples),
        num_images=n,
        protected_accuracy=float(np.mean(det.protected_intact[clean])) if clean.any() else float("nan"),
        raw_rejection=float(np.mean(~raw_det.protected_intact)),
    )
