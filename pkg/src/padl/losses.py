"""Training objectives: reconstruction, map, diversity, detection, and the attack loss."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS = 1e-8


@dataclass
class LossBreakdown:
    rec: float
    map: float
    div: float
    bce: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """Batch mean of 1 - cos over flattened samples; inputs (B, ...)."""
    return 1.0 - ad.mean(ad.cosine_similarity(a, b, eps=EPS))


def l_rec(delta_e: Tensor, delta_d: Tensor) -> Tensor:
    """1 - cos(delta_e, delta_d), averaged over the batch; in [0, 2]."""
    return cosine_distance(ad._as_tensor(delta_e), ad._as_tensor(delta_d))


def l_map(y_gt, m_pred, zero_gt_weight: float = 0.0) -> Tensor:
    """Cosine distance between ground-truth and predicted maps.

    With ``zero_gt_weight > 0``, samples whose ground truth is all zero add
    ``zero_gt_weight * mean(m_pred**2)`` so the prediction is pushed to zero.
    """
    y_gt, m_pred = ad._as_tensor(y_gt), ad._as_tensor(m_pred)
    loss = cosine_distance(y_gt, m_pred)
    if zero_gt_weight:
        flat = y_gt.data.reshape(len(y_gt.data), -1)
        empty = (np.abs(flat).max(axis=1) == 0).astype(m_pred.data.dtype)
        if empty.any():
            per = ad.mean(ad.square(m_pred).reshape(m_pred.shape[0], -1), axis=1)
            loss = loss + zero_gt_weight * ad.sum_(per * Tensor(empty)) * (1.0 / len(empty))
    return loss


def pairwise_cosine(deltas: Tensor) -> Tensor:
    """(B, B) cosine similarity matrix of flattened perturbations."""
    B = deltas.shape[0]
    flat = deltas.reshape(B, -1)
    norms = ad.sqrt(ad.sum_(ad.square(flat), axis=1, keepdims=True) + EPS * EPS)
    unit = flat / norms
    return ad.matmul(unit, unit.transpose(1, 0))


def l_div(deltas) -> Tensor:
    """Sum over ordered pairs i != j of max(cos(delta_i, delta_j), 0)."""
    deltas = ad._as_tensor(deltas)
    B = deltas.shape[0]
    if B < 2:
        warnings.warn("diversity loss needs at least two perturbations; returning 0", RuntimeWarning)
        return Tensor(np.zeros((), dtype=deltas.data.dtype))
    cos = pairwise_cosine(deltas)
    off = Tensor(1.0 - np.eye(B, dtype=deltas.data.dtype))
    return ad.sum_(ad.clamp_min(cos, 0.0) * off)


def mean_clamped_cosine(deltas: np.ndarray) -> float:
    """Mean over ordered pairs of max(cos, 0); the diversity statistic."""
    B = len(deltas)
    flat = deltas.reshape(B, -1).astype(np.float64)
    unit = flat / np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), EPS)
    cos = np.clip(unit @ unit.T, 0.0, None)
    return float((cos.sum() - np.trace(cos)) / (B * (B - 1)))


def l_bce(logits, labels) -> Tensor:
    """Mean binary cross-entropy on sigmoid(logits)."""
    return ad.bce_with_logits(ad._as_tensor(logits), labels)


def attack_loss(delta: Tensor, extracted_protected: Tensor, extracted_unprotected: Tensor) -> Tensor:
    """(1 - cos(delta, ext(tau x))) + ||ext(x)||_2 + ||delta||_2, each batch-averaged.

    ``delta`` is (M, C, H, W) with M either 1 (shared by every protected
    image) or equal to the number of protected images.
    """
    delta = ad._as_tensor(delta)
    ep = ad._as_tensor(extracted_protected)
    eu = ad._as_tensor(extracted_unprotected)
    K = ep.shape[0]
    M = delta.shape[0]
    if M == 1 and K > 1:
        delta_k = ad.mul(Tensor(np.ones((K, 1, 1, 1), dtype=delta.data.dtype)), delta)
    elif M == K:
        delta_k = delta
    else:
        raise ValueError(f"{M} perturbations cannot be paired with {K} protected images")
    cos_term = cosine_distance(delta_k, ep)
    unprot_term = ad.mean(ad.l2_norm(eu.reshape(eu.shape[0], -1), axis=1))
    delta_term = ad.mean(ad.l2_norm(delta.reshape(M, -1), axis=1))
    return cos_term + unprot_term + delta_term
