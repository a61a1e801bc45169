import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padl import autodiff as ad
from padl.autodiff import Tensor
from padl.losses import (attack_loss, l_bce, l_div, l_map, l_rec, mean_clamped_cosine, pairwise_cosine)


def _ref_div(d):
    flat = d.reshape(len(d), -1)
    total = 0.0
    for i in range(len(d)):
        for j in range(len(d)):
            if i != j:
                c = flat[i] @ flat[j] / (np.linalg.norm(flat[i]) * np.linalg.norm(flat[j]))
                total += max(c, 0.0)
    return total


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    other = rng.normal(size=(3, 2, 4, 4))
    gt = rng.uniform(size=(3, 1, 4, 4))
    labels = (rng.uniform(size=(3, 1)) > 0.5).astype(float)
    unprot = rng.normal(size=(5, 2, 4, 4))
    with ad.precision(np.float64):
        checks = {
            "rec": (rng.normal(size=(3, 2, 4, 4)), lambda t: l_rec(t, Tensor(other))),
            "map": (rng.uniform(0.1, 0.9, size=(3, 1, 4, 4)), lambda t: l_map(Tensor(gt), t)),
            "div": (rng.normal(size=(4, 2, 3, 3)), l_div),
            "bce": (rng.normal(size=(3, 1)), lambda t: l_bce(t, labels)),
            "attack_delta": (rng.normal(size=(1, 2, 4, 4)), lambda t: attack_loss(t, Tensor(other), Tensor(unprot))),
            "attack_ext": (rng.normal(size=(3, 2, 4, 4)),
                           lambda t: attack_loss(Tensor(other), t, Tensor(unprot))),
            "attack_unprot": (rng.normal(size=(5, 2, 4, 4)),
                              lambda t: attack_loss(Tensor(other[:1]), Tensor(other), t)),
        }
        for name, (x, f) in checks.items():
            err = ad.grad_check(f, x, eps=1e-5)
            assert err <= 1e-3, f"{name} seed {seed}: {err:.2e}"


def test_rec_identical_is_zero_and_opposite_is_two(rng):
    d = rng.normal(size=(4, 3, 8, 8))
    assert abs(float(l_rec(Tensor(d), Tensor(d)).data)) < 1e-6
    assert float(l_rec(Tensor(d), Tensor(-d)).data) == pytest.approx(2.0, abs=1e-6)


def test_map_scale_invariant(rng):
    gt = rng.uniform(size=(2, 1, 8, 8))
    assert float(l_map(gt, 0.5 * gt).data) == pytest.approx(0.0, abs=1e-6)


def test_map_zero_gt_penalty(rng):
    gt = np.zeros((2, 1, 4, 4))
    pred = Tensor(np.full((2, 1, 4, 4), 0.5))
    base = float(l_map(gt, pred).data)
    pushed = float(l_map(gt, pred, zero_gt_weight=0.1).data)
    assert pushed == pytest.approx(base + 0.1 * 0.25, rel=1e-5)


def test_div_examples():
    a = np.ones((1, 3, 2, 2))
    assert float(l_div(Tensor(np.concatenate([a, a]))).data) == pytest.approx(2.0, rel=1e-6)
    assert float(l_div(Tensor(np.concatenate([a, -a]))).data) == pytest.approx(0.0, abs=1e-7)
    ortho = np.zeros((2, 4))
    ortho[0, 0] = ortho[1, 1] = 1
    assert float(l_div(Tensor(ortho)).data) == pytest.approx(0.0, abs=1e-7)


def test_div_single_perturbation_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        v = float(l_div(Tensor(np.ones((1, 3, 2, 2)))).data)
    assert v == 0.0 and caught


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_div_matches_reference_and_bounds(b, seed):
    d = np.random.default_rng(seed).normal(size=(b, 3, 2, 2))
    v = float(l_div(Tensor(d)).data)
    assert v == pytest.approx(_ref_div(d), rel=1e-4, abs=1e-5)
    assert 0 <= v <= b * (b - 1) + 1e-4
    assert mean_clamped_cosine(d) == pytest.approx(_ref_div(d) / (b * (b - 1)), rel=1e-6, abs=1e-9)


def test_pairwise_cosine_diagonal(rng):
    c = pairwise_cosine(Tensor(rng.normal(size=(5, 7)))).data
    np.testing.assert_allclose(np.diag(c), 1.0, rtol=1e-5)
    np.testing.assert_allclose(c, c.T, atol=1e-6)


def test_bce_examples():
    assert float(l_bce(np.zeros((4, 1)), np.ones((4, 1))).data) == pytest.approx(np.log(2), rel=1e-6)
    big = float(l_bce(np.full((2, 1), 50.0), np.ones((2, 1))).data)
    assert np.isfinite(big) and big < 1e-10
    wrong = float(l_bce(np.full((2, 1), -50.0), np.ones((2, 1))).data)
    assert wrong == pytest.approx(50.0, rel=1e-6)


def test_attack_loss_terms(rng):
    d = rng.normal(size=(1, 3, 4, 4))
    ep = np.repeat(2 * d, 3, axis=0)
    eu = np.zeros((2, 3, 4, 4))
    v = float(attack_loss(Tensor(d), Tensor(ep), Tensor(eu)).data)
    assert v == pytest.approx(np.linalg.norm(d), rel=1e-5)


def test_attack_loss_pairing_rules(rng):
    ep = Tensor(rng.normal(size=(4, 3, 4, 4)))
    eu = Tensor(rng.normal(size=(2, 3, 4, 4)))
    attack_loss(Tensor(rng.normal(size=(4, 3, 4, 4))), ep, eu)
    with pytest.raises(ValueError):
        attack_loss(Tensor(rng.normal(size=(2, 3, 4, 4))), ep, eu)
