import numpy as np
import pytest

from padl.autodiff import Tensor
from padl.optim import AdamW


def _reference_adamw(p, grads, lr, b1, b2, eps, wd):
    m = v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_matches_reference_updates(rng):
    p0 = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(5)]
    p = Tensor(p0.copy(), requires_grad=True)
    opt = AdamW([p], lr=1e-2, weight_decay=0.1)
    for g in grads:
        p.grad = g.copy()
        opt.step()
    np.testing.assert_allclose(p.data, _reference_adamw(p0, grads, 1e-2, 0.9, 0.999, 1e-8, 0.1), rtol=1e-5)


def test_zero_gradient_only_decays():
    p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.01))


def test_zero_gradient_no_decay_is_noop():
    p = Tensor(np.array([2.0, -4.0], dtype=np.float32), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    assert p.data.tobytes() == np.array([2.0, -4.0], dtype=np.float32).tobytes()


@pytest.mark.parametrize("lr", [0.05, 0.1])
def test_minimises_quadratic(lr):
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = AdamW([p], lr=lr, weight_decay=0.0)
    for _ in range(1000):
        p.grad = 2 * p.data
        opt.step()
    assert np.abs(p.data).max() < 0.1
