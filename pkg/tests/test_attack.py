import jsonschema
import numpy as np
import pytest

from padl.attack import (
    ATTACK_REPORT_SCHEMA,
    AttackConfig,
    Extractor,
    FixedPerturbationBaseline,
    attack_report,
    attack_sweep,
    baseline_train_config,
    cosine,
    evaluate_attack,
    fit_attack,
    scale_to_strength,
)
from padl.autodiff import Tensor
from padl.model import ConfigError
from padl.training import TrainConfig

QUICK = AttackConfig(steps=5, batch_size=4, trials=2)


def test_extractor_preserves_shape(rng):
    ext = Extractor(rng)
    y = Tensor(rng.uniform(size=(2, 3, 8, 8)))
    assert ext(y).shape == (2, 3, 8, 8)


@pytest.mark.parametrize("adaptive,expected_m", [(False, 1), (True, 6)])
def test_fit_attack_shapes(rng, adaptive, expected_m):
    prot = rng.uniform(size=(6, 3, 8, 8)).astype(np.float32)
    unprot = rng.uniform(size=(10, 3, 8, 8)).astype(np.float32)
    out = fit_attack(prot, unprot, adaptive=adaptive, cfg=QUICK, seed=1)
    assert out.shape == (expected_m, 3, 8, 8) and np.all(np.isfinite(out))


def test_fit_attack_requires_images(rng):
    with pytest.raises(ConfigError):
        fit_attack(np.zeros((0, 3, 8, 8)), rng.uniform(size=(2, 3, 8, 8)), cfg=QUICK)


def test_attack_objective_decreases(rng):
    from padl.manipulator import make_toy_images

    prot = make_toy_images(4, rng, 8, 8)
    unprot = make_toy_images(8, rng, 8, 8)
    trace = []
    fit_attack(prot, unprot, cfg=AttackConfig(steps=80, batch_size=4, learning_rate=1e-2), seed=3, trace=trace)
    assert len(trace) == 80
    assert np.mean(trace[-10:]) < np.mean(trace[:10])


def test_attack_recovers_planted_template_above_chance():
    from padl.manipulator import make_toy_images

    template = np.tanh(np.random.default_rng(0).normal(size=(3, 16, 16))).astype(np.float32)
    prot = make_toy_images(16, np.random.default_rng(10), 16, 16) + 0.03 * template
    unprot = make_toy_images(32, np.random.default_rng(50), 16, 16)
    rev = fit_attack(prot, unprot, cfg=AttackConfig(steps=150, batch_size=8), seed=0)[0]
    # an unrelated direction in 768 dims has |cos| around 0.036
    assert cosine(rev, template) > 0.12


def test_scale_to_strength(rng):
    d = rng.normal(size=(3, 3, 4, 4))
    s = scale_to_strength(d, 0.03)
    np.testing.assert_allclose(np.abs(s).reshape(3, -1).max(1), 0.03, rtol=1e-6)
    assert np.all(np.sign(s) == np.sign(d))


def test_evaluate_attack_reports_best_perturbation():
    fresh = np.full((4, 3, 2, 2), 0.5, dtype=np.float32)
    deltas = np.stack([np.full((3, 2, 2), -1.0), np.full((3, 2, 2), 1.0)]).astype(np.float32)
    detect = lambda imgs: imgs.mean(axis=(1, 2, 3)) > 0.5  # noqa: E731
    assert evaluate_attack(deltas, fresh, detect, strength=0.03) == 1.0
    assert evaluate_attack(deltas[:1], fresh, detect, strength=0.03) == 0.0


def test_sweep_rows_and_schema(rng):
    victim = rng.uniform(size=(16, 3, 8, 8)).astype(np.float32)
    attacker = rng.uniform(size=(8, 3, 8, 8)).astype(np.float32)
    fresh = rng.uniform(size=(5, 3, 8, 8)).astype(np.float32)
    protect = lambda x: x + 0.01  # noqa: E731
    detect = lambda x: np.zeros(len(x), dtype=bool)  # noqa: E731
    rows = attack_sweep(protect, detect, victim, attacker, fresh, ks=(4, 8), cfg=QUICK, seed=0,
                        true_perturbations=np.full((1, 3, 8, 8), 0.01))
    assert [r.K for r in rows] == [4, 8] and all(len(r.rates) == 2 for r in rows)
    report = attack_report(rows, defender="test", adaptive=False, trials=2)
    jsonschema.validate(report, ATTACK_REPORT_SCHEMA)
    with pytest.raises(ConfigError):
        attack_sweep(protect, detect, victim, attacker, fresh, ks=(32,), cfg=QUICK)


def test_default_trials():
    assert AttackConfig().trials == 10


def test_baseline_uses_its_templates(tiny_config, toy_batch):
    model = FixedPerturbationBaseline(tiny_config, num_perturbations=3, seed=0)
    d = model.perturbations(toy_batch)
    templates = model.encoder.templates()
    for row in d:
        assert any(np.allclose(row, t) for t in templates)
    with pytest.raises(ConfigError):
        FixedPerturbationBaseline(tiny_config, num_perturbations=2)


def test_baseline_config_disables_div_and_noise():
    c = baseline_train_config(TrainConfig(iterations=3), batch_size=4)
    assert not c.use_div and c.noise_prob == 0.0 and c.batch_size == 4
