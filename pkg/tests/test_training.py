import json
from collections import Counter

import numpy as np
import pytest

from padl.model import PADL, ConfigError, named_tensors
from padl.training import (
    DegradationScheduler,
    NumericalError,
    TrainConfig,
    Trainer,
    leave_one_out_config,
    leave_one_out_train,
)


def _cfg(**kw):
    base = dict(iterations=4, batch_size=4, learning_rate=1e-3, seed=7)
    base.update(kw)
    return TrainConfig(**base)


def test_schedule_endpoints():
    s = DegradationScheduler(0.5, 100)
    assert s.schedule(0) == (0.0, 0.25)
    p, inten = s.schedule(100)
    assert p == 0.5 and inten == 1.0
    with pytest.raises(ValueError):
        s.schedule(101)


def test_schedule_monte_carlo_frequency():
    s = DegradationScheduler(0.5, 100)
    rng = np.random.default_rng(0)
    hits = sum(s.sample(50, rng) is not None for _ in range(10_000))
    assert abs(hits / 10_000 - 0.25) <= 0.02
    assert sum(s.counts.values()) == hits and set(s.counts) == {"jpeg", "blur", "noise", "lowres"}


@pytest.mark.parametrize("bad", [dict(iterations=0), dict(batch_size=1), dict(degradation_kinds=("fog",)),
                                 dict(degradation_p_max=1.5), dict(lr_schedule="step")])
def test_invalid_train_config(bad):
    with pytest.raises(ConfigError):
        _cfg(**bad)


def test_config_dict_round_trip():
    c = _cfg(noise_sigma_range=(0.02, 0.04))
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nonsense": 1})


def test_desk_config_overrides():
    desk = TrainConfig.desk(seed=5)
    assert desk.seed == 5 and desk.lr_schedule == "cosine" and desk.batch_size == 3
    assert TrainConfig.from_dict(desk.to_dict()) == desk


def test_cosine_learning_rate(tiny_config):
    cfg = _cfg(iterations=100, learning_rate=1e-3, lr_schedule="cosine", lr_min_frac=0.1)
    tr = Trainer(PADL(tiny_config, seed=0), cfg)
    lrs = [tr.learning_rate_at(i) for i in range(101)]
    assert lrs[0] == pytest.approx(1e-3) and lrs[-1] == pytest.approx(1e-4)
    assert lrs[50] == pytest.approx(5.5e-4)
    assert np.all(np.diff(lrs) <= 0)
    flat = Trainer(PADL(tiny_config, seed=0), _cfg(iterations=100, learning_rate=1e-3))
    assert {flat.learning_rate_at(i) for i in (0, 50, 100)} == {1e-3}


def test_zero_learning_rate_and_decay_keeps_weights(tiny_config):
    model = PADL(tiny_config, seed=0)
    before = {k: v.copy() for k, v in named_tensors(model).items()}
    Trainer(model, _cfg(learning_rate=0.0)).run(1)
    for k, v in named_tensors(model).items():
        np.testing.assert_array_equal(v, before[k])


def test_step_updates_all_three_networks(tiny_config):
    model = PADL(tiny_config, seed=0)
    before = {k: v.copy() for k, v in named_tensors(model).items()}
    Trainer(model, _cfg()).run(1)
    after = named_tensors(model)
    for prefix in ("encoder.", "decoder.", "map_block."):
        assert any(not np.array_equal(before[k], after[k]) for k in before if k.startswith(prefix))


def test_training_is_deterministic(tiny_config, tmp_path):
    logs = []
    for run in range(2):
        model = PADL(tiny_config, seed=3)
        path = tmp_path / f"log{run}.jsonl"
        Trainer(model, _cfg(degradation_p_max=1.0), log_path=path).run(3)
        logs.append(path.read_bytes())
    assert logs[0] == logs[1]
    rows = [json.loads(line) for line in logs[0].splitlines()]
    assert [r["iteration"] for r in rows] == [1, 2, 3]
    assert set(rows[0]) >= {"rec", "map", "div", "bce", "total"}


def test_loss_breakdown_sums(tiny_config):
    hist = Trainer(PADL(tiny_config), _cfg()).run(2)
    for h in hist:
        assert h.total == pytest.approx(h.rec + h.map + h.div + h.bce, rel=1e-5)


def test_ablated_diversity_reports_zero(tiny_config):
    hist = Trainer(PADL(tiny_config), _cfg(use_div=False)).run(1)
    assert hist[0].div == 0.0


def test_non_finite_loss_raises(tiny_config):
    model = PADL(tiny_config)
    model.perturbation_hook = lambda d: d * float("nan")
    with pytest.raises(NumericalError):
        Trainer(model, _cfg()).run(1)


def test_checkpoint_callback_cadence(tiny_config):
    calls = []
    Trainer(PADL(tiny_config), _cfg(checkpoint_every=2), checkpoint_fn=calls.append).run(4)
    assert calls == [2, 4, 4]


def test_literal_mode_feeds_protected_image(tiny_config, monkeypatch):
    model = PADL(tiny_config)
    seen = []
    real = model.map_and_logit
    monkeypatch.setattr(model, "map_and_logit", lambda y, d: (seen.append(y.data.copy()), real(y, d))[1])
    Trainer(model, _cfg(algorithm1_literal=True)).run(1)
    B = 4
    np.testing.assert_array_equal(seen[0][:B], seen[0][B:2 * B])


def test_leave_one_out(tiny_config):
    cfg = leave_one_out_config(_cfg(), "noise")
    assert "noise" not in cfg.degradation_kinds and len(cfg.degradation_kinds) == 3
    assert len(leave_one_out_config(_cfg(), None).degradation_kinds) == 4
    with pytest.raises(ConfigError):
        leave_one_out_config(_cfg(), "fog")
    _, trainer, meta = leave_one_out_train("noise", tiny_config, _cfg(iterations=6, degradation_p_max=1.0))
    assert meta["excluded_degradation"] == "noise"
    assert "noise" not in trainer.scheduler.counts and sum(trainer.scheduler.counts.values()) > 0


@pytest.mark.slow
def test_short_run_reduces_loss(tiny_config):
    hist = Trainer(PADL(tiny_config), _cfg(iterations=150, batch_size=6, learning_rate=3e-4)).run()
    first = np.mean([h.total for h in hist[:20]])
    last = np.mean([h.total for h in hist[-20:]])
    assert last < first


def test_no_gradient_reaches_manipulator_or_degradation_inputs(tiny_config, monkeypatch):
    import padl.training as tr

    seen = []
    real_manip, real_degrade = tr.toy_manipulate, tr.degrade
    monkeypatch.setattr(tr, "toy_manipulate", lambda x, s: (seen.append(x), real_manip(x, s))[1])
    monkeypatch.setattr(tr, "degrade", lambda x, s, r=None: (seen.append(x), real_degrade(x, s, r))[1])
    Trainer(PADL(tiny_config), _cfg(degradation_p_max=1.0)).run(2)
    assert seen and all(isinstance(x, np.ndarray) for x in seen)
