"""End-to-end acceptance checks.

The trained models are cached under ``tests/.acceptance_cache`` (or
``$PADL_ACCEPTANCE_CACHE``) keyed by their training config, so only the first
run pays for training. Every test prints one PASS/FAIL line.
"""

import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import hand_pooled, pairwise_auc
from padl import autodiff as ad
from padl.attack import AttackConfig, FixedPerturbationBaseline, attack_sweep, baseline_train_config
from padl.autodiff import Tensor
from padl.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from padl.evaluation import (ConditionedSample, conditioned_maps, conditioned_protocol, noise_robustness_sweep,
                             pixel_auc, protection_quality, rank_auc)
from padl.imageio import load_image, save_png
from padl.losses import attack_loss, l_bce, l_div, l_map, l_rec, mean_clamped_cosine
from padl.manipulator import make_toy_images, random_manipulation_spec, toy_manipulate
from padl.model import PADL, ModelConfig, named_tensors
from padl.training import TrainConfig, Trainer

CACHE = Path(os.environ.get("PADL_ACCEPTANCE_CACHE", Path(__file__).parent / ".acceptance_cache"))

MODEL = ModelConfig()
PADL_TRAIN = TrainConfig.desk(seed=0)
NO_DIV_TRAIN = replace(PADL_TRAIN, use_div=False)
BASELINE_TRAIN = baseline_train_config(PADL_TRAIN)
ATTACK = AttackConfig(steps=150, batch_size=8, trials=10)
KS = (4, 8, 16, 32, 64)
SIGMAS = (0.01, 0.02, 0.05, 0.1)


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")


def held_out(n: int, seed: int) -> np.ndarray:
    # far from the training stream, which draws from seed PADL_TRAIN.seed
    return make_toy_images(n, np.random.default_rng(10_000 + seed), MODEL.image_height, MODEL.image_width)


def _trained(name: str, build, cfg: TrainConfig):
    CACHE.mkdir(parents=True, exist_ok=True)
    path = CACHE / f"{name}.ckpt"
    if path.exists():
        model, meta = load_checkpoint(path, expected_config=MODEL)
        if meta.get("train_config") == cfg.to_dict():
            return model, meta
    model = build()
    start = time.process_time()
    trainer = Trainer(model, cfg)
    trainer.run()
    meta = {"train_config": cfg.to_dict(), "cpu_seconds": time.process_time() - start,
            "loss_tail": [h.to_dict() for h in trainer.history[-20:]]}
    save_checkpoint(path, model, meta)
    return model, meta


@pytest.fixture(scope="module")
def padl_model():
    return _trained("padl", lambda: PADL(MODEL, seed=PADL_TRAIN.seed), PADL_TRAIN)


@pytest.fixture(scope="module")
def no_div_model():
    return _trained("padl_no_div", lambda: PADL(MODEL, seed=NO_DIV_TRAIN.seed), NO_DIV_TRAIN)


@pytest.fixture(scope="module")
def baseline_model():
    return _trained("baseline", lambda: FixedPerturbationBaseline(MODEL, 1, seed=BASELINE_TRAIN.seed),
                    BASELINE_TRAIN)


# ---------------------------------------------------------------- criterion 1
def _grad_cases():
    def side(seed, *shape):
        return np.random.default_rng(seed + 777).normal(size=shape)

    return [
        ("tanh", (5,), lambda t, s: ad.sum_(ad.tanh(t) * Tensor(side(s, 5)))),
        ("sigmoid", (5,), lambda t, s: ad.sum_(ad.sigmoid(t) * Tensor(side(s, 5)))),
        ("gelu", (5,), lambda t, s: ad.sum_(ad.gelu(t) * Tensor(side(s, 5)))),
        ("exp_log_sqrt", (5,), lambda t, s: ad.sum_(ad.log(ad.sqrt(ad.exp(t) + 1.0)))),
        ("div", (5,), lambda t, s: ad.sum_(Tensor(side(s, 5)) / (ad.square(t) + 1.0))),
        ("abs_relu_clamp", (6,), lambda t, s: ad.sum_((ad.abs_(t) + ad.relu(t) + ad.clamp_min(t, 0.0))
                                                      * Tensor(side(s, 6)))),
        ("matmul", (3, 4), lambda t, s: ad.sum_(ad.square(ad.matmul(t, Tensor(side(s, 4, 2)))))),
        ("linear", (3, 4), lambda t, s: ad.sum_(ad.tanh(ad.linear(t, Tensor(side(s, 4, 2)), Tensor(side(s, 2)))))),
        ("softmax", (2, 4), lambda t, s: ad.sum_(ad.softmax(t) * Tensor(side(s, 2, 4)))),
        ("log_softmax", (2, 4), lambda t, s: ad.sum_(ad.log_softmax(t) * Tensor(side(s, 2, 4)))),
        ("layer_norm", (2, 5), lambda t, s: ad.sum_(ad.layer_norm(t) * Tensor(side(s, 2, 5)))),
        ("shape_ops", (2, 6), lambda t, s: ad.sum_(ad.concat([t.reshape(3, 4).T, t[:, :4].T], axis=1)
                                                   * Tensor(side(s, 4, 5)))),
        ("stack_mean", (2, 3), lambda t, s: ad.sum_(ad.square(ad.mean(ad.stack([t, t * t]), axis=0)))),
        ("l2_cosine", (3, 4), lambda t, s: ad.sum_(ad.l2_norm(t, axis=1))
         + ad.sum_(ad.cosine_similarity(t, Tensor(side(s, 3, 4))))),
        ("conv2d", (1, 2, 5, 5), lambda t, s: ad.sum_(ad.square(ad.conv2d(t, Tensor(side(s, 2, 2, 3, 3)), padding=1)))),
        ("l_rec", (2, 3, 4, 4), lambda t, s: l_rec(t, Tensor(side(s, 2, 3, 4, 4)))),
        ("l_map", (2, 1, 4, 4), lambda t, s: l_map(Tensor(np.abs(side(s, 2, 1, 4, 4))), ad.sigmoid(t))),
        ("l_div", (4, 3, 2, 2), lambda t, s: l_div(t)),
        ("l_bce", (4, 1), lambda t, s: l_bce(t, (side(s, 4, 1) > 0).astype(float))),
        ("attack", (1, 3, 4, 4), lambda t, s: attack_loss(t, Tensor(side(s, 3, 3, 4, 4)),
                                                          Tensor(side(s + 1, 2, 3, 4, 4)))),
    ]


def test_criterion_1_gradient_integrity(capsys):
    start = time.perf_counter()
    worst = {}
    with ad.precision(np.float64):
        for name, shape, fn in _grad_cases():
            for seed in range(20):
                x = np.random.default_rng(seed).normal(size=shape)
                x = np.where(np.abs(x) < 0.1, 0.1 * np.sign(x + 1e-12), x)
                err = ad.grad_check(lambda t: fn(t, seed), x, eps=1e-5)
                worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) <= 1e-3 and elapsed <= 60
    verdict(capsys, 1, ok, f"{len(worst)} ops/losses x 20 seeds, worst rel err {worst[top]:.1e} ({top}), "
                           f"{elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 2
@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (3, 3, 32, 32), elements=st.floats(-3, 3, width=32)), st.integers(0, 1000))
def test_criterion_2_bounds_random_weights(x, seed):
    model = PADL(MODEL, seed=seed)
    d = model.perturbations(x)
    tau = model.protect_images(x)
    assert np.abs(d).max() <= 1.0
    assert np.abs(tau - x).max() <= MODEL.alpha
    assert protection_quality(x, tau) <= MODEL.alpha ** 2


@pytest.mark.slow
def test_criterion_2_bounds_trained(capsys, padl_model):
    model, _ = padl_model
    x = held_out(200, 2)
    d = model.perturbations(x)
    tau = model.protect_images(x)
    linf = float(np.abs(tau - x).max())
    mse = protection_quality(x, tau)
    ok = np.abs(d).max() <= 1.0 and linf <= MODEL.alpha and mse <= MODEL.alpha ** 2
    verdict(capsys, 2, ok, f"max|delta|={np.abs(d).max():.4f}, max|tau-x|={linf:.4f} <= {MODEL.alpha}, "
                           f"MSE={mse:.2e} <= {MODEL.alpha ** 2:.0e} (random-weight models checked by hypothesis)")
    assert ok


# ---------------------------------------------------------------- criterion 3
def test_criterion_3_metric_oracles(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    cases = 0
    for _ in range(20):
        n = int(rng.integers(2, 101))
        scores = np.round(rng.uniform(size=n), 1)
        labels = rng.integers(0, 2, size=n)
        mismatches += rank_auc(scores, labels) != pairwise_auc(scores, labels)
        cases += 1
    for _ in range(10):
        gt = rng.uniform(size=(4, 1, 15, 15))  # 900 pixels
        pred = np.round(rng.uniform(size=gt.shape), 2)
        for t in (0.1, 0.25, 0.5):
            mismatches += pixel_auc(gt, pred, t) != pairwise_auc(pred, gt >= t)
            cases += 1
    for _ in range(5):
        samples = [ConditionedSample(bool(rng.integers(0, 2)), bool(rng.integers(0, 2)),
                                     rng.uniform(size=(1, 5, 5)), np.round(rng.uniform(size=(1, 5, 5)), 2))
                   for _ in range(int(rng.integers(4, 30)))]
        got = conditioned_protocol(samples)
        for t, v in got.items():
            ref, _ = hand_pooled([(s.is_manipulated_gt, s.detected_manipulated, s.gt_map, s.pred_map)
                                  for s in samples], t)
            mismatches += v != ref
            cases += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed <= 60
    verdict(capsys, 3, ok, f"{cases} metric cases vs O(n^2) oracles, {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 4
def _three_class(model, x, seed):
    rng = np.random.default_rng(seed)
    tau = model.protect_images(x)
    edited = toy_manipulate(tau, [random_manipulation_spec(rng, 32, 32) for _ in x])
    p = model.detect(tau).protected_intact
    r = model.detect(x).protected_intact
    m = model.detect(edited).protected_intact
    return tau, edited, float(np.mean(p)), float(np.mean(~r)), float(np.mean(~m))


def _cos_rows(a, b):
    a = a.reshape(len(a), -1).astype(np.float64)
    b = b.reshape(len(b), -1).astype(np.float64)
    return np.sum(a * b, 1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


@pytest.mark.slow
def test_criterion_4_toy_detection(capsys, padl_model):
    model, meta = padl_model
    x = held_out(200, 4)
    tau, edited, prot, raw, man = _three_class(model, x, 4)
    acc = (prot + raw + man) / 3
    with ad.no_grad():
        dd = model.decode_perturbation(Tensor(tau)).data
        de = model.decode_perturbation(Tensor(edited)).data
    delta = model.perturbations(x)
    rec = float(np.mean(_cos_rows(delta, dd)))
    rec_edited = float(np.mean(_cos_rows(delta, de)))
    minutes = meta["cpu_seconds"] / 60
    ok = acc >= 0.95 and rec >= 0.9 and minutes <= 30
    verdict(capsys, 4, ok, f"accuracy {acc:.3f} (protected kept {prot:.3f}, raw rejected {raw:.3f}, "
                           f"edited rejected {man:.3f}); reconstruction cosine {rec:.3f} "
                           f"(edited {rec_edited:.3f}); training {minutes:.1f} CPU-min")
    assert ok


# ---------------------------------------------------------------- criterion 5
@pytest.mark.slow
def test_criterion_5_diversity(capsys, padl_model, no_div_model):
    x = held_out(64, 5)
    with_div = mean_clamped_cosine(padl_model[0].perturbations(x))
    without = mean_clamped_cosine(no_div_model[0].perturbations(x))
    ok = with_div <= 0.3 and without >= 0.9
    verdict(capsys, 5, ok, f"mean clamped cosine over 64 images: {with_div:.3f} with L_div (<= 0.3), "
                           f"{without:.3f} without (>= 0.9)")
    assert ok


# ---------------------------------------------------------------- criterion 6
@pytest.mark.slow
def test_criterion_6_attack_asymmetry(capsys, padl_model, baseline_model):
    start = time.process_time()
    victims, attacker, fresh = held_out(128, 61), held_out(64, 62), held_out(64, 63)
    results = {}
    for label, model, adaptive in (("baseline", baseline_model[0], False), ("padl", padl_model[0], False),
                                   ("padl_adaptive", padl_model[0], True)):
        detect = lambda imgs, m=model: m.detect(imgs).protected_intact  # noqa: E731
        rows = attack_sweep(model.protect_images, detect, victims, attacker, fresh, ks=KS, adaptive=adaptive,
                            cfg=ATTACK, seed=6)
        results[label] = [r.mean for r in rows]
    minutes = (time.process_time() - start) / 60
    base, pad, ada = (np.array(results[k]) for k in ("baseline", "padl", "padl_adaptive"))
    gap = base - np.maximum(pad, ada)
    ok = base.min() >= 0.85 and pad.max() <= 0.15 and ada.max() <= 0.15 and gap.min() >= 0.5 and minutes <= 45
    fmt = lambda v: "/".join(f"{r:.2f}" for r in v)  # noqa: E731
    verdict(capsys, 6, ok, f"fooled rate per K={KS}: baseline {fmt(base)}, PADL {fmt(pad)}, "
                           f"adaptive {fmt(ada)}; min gap {gap.min():.2f}; {minutes:.1f} CPU-min "
                           f"({ATTACK.steps} steps/fit)")
    assert ok


# ---------------------------------------------------------------- criterion 7
@pytest.mark.slow
def test_criterion_7_noise_robustness(capsys, padl_model, baseline_model):
    x = held_out(200, 7)
    padl_rates = noise_robustness_sweep(padl_model[0], x, SIGMAS, seed=7)
    base_rates = noise_robustness_sweep(baseline_model[0], x, SIGMAS, seed=7)
    ok = max(padl_rates.values()) <= 0.10 and max(base_rates.values()) > 0.5
    fmt = lambda d: ", ".join(f"{s}:{r:.2f}" for s, r in d.items())  # noqa: E731
    verdict(capsys, 7, ok, f"noisy raw images called protected - PADL {fmt(padl_rates)}; "
                           f"baseline {fmt(base_rates)}")
    assert ok


# ---------------------------------------------------------------- criterion 8
def test_criterion_8_conditioned_degeneracies(capsys):
    gt = [np.array([[[0.9, 0.0], [0.3, 0.6]]]), np.array([[[0.0, 0.7], [0.2, 0.0]]]),
          np.array([[[0.0, 0.4], [0.0, 0.0]]]), np.array([[[0.5, 0.0], [0.0, 0.0]]])]
    pred = [np.array([[[0.8, 0.1], [0.4, 0.5]]]), np.array([[[0.3, 0.6], [0.2, 0.1]]]),
            np.array([[[0.7, 0.2], [0.6, 0.3]]]), np.array([[[0.25, 0.75], [0.5, 0.05]]])]
    flags = [(True, True), (True, False), (False, True), (False, False)]
    samples = [ConditionedSample(m, d, g, p) for (m, d), g, p in zip(flags, gt, pred)]
    g, p = conditioned_maps(samples)
    checks = {
        "missed -> zero pred": np.array_equal(p[1], np.zeros_like(pred[1])),
        "missed keeps gt": np.array_equal(g[1], gt[1].astype(np.float32)),
        "false alarm keeps raw map": np.array_equal(p[2], pred[2].astype(np.float32)),
        "false alarm zero gt": not g[2].any(),
        "clean correct all zero": not g[3].any() and not p[3].any(),
        "detected unchanged": np.array_equal(p[0], pred[0].astype(np.float32)),
        "pixel count": g.size == p.size == 4 * 4,
    }
    aucs = conditioned_protocol(samples)
    for t, v in aucs.items():
        ref, count = hand_pooled([(m, d, g_, p_) for (m, d), g_, p_ in zip(flags, gt, pred)], t)
        checks[f"auc t={t}"] = v == ref and count == 16
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict(capsys, 8, ok, f"{len(checks)} exact checks on the 4-sample case" + (f", failed: {failed}" if failed else ""))
    assert ok


# ---------------------------------------------------------------- criterion 9
@pytest.mark.slow
def test_criterion_9_determinism_and_serialization(capsys, padl_model, tmp_path):
    short = replace(PADL_TRAIN, iterations=15, degradation_p_max=1.0)
    blobs = []
    for run in range(2):
        m = PADL(MODEL, seed=short.seed)
        Trainer(m, short).run()
        save_checkpoint(tmp_path / f"run{run}.ckpt", m, {"seed": short.seed})
        blobs.append((tmp_path / f"run{run}.ckpt").read_bytes())
    identical = blobs[0] == blobs[1]

    model, _ = padl_model
    save_checkpoint(tmp_path / "trained.ckpt", model)
    back, _ = load_checkpoint(tmp_path / "trained.ckpt")
    a, b = named_tensors(model), named_tensors(back)
    bitwise = set(a) == set(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)
    read_checkpoint(tmp_path / "trained.ckpt")

    x = held_out(200, 9)
    tau = model.protect_images(x)
    reloaded = []
    for i, img in enumerate(tau):
        save_png(tmp_path / f"p{i}.png", img)
        reloaded.append(load_image(tmp_path / f"p{i}.png"))
    kept = float(np.mean(back.detect(np.stack(reloaded)).protected_intact))
    ok = identical and bitwise and kept >= 0.95
    verdict(capsys, 9, ok, f"same-seed checkpoints identical: {identical}; round trip bitwise: {bitwise}; "
                           f"protect->PNG->verify kept {kept:.3f}")
    assert ok
