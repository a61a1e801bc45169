#!/usr/bin/env python3
"""Can an attacker forge "protected" status from a handful of protected images?

    python demos/reverse_engineering.py padl.ckpt baseline.ckpt [--steps 150] [--trials 2]

The attacker only sees K protected images and a pool of unrelated clean
images, fits a perturbation estimate, pastes it on fresh images, and asks the
detector. A defense that reuses one fixed perturbation is easy to copy; an
image-specific one should not be.
"""

import argparse

import numpy as np

from padl import load_checkpoint, make_toy_images
from padl.attack import AttackConfig, attack_sweep

parser = argparse.ArgumentParser()
parser.add_argument("padl")
parser.add_argument("baseline")
parser.add_argument("--steps", type=int, default=150)
parser.add_argument("--trials", type=int, default=2)
parser.add_argument("--ks", default="4,16,64")
args = parser.parse_args()
ks = [int(k) for k in args.ks.split(",")]

rng = np.random.default_rng(7)
victims = make_toy_images(128, rng)
attacker_pool = make_toy_images(64, rng)
fresh = make_toy_images(64, rng)
cfg = AttackConfig(steps=args.steps, trials=args.trials, batch_size=8)

for path in (args.baseline, args.padl):
    model, _ = load_checkpoint(path)
    detect = lambda imgs, m=model: m.detect(imgs).protected_intact  # noqa: E731
    print(f"\n{path}: fresh images called protected before the attack: {detect(fresh).mean():.2f}")
    for adaptive in (False, True):
        rows = attack_sweep(model.protect_images, detect, victims, attacker_pool, fresh, ks=ks,
                            adaptive=adaptive, cfg=cfg, seed=0)
        label = "adaptive" if adaptive else "base    "
        print(f"  {label}: " + "  ".join(f"K={r.K}: {r.mean:.2f}±{r.std:.2f}" for r in rows))
