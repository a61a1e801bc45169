#!/usr/bin/env python3
"""Walk through protecting images, editing them, and checking what the detector says.

    python demos/protect_and_verify.py [checkpoint] [--iterations N]

Without a checkpoint a small model is trained first (a few minutes on one core).
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from padl import PADL, ModelConfig, TrainConfig, Trainer, load_checkpoint, make_toy_images, toy_manipulate
from padl.manipulator import ManipulationSpec, ground_truth_map

parser = argparse.ArgumentParser()
parser.add_argument("checkpoint", nargs="?")
parser.add_argument("--iterations", type=int, default=400)
parser.add_argument("--out", default="demo_output")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(exist_ok=True)

# A model either comes from disk or gets a short training run on toy images.
if args.checkpoint:
    model, meta = load_checkpoint(args.checkpoint)
    print("loaded", args.checkpoint, "trained for", meta.get("iterations"), "iterations")
else:
    model = PADL(ModelConfig(), seed=0)
    trainer = Trainer(model, TrainConfig.desk(iterations=args.iterations))
    for chunk in range(args.iterations // 100):
        trainer.run(100)
        print(f"iteration {trainer.iteration:5d}  loss {np.mean([h.total for h in trainer.history[-100:]]):.3f}")

rng = np.random.default_rng(42)
x = make_toy_images(6, rng)

# Each image gets its own perturbation; the change is bounded by alpha per pixel.
protected = model.protect_images(x)
delta = model.perturbations(x)
print("max |tau(x) - x| =", np.abs(protected - x).max(), "  alpha =", model.config.alpha)
flat = delta.reshape(6, -1)
unit = flat / np.linalg.norm(flat, axis=1, keepdims=True)
cos = unit @ unit.T
print("pairwise cosine between perturbations:\n", np.round(cos, 2))

# Recolor a square in the middle of each protected image.
edit = ManipulationSpec("region_recolor", region=(8, 8, 14, 14), strength=0.9, seed=1)
edited = toy_manipulate(protected, edit)

for name, imgs in (("raw", x), ("protected", protected), ("edited", edited)):
    det = model.detect(imgs)
    print(f"{name:>9}: called protected for {det.protected_intact.sum()}/6   scores {np.round(det.score, 2)}")

det = model.detect(edited)
gt = ground_truth_map(protected, edited)
fig, axes = plt.subplots(4, 6, figsize=(12, 8))
for i in range(6):
    axes[0, i].imshow(x[i].transpose(1, 2, 0))
    axes[1, i].imshow(np.abs(delta[i]).mean(0), cmap="magma")
    axes[2, i].imshow(edited[i].clip(0, 1).transpose(1, 2, 0))
    axes[3, i].imshow(det.map[i, 0], cmap="gray", vmin=0, vmax=1)
for ax, label in zip(axes[:, 0], ["original", "|perturbation|", "edited", "predicted map"]):
    ax.set_ylabel(label)
for ax in axes.ravel():
    ax.set_xticks([])
    ax.set_yticks([])
fig.tight_layout()
fig.savefig(out / "protect_and_verify.png", dpi=90)
print("figure written to", out / "protect_and_verify.png")
inside = np.zeros((32, 32), bool)
inside[8:22, 8:22] = True
print(f"mean map inside edit {det.map[:, 0][:, inside].mean():.3f}, outside {det.map[:, 0][:, ~inside].mean():.3f}")
print("ground-truth coverage:", (gt > 0.1).mean())
