"""Matplotlib figures for evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .manipulator import random_manipulation_spec, toy_manipulate  # noqa: E402


def render_eval_plots(model, images: np.ndarray, report, out_dir: Path, seed: int = 0, examples: int = 4) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    sweep = report.extra.get("noise_sweep")
    if sweep:
        sig = sorted(float(s) for s in sweep)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(sig, [sweep[str(s)] for s in sig], "o-")
        ax.set_xlabel("noise sigma")
        ax.set_ylabel("raw images called protected")
        ax.set_ylim(0, 1)
        fig.tight_layout()
        path = out_dir / "noise_sweep.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

    rng = np.random.default_rng(seed)
    k = min(examples, len(images))
    x = images[:k]
    prot = model.protect_images(x)
    H, W = x.shape[2:]
    edited = toy_manipulate(prot, [random_manipulation_spec(rng, H, W) for _ in range(k)])
    det = model.detect(edited)
    fig, axes = plt.subplots(k, 3, figsize=(6, 2 * k), squeeze=False)
    for i in range(k):
        for j, (img, title) in enumerate(((x[i], "original"), (edited[i], "edited"), (None, "map"))):
            ax = axes[i, j]
            if img is None:
                ax.imshow(det.map[i, 0], cmap="gray", vmin=0, vmax=1)
                title = f"map (p={det.score[i]:.2f})"
            else:
                ax.imshow(np.clip(img.transpose(1, 2, 0), 0, 1))
            ax.set_title(title, fontsize=8)
            ax.axis("off")
    fig.tight_layout()
    path = out_dir / "localization_examples.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    written.append(path)
    return written
