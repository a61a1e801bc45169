"""``padl`` command line: train, protect, verify, eval, attack.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import ConfigError

log = logging.getLogger("padl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _set_deterministic(flag: bool) -> None:
    if not flag:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # single-threaded BLAS assumed
        return
    threadpool_limits(1)


def _load_images(path: str, height: int, width: int) -> tuple[list[Path], np.ndarray]:
    from .imageio import load_image

    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in {".png", ".jpg", ".jpeg"})
    else:
        files = [p]
    if not files:
        raise UsageError(f"no images found at {path}")
    try:
        arr = np.stack([load_image(f, height, width) for f in files])
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image: {exc}") from exc
    return files, arr


# ------------------------------------------------------------------ commands
def cmd_train(args) -> int:
    from .config import load_run_config
    from .manipulator import FolderDataset
    from .model import PADL
    from .training import NumericalError, Trainer, TrainConfig

    try:
        rc = load_run_config(args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    train_cfg = rc.train
    if args.seed is not None:
        d = train_cfg.to_dict()
        d["seed"] = args.seed
        train_cfg = TrainConfig.from_dict(d)
    if args.iterations is not None:
        d = train_cfg.to_dict()
        d["iterations"] = args.iterations
        train_cfg = TrainConfig.from_dict(d)
    mc = rc.model
    dataset = FolderDataset(rc.data_folder, mc.image_height, mc.image_width, train_cfg.seed) if rc.data_folder else None
    model = PADL(mc, seed=train_cfg.seed)
    ckpt = args.out or rc.checkpoint

    def write(iteration: int) -> None:
        tail = [h.to_dict() for h in trainer.history[-10:]]
        save_checkpoint(ckpt, model, {"iterations": iteration, "seed": train_cfg.seed,
                                      "train_config": train_cfg.to_dict(), "loss_tail": tail})

    trainer = Trainer(model, train_cfg, dataset=dataset, log_path=rc.log, checkpoint_fn=write)
    try:
        trainer.run(progress=True)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({"checkpoint": str(ckpt), "log": rc.log, "iterations": trainer.iteration,
                      "final_loss": trainer.history[-1].to_dict()}))
    return EXIT_OK


def cmd_protect(args) -> int:
    from .evaluation import protection_quality
    from .imageio import quantize, save_png

    model, _ = load_checkpoint(args.checkpoint)
    mc = model.config
    files, x = _load_images(args.input, mc.image_height, mc.image_width)
    protected = model.protect_images(x)
    out = Path(args.output)
    multi = len(files) > 1 or out.is_dir()
    if multi:
        out.mkdir(parents=True, exist_ok=True)
    results = []
    for f, xi, pi in zip(files, x, protected):
        target = out / (f.stem + ".png") if multi else out
        save_png(target, pi)
        exported = quantize(pi).astype(np.float32) / 255.0
        results.append({"input": str(f), "output": str(target),
                        "max_abs_delta": float(np.abs(pi - xi).max()),
                        "mse": protection_quality(xi, exported)})
    print(json.dumps(results if multi else results[0]))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .imageio import save_map_png

    model, _ = load_checkpoint(args.checkpoint)
    mc = model.config
    files, y = _load_images(args.input, mc.image_height, mc.image_width)
    det = model.detect(y)
    results = []
    for i, f in enumerate(files):
        entry = {"input": str(f), "protected_intact": bool(det.protected_intact[i]), "score": float(det.score[i])}
        if args.emit_map:
            mp = Path(args.emit_map)
            target = mp / (f.stem + "_map.png") if len(files) > 1 else mp
            target.parent.mkdir(parents=True, exist_ok=True)
            save_map_png(target, det.map[i])
            entry["map_path"] = str(target)
        results.append(entry)
    payload = results if len(results) > 1 else results[0]
    if args.json:
        print(json.dumps(payload))
    else:
        for r in results:
            verdict = "PROTECTED (intact)" if r["protected_intact"] else "NOT PROTECTED / MANIPULATED"
            print(f"{r['input']}: {verdict} score={r['score']:.4f}")
    return EXIT_OK


def _eval_images(spec: str, height: int, width: int, seed: int) -> np.ndarray:
    from .manipulator import make_toy_images

    if spec.startswith("toy:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError as exc:
            raise UsageError(f"bad dataset spec {spec!r}") from exc
        if n <= 0:
            raise UsageError("empty dataset")
        return make_toy_images(n, np.random.default_rng(seed + 50_000), height, width)
    _, arr = _load_images(spec, height, width)
    return arr


def cmd_eval(args) -> int:
    from .evaluation import evaluate_model, noise_robustness_sweep

    model, _ = load_checkpoint(args.checkpoint)
    mc = model.config
    seed = args.seed or 0
    images = _eval_images(args.dataset, mc.image_height, mc.image_width, seed)
    report = evaluate_model(model, images, seed=seed)
    sigmas = [float(s) for s in args.sigmas.split(",")] if args.sigmas else []
    if sigmas:
        report.extra["noise_sweep"] = {str(k): v for k, v in noise_robustness_sweep(model, images, sigmas, seed).items()}
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    if args.plots:
        from .plots import render_eval_plots

        render_eval_plots(model, images, report, Path(args.plots), seed)
    print(text)
    return EXIT_OK


def cmd_attack(args) -> int:
    import jsonschema

    from .attack import ATTACK_REPORT_SCHEMA, AttackConfig, attack_report, attack_sweep, to_json
    from .manipulator import make_toy_images

    model, _ = load_checkpoint(args.defender)
    mc = model.config
    seed = args.seed or 0
    try:
        ks = [int(k) for k in args.k.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --k list {args.k!r}") from exc
    rng_v, rng_a, rng_f = (np.random.default_rng(seed + o) for o in (1000, 2000, 3000))
    victim = make_toy_images(max(ks) * 2, rng_v, mc.image_height, mc.image_width)
    attacker = make_toy_images(args.pool, rng_a, mc.image_height, mc.image_width)
    fresh = make_toy_images(args.fresh, rng_f, mc.image_height, mc.image_width)
    cfg = AttackConfig(steps=args.steps, trials=args.trials, learning_rate=args.lr)
    rows = attack_sweep(model.protect_images, lambda imgs: model.detect(imgs).protected_intact,
                        victim, attacker, fresh, ks=ks, adaptive=args.adaptive, cfg=cfg, seed=seed)
    from .checkpoint import model_kind

    report = attack_report(rows, defender=model_kind(model)[0], adaptive=bool(args.adaptive),
                           trials=args.trials, steps=args.steps)
    jsonschema.validate(report, ATTACK_REPORT_SCHEMA)
    text = to_json(report)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="padl", description="Image-specific proactive manipulation defense")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true", help="pin BLAS to one thread")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("train", help="train a model from a config file"))
    p.add_argument("config")
    p.add_argument("--out", help="checkpoint path (overrides output.checkpoint)")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("protect", help="embed the protective perturbation"))
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_protect)

    p = common(sub.add_parser("verify", help="detect manipulation / missing protection"))
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--emit-map", dest="emit_map")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = common(sub.add_parser("eval", help="detection + conditioned localization report"))
    p.add_argument("checkpoint")
    p.add_argument("dataset", help="toy:N or a folder of images")
    p.add_argument("--out")
    p.add_argument("--plots")
    p.add_argument("--sigmas", default="0,0.01,0.02,0.05,0.1")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("attack", help="black-box reverse-engineering attack sweep"))
    p.add_argument("defender")
    p.add_argument("--k", default="4,8,16,32,64")
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--pool", type=int, default=128, help="unprotected attacker images")
    p.add_argument("--fresh", type=int, default=128, help="fresh images to forge")
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _set_deterministic(args.deterministic)
    try:
        return args.func(args)
    except (UsageError, CheckpointError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
