"""Command line entry point: train, probe, grid, inspect-checkpoint, augment-preview."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from .optim import PRESETS


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one field")
    common.add_argument("--preset", choices=sorted(PRESETS), help="optimizer preset")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="BLAS threads (1 gives bit-reproducible runs)")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="byol")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write checkpoints + metrics")
    pr = sub.add_parser("probe", parents=[common], help="linear probe of an encoder checkpoint")
    pr.add_argument("checkpoint", nargs="?", help="checkpoint from `train` (omit for a random encoder)")
    g = sub.add_parser("grid", parents=[common], help="run an ablation grid")
    g.add_argument("name", help="one of: " + ", ".join(_grid_names()))
    g.add_argument("--seeds", type=int, nargs="+", default=[0])
    ic = sub.add_parser("inspect-checkpoint", parents=[common], help="list arrays and parameter count")
    ic.add_argument("checkpoint", nargs="?", help="checkpoint path (omit for a fresh initialisation)")
    ap = sub.add_parser("augment-preview", parents=[common], help="write augmented view pairs as PPM images")
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--scale", type=int, default=4, help="nearest-neighbour upscaling factor")
    return p


def _grid_names():
    from .grid import GRIDS
    return sorted(GRIDS)


def build_config(args) -> config_mod.RunConfig:
    """Preset, then config file, then --set overrides, then --seed/--threads/--out."""
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
        base = config_mod.preset_config(args.preset) if args.preset else None
        cfg = config_mod.from_text(text, base)
    else:
        cfg = config_mod.preset_config(args.preset or "desk")
    cfg = config_mod.apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.train.threads = args.threads
    if args.out:
        cfg.train.output_dir = args.out
    return config_mod.validate(cfg)


def _limit_threads(n: int):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, n))


def cmd_train(cfg) -> int:
    from .trainer import run
    out = run(cfg)
    config_mod.save(cfg, os.path.join(cfg.train.output_dir, "config.txt"))
    print(f"checkpoint {out['checkpoint']}")
    print(f"metrics {out['metrics']}")
    return 0


def _pair_from_checkpoint(cfg, path):
    from .model import NetworkPair, load_checkpoint
    pair = NetworkPair(cfg.arch, seed=cfg.seed, predictor=cfg.loss.needs_mlp_predictor)
    if path:
        arrays, text, _ = load_checkpoint(path)
        if text:
            cfg = config_mod.from_text(text)
            pair = NetworkPair(cfg.arch, seed=cfg.seed, predictor=cfg.loss.needs_mlp_predictor)
        pair.load_state_arrays(arrays)
    return cfg, pair


def cmd_probe(cfg, checkpoint) -> int:
    from .evaluate import collapse_metrics, evaluate_encoder, extract_representations
    from .trainer import build_datasets
    cfg, pair = _pair_from_checkpoint(cfg, checkpoint)
    train, test = build_datasets(cfg)
    mean, std = (list(cfg.dataset.mean), list(cfg.dataset.std)) if cfg.dataset.mean else train.channel_stats()
    res = evaluate_encoder(pair, train, test, mean, std, cfg.probe, seed=cfg.seed)
    report = collapse_metrics(extract_representations(pair, test.images[:512], mean, std))
    os.makedirs(cfg.train.output_dir, exist_ok=True)
    with open(os.path.join(cfg.train.output_dir, "probe.txt"), "w") as fh:
        fh.write(res.to_text())
    with open(os.path.join(cfg.train.output_dir, "collapse.txt"), "w") as fh:
        fh.write(report.to_text())
    print(res.to_text(), end="")
    print(report.to_text(), end="")
    return 0


def cmd_grid(cfg, name, seeds) -> int:
    from .grid import GRIDS, run_grid, to_csv, to_table
    if name not in GRIDS:
        print(f"unknown grid {name!r}; choose from {', '.join(sorted(GRIDS))}", file=sys.stderr)
        return 2
    rows = run_grid(GRIDS[name](), cfg, seeds)
    os.makedirs(cfg.train.output_dir, exist_ok=True)
    with open(os.path.join(cfg.train.output_dir, "results.csv"), "w") as fh:
        fh.write(to_csv(rows))
    table = to_table(rows)
    with open(os.path.join(cfg.train.output_dir, "results.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return 1 if any(r.error for r in rows) else 0


def cmd_inspect(cfg, checkpoint) -> int:
    from .model import load_checkpoint
    if checkpoint:
        arrays, text, step = load_checkpoint(checkpoint)
        print(f"step {step}")
        if text:
            cfg = config_mod.from_text(text)
    else:
        from .model import NetworkPair
        pair = NetworkPair(cfg.arch, seed=cfg.seed, predictor=cfg.loss.needs_mlp_predictor)
        arrays = pair.state_arrays()
        print("step 0 (fresh initialisation)")
    online = 0
    for k, v in arrays.items():
        print(f"{k} {v.dtype} {list(v.shape)}")
        if k.startswith("online/"):
            online += v.size
    print(f"online parameters {online}")
    print(f"expected from architecture {cfg.arch.parameter_count(cfg.loss.needs_mlp_predictor)}")
    return 0


def _write_ppm(path, img, scale):
    hwc = np.clip(np.round(img.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    hwc = hwc.repeat(scale, axis=0).repeat(scale, axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P6 {hwc.shape[1]} {hwc.shape[0]} 255\n".encode())
        fh.write(hwc.tobytes())


def cmd_preview(cfg, count, scale) -> int:
    """Original | view T | view T' side by side, before normalisation."""
    from .augment import RngStream, render, sample_transform
    from .trainer import build_datasets
    train, _ = build_datasets(cfg)
    n = min(count, len(train))
    out = os.path.join(cfg.train.output_dir, "preview")
    os.makedirs(out, exist_ok=True)
    stream = RngStream(cfg.seed)
    imgs = train.images[:n]
    H, W = imgs.shape[2:]
    views = []
    for v, params in enumerate((cfg.aug1, cfg.aug2)):
        ts = [sample_transform(stream.generator(0, i, v), params, H, W) for i in range(n)]
        views.append(render(imgs, ts, params))
    from .augment import resize_crop
    for i in range(n):
        orig = resize_crop(imgs[i], (0.0, 0.0, float(H), float(W)), views[0].shape[2:])
        strip = np.concatenate([orig, views[0][i], views[1][i]], axis=2)
        _write_ppm(os.path.join(out, f"sample_{i:03d}.ppm"), strip, scale)
    print(f"wrote {n} previews to {out}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        cfg = build_config(args)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    with _limit_threads(cfg.train.threads):
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "probe":
            return cmd_probe(cfg, args.checkpoint)
        if args.command == "grid":
            return cmd_grid(cfg, args.name, args.seeds)
        if args.command == "inspect-checkpoint":
            return cmd_inspect(cfg, args.checkpoint)
        return cmd_preview(cfg, args.count, args.scale)


if __name__ == "__main__":
    sys.exit(main())
