"""Desk-scale ablation orderings: collapse dichotomy, frozen random target, crop-only, predictor regimes.

    python3 scripts/orderings.py --seeds 0 1 2 --out runs/orderings

Writes results.csv (one row per run and seed) and prints a summary.
"""

import argparse
import csv
import os
import statistics

from threadpoolctl import threadpool_limits

from byol.config import apply_overrides, preset_config
from byol.evaluate import collapse_metrics, evaluate_encoder, projection_sample
from byol.grid import crop_only, wiring
from byol.trainer import Trainer, build_datasets

HARD_COPY = {"optim.tau_base": 0.0, "optim.tau_schedule": "constant"}
RUNS = {
    "byol": {},
    "no predictor, theta target": wiring(False, "theta", 0.0),
    "simclr": wiring(False, "theta", 1.0),
    "frozen random target": {"optim.tau_base": 1.0, "optim.tau_schedule": "constant"},
    "byol crop only": crop_only(),
    "simclr crop only": {**wiring(False, "theta", 1.0), **crop_only()},
    "tau=0 lambda=1": HARD_COPY,
    "tau=0 lambda=10": {**HARD_COPY, "optim.predictor_lr_mult": 10.0},
    "tau=0 closed form": {**HARD_COPY, "loss.closed_form_predictor": True},
    "no normalization": {"loss.normalization": "none"},
}


def train_and_probe(delta, seed, steps):
    cfg = preset_config("desk")
    cfg.seed = seed
    cfg.optim.total_steps = steps
    apply_overrides(cfg, delta)
    train, test = build_datasets(cfg)
    tr = Trainer(cfg, train)
    random_top1 = evaluate_encoder(tr.pair, train, test, tr.mean, tr.std, cfg.probe, seed=seed).top1
    for _ in range(steps):
        tr.train_step()
    top1 = evaluate_encoder(tr.pair, train, test, tr.mean, tr.std, cfg.probe, seed=seed).top1
    rep = collapse_metrics(projection_sample(tr, test))
    return random_top1, top1, rep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--only", nargs="*", help="subset of run names")
    ap.add_argument("--out", default="runs/orderings")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    names = args.only or list(RUNS)
    rows = []
    with threadpool_limits(1), open(os.path.join(args.out, "results.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "seed", "random_top1", "top1", "normalized_std", "effective_rank"])
        for name in names:
            for seed in args.seeds:
                r0, top1, rep = train_and_probe(RUNS[name], seed, args.steps)
                row = [name, seed, f"{r0:.4f}", f"{top1:.4f}", f"{rep.normalized_std:.4f}",
                       f"{rep.effective_rank:.2f}"]
                w.writerow(row)
                fh.flush()
                rows.append((name, top1, rep.normalized_std))
                print(*row, sep="\t", flush=True)
    print()
    for name in names:
        accs = [a for n, a, _ in rows if n == name]
        stds = [s for n, _, s in rows if n == name]
        print(f"{name:28s} median top1 {statistics.median(accs):.3f}  median std {statistics.median(stds):.4f}")


if __name__ == "__main__":
    main()
