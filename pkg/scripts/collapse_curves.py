"""Track projection spread during training for several wirings.

    python3 scripts/collapse_curves.py --steps 2000 --every 100 --out runs/curves.csv

Each row holds step, wiring, normalized std and effective rank of online
projections on held-out images, plus the running loss.
"""

import argparse
import csv

from byol.config import apply_overrides, preset_config
from byol.evaluate import collapse_metrics, projection_sample
from byol.grid import wiring
from byol.trainer import Trainer, build_datasets

WIRINGS = {
    "byol": wiring(True, "xi", 0.0),
    "no predictor, xi": wiring(False, "xi", 0.0),
    "no predictor, theta": wiring(False, "theta", 0.0),
    "simclr": wiring(False, "theta", 1.0),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--every", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="curves.csv")
    args = ap.parse_args()
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wiring", "step", "loss", "normalized_std", "effective_rank"])
        for name, delta in WIRINGS.items():
            cfg = apply_overrides(preset_config("desk"), {**delta, "optim.total_steps": args.steps})
            cfg.seed = args.seed
            train, test = build_datasets(cfg)
            tr = Trainer(cfg, train)
            for k in range(args.steps):
                m = tr.train_step()
                if k % args.every == 0 or k == args.steps - 1:
                    rep = collapse_metrics(projection_sample(tr, test))
                    w.writerow([name, k, f"{m['loss']:.5f}", f"{rep.normalized_std:.5f}",
                                f"{rep.effective_rank:.3f}"])
                    fh.flush()
            print(f"{name}: final std {rep.normalized_std:.4f} erank {rep.effective_rank:.2f}")


if __name__ == "__main__":
    main()
