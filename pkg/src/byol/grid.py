"""Ablation grids: named config deltas, run one after another, summarised as a ranked table."""

from __future__ import annotations

import copy
import csv
import io
import traceback
from dataclasses import dataclass, field

from . import config as config_mod
from .config import RunConfig

AUG_PRIMITIVES = ("crop", "flip", "jitter", "grayscale", "blur", "solarize")

# Fields a grid delta may touch. Anything else belongs in the base config.
WHITELIST = (
    "loss.family", "loss.alpha", "loss.beta", "loss.use_predictor", "loss.target_mode",
    "loss.normalization", "loss.closed_form_predictor", "loss.loss_scale",
    "optim.tau_base", "optim.tau_schedule", "optim.batch_size",
    "optim.predictor_lr_mult", "optim.projector_lr_mult",
    "arch.proj_dim", "arch.proj_hidden", "train.accumulation",
) + tuple(f"aug{v}.{p}_prob" for v in (1, 2) for p in AUG_PRIMITIVES)


@dataclass
class AblationGrid:
    rows: list[tuple[str, dict]] = field(default_factory=list)

    def __post_init__(self):
        for name, delta in self.rows:
            bad = sorted(k for k in delta if k not in WHITELIST)
            if bad:
                raise config_mod.ConfigError(f"row {name!r}: fields {bad} are not ablation axes")

    def __len__(self) -> int:
        return len(self.rows)

    def configs(self, base: RunConfig) -> list[tuple[str, RunConfig]]:
        return [(name, config_mod.apply_overrides(copy.deepcopy(base), delta)) for name, delta in self.rows]


def wiring(predictor: bool, target: str, beta: float) -> dict:
    """Delta for one (predictor, target parameters, beta) combination."""
    fam = "byol" if beta == 0 else "infonce"
    return {"loss.family": fam, "loss.use_predictor": predictor, "loss.target_mode": target, "loss.beta": beta}


# (name, predictor, target, beta), ordered from BYOL to SimCLR; "theta" rows have no target network.
BYOL_TO_SIMCLR = (
    ("byol", True, "xi", 0.0),
    ("pred+xi, beta=1", True, "xi", 1.0),
    ("xi, beta=1", False, "xi", 1.0),
    ("simclr", False, "theta", 1.0),
    ("pred+theta, beta=1", True, "theta", 1.0),
    ("pred+theta, beta=0", True, "theta", 0.0),
    ("xi, beta=0", False, "xi", 0.0),
    ("theta, beta=0", False, "theta", 0.0),
)


def byol_to_simclr_grid() -> AblationGrid:
    return AblationGrid([(n, wiring(p, t, b)) for n, p, t, b in BYOL_TO_SIMCLR])


def crop_only() -> dict:
    return {f"aug{v}.{p}_prob": 0.0 for v in (1, 2) for p in AUG_PRIMITIVES if p != "crop"}


def augmentation_grid() -> AblationGrid:
    rows = [("baseline", {})]
    for p in ("flip", "blur", "grayscale", "solarize"):
        rows.append((f"remove {p}", {f"aug{v}.{p}_prob": 0.0 for v in (1, 2)}))
    rows.append(("remove color", {f"aug{v}.{p}_prob": 0.0 for v in (1, 2) for p in ("jitter", "grayscale")}))
    rows.append(("crop only", crop_only()))
    return AblationGrid(rows)


def predictor_lr_grid(lambdas=(0.0, 1.0, 2.0, 10.0, 20.0)) -> AblationGrid:
    base = {"optim.tau_base": 0.0, "optim.tau_schedule": "constant"}
    return AblationGrid([(f"lambda={lam:g}", {**base, "optim.predictor_lr_mult": lam}) for lam in lambdas])


def normalization_grid() -> AblationGrid:
    return AblationGrid([(k, {"loss.normalization": k}) for k in ("l2", "none", "layernorm", "batchnorm")])


GRIDS = {
    "byol-to-simclr": byol_to_simclr_grid,
    "augmentations": augmentation_grid,
    "predictor-lr": predictor_lr_grid,
    "normalization": normalization_grid,
}


@dataclass
class GridRow:
    name: str
    seed: int
    predictor: bool
    target: str
    beta: float
    top1: float | None = None
    normalized_std: float | None = None
    effective_rank: float | None = None
    collapsed: bool | None = None
    error: str = ""


COLUMNS = ("name", "seed", "predictor", "target", "beta", "top1", "normalized_std", "effective_rank",
           "collapsed", "error")


def run_one(cfg: RunConfig):
    """Train, probe and diagnose one config; returns (ProbeResult, CollapseReport)."""
    from .evaluate import collapse_metrics, evaluate_encoder, projection_sample
    from .trainer import build_datasets, run

    train, test = build_datasets(cfg)
    out = run(cfg, train)
    tr = out["trainer"]
    probe = evaluate_encoder(tr.pair, train, test, tr.mean, tr.std, cfg.probe, seed=cfg.seed)
    report = collapse_metrics(projection_sample(tr, test))
    return probe, report


def run_grid(grid: AblationGrid, base: RunConfig, seeds=(0,), runner=run_one) -> list[GridRow]:
    """Run every (row, seed); a failing run is recorded in its row and the grid carries on.

    Rows come back ranked by probe accuracy (failed rows last), ties in grid order.
    """
    rows = []
    for name, cfg in grid.configs(base):
        for seed in seeds:
            c = copy.deepcopy(cfg)
            c.seed = seed
            c.train.output_dir = f"{base.train.output_dir}/{_slug(name)}/seed{seed}"
            row = GridRow(name, seed, c.loss.use_predictor, c.loss.target_mode, c.loss.beta)
            try:
                probe, report = runner(c)
                row.top1 = probe.top1
                row.normalized_std = report.normalized_std
                row.effective_rank = report.effective_rank
                row.collapsed = report.collapsed
            except Exception as exc:  # noqa: BLE001 - recorded per row
                row.error = f"{type(exc).__name__}: {exc}"
                traceback.print_exc()
            rows.append(row)
    order = {id(r): i for i, r in enumerate(rows)}
    return sorted(rows, key=lambda r: (r.top1 is None, -(r.top1 or 0.0), order[id(r)]))


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_") or "row"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def to_csv(rows: list[GridRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_cell(getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def to_table(rows: list[GridRow]) -> str:
    """Aligned plain-text rendering of the same columns."""
    cells = [list(COLUMNS)] + [[_cell(getattr(r, c)) for c in COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
