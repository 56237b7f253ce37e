"""Training loop: two augmented views, symmetrised loss, optimizer step, EMA target update."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod
from . import tensor as T
from .augment import RngStream, augment_batch
from .config import RunConfig
from .data import ImageBatch, load_cifar10, synth_clusters, SynthSpec
from .model import NetworkPair, load_checkpoint, save_checkpoint
from .objective import compute_loss
from .optim import LARS, Schedule, group_multipliers, lr_at, make_groups, sgd_nesterov_step, tau_at

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "loss", "cos_sim", "z_norm_mean", "zp_norm_mean", "tau", "lr")


class TrainingDiverged(FloatingPointError):
    pass


class SGDMomentum:
    """Nesterov SGD over all online parameters (no exclusions); alternative to LARS."""

    def __init__(self, groups, momentum=0.9, weight_decay=0.0):
        self.groups = groups
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params, lr):
        for grp in self.groups:
            sub = {n: params[n] for n in grp.names}
            if grp.weight_decay and self.weight_decay:
                for p in sub.values():
                    p.grad = p.grad + self.weight_decay * p.data
            sgd_nesterov_step(sub, lr * grp.lr_multiplier, self.momentum, self.buffers)

    def state_arrays(self):
        return {f"opt/{k}": v for k, v in self.buffers.items()}

    def load_state_arrays(self, arrays):
        self.buffers = {k[4:]: v.copy() for k, v in arrays.items() if k.startswith("opt/")}


def build_datasets(cfg: RunConfig) -> tuple[ImageBatch, ImageBatch]:
    d = cfg.dataset
    if d.kind == "synth":
        spec = SynthSpec(position_jitter=d.position_jitter, class_positions=d.class_positions, layout=d.layout,
                         class_colors=d.class_colors, hue_noise=d.hue_noise, background_noise=d.background_noise,
                         background_tint=d.background_tint, value_range=tuple(d.value_range))
        train = synth_clusters(d.n_classes, d.n_per_class, d.image_size, d.seed, spec)
        test = synth_clusters(d.n_classes, d.n_test_per_class, d.image_size, d.seed + 7919, spec)
        return train, test
    if d.kind == "cifar10":
        files = sorted(f for f in os.listdir(d.path) if f.startswith("data_batch"))
        train = ImageBatch(*_concat([load_cifar10(os.path.join(d.path, f)) for f in files]))
        if d.subset:
            train = train.subset(np.arange(min(d.subset, len(train))))
        test = load_cifar10(os.path.join(d.path, "test_batch.bin"))
        return train, test
    raise config_mod.ConfigError(f"unknown dataset kind {d.kind!r}")


def _concat(parts):
    return np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts])


def schedule_of(cfg: RunConfig) -> Schedule:
    o = cfg.optim
    return Schedule(base_lr=o.base_lr, batch_size=o.batch_size * cfg.train.accumulation,
                    warmup_steps=min(o.warmup_steps, o.total_steps), total_steps=o.total_steps,
                    tau_base=o.tau_base)


@dataclass
class TrainState:
    pair: NetworkPair
    optimizer: object
    step: int = 0
    accum_count: int = 0
    history: list = field(default_factory=list)


class Trainer:
    """Owns the network pair, optimizer, schedules and data order for one run."""

    def __init__(self, cfg: RunConfig, data: ImageBatch):
        self.cfg = cfg
        self.data = data
        self.spec = cfg.loss
        self.schedule = schedule_of(cfg)
        pair = NetworkPair(cfg.arch, seed=cfg.seed, predictor=self.spec.needs_mlp_predictor)
        groups = group_multipliers(make_groups(pair.online), cfg.optim.predictor_lr_mult,
                                   cfg.optim.projector_lr_mult)
        if cfg.optim.optimizer == "lars":
            opt = LARS(groups, cfg.optim.momentum, cfg.optim.weight_decay, cfg.optim.eta)
        else:
            opt = SGDMomentum(groups, cfg.optim.momentum, cfg.optim.weight_decay)
        self.state = TrainState(pair, opt)
        self.stream = RngStream(cfg.seed)
        if cfg.dataset.mean:
            self.mean, self.std = list(cfg.dataset.mean), list(cfg.dataset.std)
        else:
            self.mean, self.std = data.channel_stats()
        self._perm_cache: dict[int, np.ndarray] = {}

    @property
    def pair(self) -> NetworkPair:
        return self.state.pair

    # -- data ------------------------------------------------------------------
    def batch_indices(self, k: int, size: int | None = None, part: int = 0) -> np.ndarray:
        """Indices for step ``k``: epoch-wise seeded permutation, drop-last."""
        b = size or self.cfg.optim.batch_size
        n = len(self.data)
        per_step = b * self.cfg.train.accumulation
        steps_per_epoch = max(n // per_step, 1)
        epoch, pos = divmod(k, steps_per_epoch)
        perm = self._perm_cache.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.cfg.seed, 0xDA7A, epoch]).permutation(n)
            self._perm_cache = {epoch: perm}
        start = pos * per_step + part * b
        return perm[start:start + b]

    def views(self, indices: np.ndarray, k: int):
        imgs = self.data.images[indices]
        v1 = augment_batch(imgs, indices, self.cfg.aug1, self.stream, k, 0, self.mean, self.std)
        v2 = augment_batch(imgs, indices, self.cfg.aug2, self.stream, k, 1, self.mean, self.std)
        return v1, v2

    def tau(self, k: int) -> float:
        if self.cfg.optim.tau_schedule == "constant":
            return self.cfg.optim.tau_base
        return tau_at(k, self.schedule)

    # -- steps -----------------------------------------------------------------
    def _forward_backward(self, v1, v2):
        out = compute_loss(self.pair, v1, v2, self.spec)
        val = float(out.loss.data)
        if not np.isfinite(val):
            raise TrainingDiverged(
                f"non-finite loss at step {self.state.step}: z_norm={out.z_norm_mean:.3e} "
                f"target_norm={out.zp_norm_mean:.3e} param_norms="
                + ", ".join(f"{k}={np.linalg.norm(t.data):.3e}" for k, t in self.pair.online.items()))
        T.backward(out.loss)
        if not self.pair.target_grads_absent():
            raise AssertionError("gradient reached target parameters")
        return out

    def _finish(self, k: int, outs) -> dict:
        lr = lr_at(k, self.schedule)
        tau = self.tau(k)
        self.state.optimizer.step(self.pair.online, lr)
        self.pair.ema_update(tau)
        self.state.step = k + 1
        return {
            "step": k,
            "loss": float(np.mean([float(o.loss.data) for o in outs])),
            "cos_sim": float(np.mean([o.cos_sim for o in outs])),
            "z_norm_mean": float(np.mean([o.z_norm_mean for o in outs])),
            "zp_norm_mean": float(np.mean([o.zp_norm_mean for o in outs])),
            "tau": tau,
            "lr": lr,
        }

    def train_step(self, indices: np.ndarray | None = None) -> dict:
        """One optimizer step (with ``train.accumulation`` sub-batches when > 1)."""
        k = self.state.step
        n_acc = self.cfg.train.accumulation
        if n_acc > 1 and indices is None:
            parts = [self.batch_indices(k, part=i) for i in range(n_acc)]
            return self.accumulate_and_step(parts)
        if indices is None:
            indices = self.batch_indices(k)
        if len(indices) < 2:
            raise ValueError("train_step needs at least 2 images (batch norm)")
        self.pair.zero_grad()
        v1, v2 = self.views(indices, k)
        out = self._forward_backward(v1, v2)
        return self._finish(k, [out])

    def accumulate_and_step(self, parts: list[np.ndarray]) -> dict:
        """Average gradients over sub-batches, then one optimizer step and one EMA update."""
        if not parts:
            raise ValueError("need at least one sub-batch")
        if len({len(p) for p in parts}) != 1:
            raise ValueError(f"inconsistent sub-batch sizes {[len(p) for p in parts]}")
        k = self.state.step
        self.pair.zero_grad()
        outs = []
        for idx in parts:
            v1, v2 = self.views(idx, k)
            outs.append(self._forward_backward(v1, v2))
            self.state.accum_count += 1
        for t in self.pair.online.values():
            if t.grad is not None:
                t.grad = t.grad / len(parts)
        self.state.accum_count = 0
        return self._finish(k, outs)

    # -- persistence ---------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.pair.state_arrays())
        arrays.update(self.state.optimizer.state_arrays())
        return arrays

    def save(self, path) -> None:
        save_checkpoint(path, self.state_arrays(), config_mod.to_text(self.cfg), self.state.step)

    def load(self, path) -> None:
        arrays, _, step = load_checkpoint(path)
        self.pair.load_state_arrays(arrays)
        self.state.optimizer.load_state_arrays(arrays)
        self.state.step = step


def _norm_percentiles(pair: NetworkPair, v) -> list[float]:
    with T.no_grad():
        _, z, _ = pair.forward_online(v, train=True, predictor=False, update_stats=False)
    norms = np.linalg.norm(z.data, axis=1)
    return np.percentile(norms, [0, 25, 50, 75, 100]).tolist()


def run(cfg: RunConfig, data: ImageBatch | None = None, resume: str | None = None,
        stop_at: int | None = None, out_dir: str | None = None) -> dict:
    """Train for ``optim.total_steps`` steps, writing metrics.csv and checkpoints.

    ``stop_at`` ends the loop early (simulated interruption); ``resume`` loads a
    checkpoint first and appends to the existing metrics file.
    """
    out_dir = out_dir or cfg.train.output_dir
    os.makedirs(out_dir, exist_ok=True)
    if data is None:
        data, _ = build_datasets(cfg)
    trainer = Trainer(cfg, data)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    norms_path = os.path.join(out_dir, "norms.csv")
    if resume:
        trainer.load(resume)
        _truncate_csv(metrics_path, trainer.state.step)
        _truncate_csv(norms_path, trainer.state.step)
    else:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_FIELDS)
        with open(norms_path, "w", newline="") as fh:
            csv.writer(fh).writerow(("step", "p0", "p25", "p50", "p75", "p100"))
    K = cfg.optim.total_steps
    end = K if stop_at is None else min(stop_at, K)
    every = cfg.train.checkpoint_every
    with open(metrics_path, "a", newline="") as mf, open(norms_path, "a", newline="") as nf:
        mw, nw = csv.writer(mf), csv.writer(nf)
        while trainer.state.step < end:
            k = trainer.state.step
            m = trainer.train_step()
            mw.writerow([m[f] if f == "step" else repr(m[f]) for f in METRIC_FIELDS])
            if cfg.train.hist_every and k % cfg.train.hist_every == 0:
                idx = trainer.batch_indices(k)
                v1, _ = trainer.views(idx, k)
                nw.writerow([k] + [repr(x) for x in _norm_percentiles(trainer.pair, v1)])
            if every and trainer.state.step % every == 0 and trainer.state.step < K:
                trainer.save(os.path.join(out_dir, f"step_{trainer.state.step:06d}.ckpt"))
            if k % 100 == 0:
                log.info("step %d loss %.4f cos %.4f lr %.4g tau %.5f", k, m["loss"], m["cos_sim"], m["lr"], m["tau"])
    final = os.path.join(out_dir, "final.ckpt" if trainer.state.step >= K else f"step_{trainer.state.step:06d}.ckpt")
    trainer.save(final)
    enc_path = None
    if trainer.state.step >= K:
        enc_path = os.path.join(out_dir, "encoder.ckpt")
        save_checkpoint(enc_path, {k: t.data for k, t in trainer.pair.encoder_params().items()}
                        | {f"bn/{k}.{s}": getattr(v, s) for k, v in trainer.pair.online_bn.items()
                           if k.startswith("encoder.") for s in ("mean", "var")},
                        config_mod.to_text(cfg), trainer.state.step)
    return {"trainer": trainer, "checkpoint": final, "encoder": enc_path, "metrics": metrics_path,
            "norms": norms_path}


def _truncate_csv(path: str, step: int) -> None:
    """Drop rows with step >= ``step`` so a resumed run does not duplicate them."""
    if not os.path.exists(path):
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)
