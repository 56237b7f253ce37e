"""Linear evaluation on frozen representations and collapse diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import AugmentationParams, RngStream, augment_batch, eval_batch
from .config import ProbeConfig
from .data import ImageBatch
from .model import NetworkPair, encode
from .optim import sgd_nesterov_step


@dataclass
class ProbeResult:
    top1: float
    per_class: dict[int, float]
    curve: list[float]  # training loss per epoch for the selected learning rate
    best_lr: float = 0.0
    val_top1: float = 0.0
    sweep: dict[float, float] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"top1 = {self.top1!r}", f"best_lr = {self.best_lr!r}", f"val_top1 = {self.val_top1!r}"]
        lines += [f"class.{c} = {a!r}" for c, a in sorted(self.per_class.items())]
        lines += [f"sweep.{lr} = {a!r}" for lr, a in self.sweep.items()]
        return "\n".join(lines) + "\n"


@dataclass
class CollapseReport:
    per_dim_std: np.ndarray
    normalized_std: float  # mean per-dimension std of l2-normalised rows
    mean_norm: float
    effective_rank: float

    @property
    def collapsed(self) -> bool:
        return self.normalized_std < COLLAPSE_STD

    def to_text(self) -> str:
        return (f"normalized_std = {self.normalized_std!r}\nmean_norm = {self.mean_norm!r}\n"
                f"effective_rank = {self.effective_rank!r}\nmean_per_dim_std = {float(self.per_dim_std.mean())!r}\n")


COLLAPSE_STD = 0.01


def collapse_metrics(x) -> CollapseReport:
    """Per-dimension spread, mean row norm and effective rank exp(H(s^2 / sum s^2))."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("collapse_metrics needs at least two samples")
    norms = np.linalg.norm(x, axis=1)
    xn = x / np.maximum(norms, T.EPS_NORM)[:, None]
    s = np.linalg.svd(x, compute_uv=False)
    energy = s * s
    total = energy.sum()
    if total > 0:
        p = energy[energy > 0] / total
        erank = float(np.exp(-(p * np.log(p)).sum()))
    else:
        erank = 0.0
    return CollapseReport(x.std(axis=0), float(xn.std(axis=0).mean()), float(norms.mean()), erank)


def extract_representations(pair: NetworkPair, images: np.ndarray, mean, std, batch_size: int = 256,
                            preprocessed: bool = False) -> np.ndarray:
    """y = f_theta(x) with running BN statistics; neither parameters nor statistics change."""
    size = pair.arch.input_shape[1:]
    feats = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            chunk = images[s:s + batch_size]
            x = chunk if preprocessed else eval_batch(chunk, size, mean, std)
            y = encode(pair.arch, pair.online, pair.online_bn, x, train=False, update_stats=False)
            feats.append(y.data)
    if not feats:
        return np.zeros((0, pair.arch.repr_dim))
    return np.concatenate(feats)


def _accuracy(W, b, x, y) -> float:
    return float(((x @ W + b).argmax(axis=1) == y).mean()) if len(y) else 0.0


def train_linear(train_x, train_y, n_classes: int, lr: float, cfg: ProbeConfig, seed: int = 0,
                 epoch_features=None):
    """Softmax regression with Nesterov SGD; returns (W, b, per-epoch loss)."""
    rng = np.random.default_rng([seed, 0x9B0BE])
    d = train_x.shape[1]
    W = T.Tensor(np.zeros((d, n_classes)), requires_grad=True)
    b = T.Tensor(np.zeros(n_classes), requires_grad=True)
    params = {"W": W, "b": b}
    bufs: dict[str, np.ndarray] = {}
    curve = []
    n = len(train_y)
    for epoch in range(cfg.epochs):
        x_ep = train_x if epoch_features is None else epoch_features[epoch % len(epoch_features)]
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            W.grad = b.grad = None
            loss = T.softmax_cross_entropy(T.matmul(T.Tensor(x_ep[idx]), W) + b, train_y[idx])
            T.backward(loss)
            sgd_nesterov_step(params, lr, cfg.momentum, bufs)
            total += float(loss.data) * len(idx)
        curve.append(total / n)
    return W.data, b.data, curve


def linear_probe(features, labels, cfg: ProbeConfig | None = None, test_features=None, test_labels=None,
                 seed: int = 0, epoch_features=None) -> ProbeResult:
    """Sweep learning rates on a held-out split, report test accuracy of the best one.

    Without ``test_features`` the validation split doubles as the test split.
    ``epoch_features`` optionally supplies augmented training features per
    epoch (aligned with ``features``; cycled).
    """
    cfg = cfg or ProbeConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("linear_probe needs at least two classes")
    n_classes = int(y.max()) + 1
    rng = np.random.default_rng([seed, 0x5A11])
    perm = rng.permutation(len(y))
    n_val = max(1, int(round(cfg.val_fraction * len(y))))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    ep_tr = None if epoch_features is None else [f[tr_idx] for f in epoch_features]
    sweep, fits = {}, {}
    for lr in cfg.lrs:
        W, b, curve = train_linear(x[tr_idx], y[tr_idx], n_classes, lr, cfg, seed, ep_tr)
        acc = _accuracy(W, b, x[val_idx], y[val_idx]) if np.all(np.isfinite(W)) else 0.0
        sweep[float(lr)] = acc
        fits[float(lr)] = (W, b, curve)
    best = max(sweep, key=lambda k: (sweep[k], -abs(k)))
    W, b, curve = fits[best]
    if test_features is None:
        tx, ty = x[val_idx], y[val_idx]
    else:
        tx, ty = np.asarray(test_features, dtype=np.float64), np.asarray(test_labels, dtype=np.int64)
    pred = (tx @ W + b).argmax(axis=1) if np.all(np.isfinite(W)) else np.zeros(len(ty), dtype=int)
    per_class = {int(c): float((pred[ty == c] == c).mean()) for c in np.unique(ty)}
    top1 = float((pred == ty).mean()) if len(ty) else 0.0
    return ProbeResult(top1, per_class, curve, best, sweep[best], sweep)


def probe_augmentation(size) -> AugmentationParams:
    """Spatial-only augmentation for probe training: random resized crop and flip."""
    return AugmentationParams(target_size=size, jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0,
                              solarize_prob=0.0)


def evaluate_encoder(pair: NetworkPair, train: ImageBatch, test: ImageBatch, mean, std,
                     cfg: ProbeConfig | None = None, seed: int = 0, aug_copies: int = 4) -> ProbeResult:
    """Frozen-representation linear evaluation of the online encoder."""
    cfg = cfg or ProbeConfig()
    fx = extract_representations(pair, train.images, mean, std)
    tx = extract_representations(pair, test.images, mean, std)
    epoch_feats = None
    if cfg.augment:
        params = probe_augmentation(tuple(pair.arch.input_shape[1:]))
        stream = RngStream(seed + 104729)
        idx = np.arange(len(train))
        epoch_feats = []
        for e in range(min(aug_copies, cfg.epochs)):
            views = augment_batch(train.images, idx, params, stream, e, 0, mean, std)
            epoch_feats.append(extract_representations(pair, views, mean, std, preprocessed=True))
    return linear_probe(fx, train.labels, cfg, tx, test.labels, seed=seed, epoch_features=epoch_feats)


def projection_sample(trainer, data: ImageBatch, n: int = 512) -> np.ndarray:
    """Online projections z of the first ``n`` images (eval preprocessing, running BN statistics)."""
    pair = trainer.pair
    x = eval_batch(data.images[:n], pair.arch.input_shape[1:], trainer.mean, trainer.std)
    with T.no_grad():
        _, z, _ = pair.forward_online(x, train=False, predictor=False, update_stats=False)
    return z.data
