"""LARS and Nesterov SGD, parameter groups and step schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

EPS_LARS = 1e-9


@dataclass
class ParamGroup:
    names: list[str]
    role: str  # "weight", "bias" or "bn"
    subnet: str  # "encoder", "projector" or "predictor"
    lr_multiplier: float = 1.0
    lars_adapt: bool = True
    weight_decay: bool = True


def param_role(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if leaf.startswith("bn_"):
        return "bn"
    if leaf == "bias":
        return "bias"
    return "weight"


def make_groups(names) -> list[ParamGroup]:
    """One group per (subnetwork, role); biases and BN parameters skip LARS and decay."""
    buckets: dict[tuple[str, str], list[str]] = {}
    for n in names:
        key = (n.split(".", 1)[0], param_role(n))
        buckets.setdefault(key, []).append(n)
    groups = []
    for (subnet, role), members in sorted(buckets.items()):
        adapt = role == "weight"
        groups.append(ParamGroup(members, role, subnet, lars_adapt=adapt, weight_decay=adapt))
    return groups


def group_multipliers(groups: list[ParamGroup], predictor_mult: float = 1.0,
                      projector_mult: float = 1.0) -> list[ParamGroup]:
    """Set learning-rate multipliers on predictor and projector groups (encoder stays at 1)."""
    if predictor_mult < 0 or projector_mult < 0:
        raise ValueError("learning-rate multipliers must be nonnegative")
    for g in groups:
        if g.subnet == "predictor":
            g.lr_multiplier = float(predictor_mult)
        elif g.subnet == "projector":
            g.lr_multiplier = float(projector_mult)
        else:
            g.lr_multiplier = 1.0
    return groups


# -- schedules ---------------------------------------------------------------

@dataclass
class Schedule:
    base_lr: float = 0.2
    batch_size: int = 256
    warmup_steps: int = 0
    total_steps: int = 1000
    tau_base: float = 0.996

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256


def lr_at(k: int, s: Schedule) -> float:
    """Linear warmup to the peak, then cosine decay to zero at step K."""
    if k < 0 or k > s.total_steps:
        raise ValueError(f"step {k} outside [0, {s.total_steps}]")
    peak = s.peak_lr
    if k < s.warmup_steps:
        return peak * k / s.warmup_steps
    decay = s.total_steps - s.warmup_steps
    if decay == 0:
        return peak
    t = k - s.warmup_steps
    return peak * (math.cos(math.pi * t / decay) + 1) / 2


def tau_at(k: int, s: Schedule) -> float:
    """1 - (1 - tau_base) * (cos(pi k / K) + 1) / 2."""
    if k < 0 or k > s.total_steps:
        raise ValueError(f"step {k} outside [0, {s.total_steps}]")
    if s.total_steps == 0:
        return s.tau_base
    return 1 - (1 - s.tau_base) * (math.cos(math.pi * k / s.total_steps) + 1) / 2


# -- update rules --------------------------------------------------------------

def _check_finite(name, g):
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient for parameter {name}")


def lars_trust_ratio(w: np.ndarray, update: np.ndarray, eta: float) -> float:
    wn = float(np.linalg.norm(w))
    un = float(np.linalg.norm(update))
    if wn > 0 and un > 0:
        return eta * wn / (un + EPS_LARS)
    return 1.0


def lars_update(w, g, buf, lr, momentum, weight_decay, eta, adapt=True):
    """One LARS step for a single tensor; returns (new_w, new_buf).

    Adapted tensors: d = g + wd*w, buf = mu*buf + trust*lr*d.
    Excluded tensors: buf = mu*buf + lr*g (no decay, no trust ratio).
    """
    if adapt:
        d = g + weight_decay * w
        local = lars_trust_ratio(w, d, eta)
    else:
        d = g
        local = 1.0
    buf = momentum * buf + (local * lr) * d
    return w - buf, buf


class LARS:
    """Layer-wise adaptive rate scaling with momentum and decoupled exclusions."""

    def __init__(self, groups: list[ParamGroup], momentum: float = 0.9, weight_decay: float = 1.5e-6,
                 eta: float = 1e-3):
        self.groups = groups
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.eta = eta
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], lr: float, grads: dict[str, np.ndarray] | None = None) -> None:
        for grp in self.groups:
            for name in grp.names:
                p = params[name]
                g = p.grad if grads is None else grads.get(name)
                if g is None:
                    raise ValueError(f"missing gradient for {name}")
                _check_finite(name, g)
                buf = self.buffers.get(name)
                if buf is None:
                    buf = np.zeros_like(p.data)
                wd = self.weight_decay if grp.weight_decay else 0.0
                p.data, self.buffers[name] = lars_update(
                    p.data, g, buf, lr * grp.lr_multiplier, self.momentum, wd, self.eta, grp.lars_adapt)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"opt/{k}": v for k, v in self.buffers.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.buffers = {k[4:]: v.copy() for k, v in arrays.items() if k.startswith("opt/")}


def lars_step(groups, params, lr, momentum, weight_decay, eta, buffers=None):
    """Functional form: apply one LARS step to ``params`` in place, return the buffers."""
    opt = LARS(groups, momentum, weight_decay, eta)
    opt.buffers = dict(buffers or {})
    opt.step(params, lr)
    return opt.buffers


def sgd_nesterov_step(params: dict[str, Tensor], lr: float, momentum: float,
                      buffers: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """buf = mu*buf + g;  w -= lr * (g + mu*buf)."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        _check_finite(name, g)
        buf = momentum * buffers.get(name, np.zeros_like(g)) + g
        buffers[name] = buf
        p.data = p.data - lr * (g + momentum * buf)
    return buffers


@dataclass
class OptimPreset:
    base_lr: float
    weight_decay: float
    tau_base: float
    momentum: float = 0.9
    eta: float = 1e-3


PRESETS = {
    "full": OptimPreset(base_lr=0.2, weight_decay=1.5e-6, tau_base=0.996),
    "ablation": OptimPreset(base_lr=0.3, weight_decay=1e-6, tau_base=0.99),
    "small-batch": OptimPreset(base_lr=0.4, weight_decay=1.5e-6, tau_base=0.9995),
    # desk scale: batch 64 and a few thousand steps need a larger trust coefficient to move at all
    "desk": OptimPreset(base_lr=1.0, weight_decay=1e-6, tau_base=0.99, eta=0.01),
}
