"""Run configuration: nested dataclasses with a line-oriented ``key = value`` text form.

Keys are dotted paths (``loss.beta``); values are JSON scalars or lists, so
``true``, ``0.3``, ``"xi"`` and ``[16, 16]`` all round-trip exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .augment import AugmentationParams
from .model import ArchitectureSpec
from .objective import LossSpec
from .optim import PRESETS


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synth"  # "synth" or "cifar10"
    path: str = ""
    n_classes: int = 4
    n_per_class: int = 500
    n_test_per_class: int = 250
    image_size: int = 16
    subset: int = 0  # cifar10: keep the first `subset` training images (0 = all)
    seed: int = 0
    # defaults: flip-symmetric rows, class carried by position only, colour is per-image nuisance
    position_jitter: float = 0.06
    class_positions: bool = True
    layout: str = "rows"
    class_colors: bool = False
    hue_noise: float = 0.03
    background_noise: float = 0.05
    background_tint: float = 0.3
    value_range: tuple[float, float] = (0.4, 1.0)
    mean: tuple[float, ...] = ()  # empty: computed from the training set
    std: tuple[float, ...] = ()


@dataclass
class OptimConfig:
    optimizer: str = "lars"
    base_lr: float = 1.0
    batch_size: int = 64
    warmup_steps: int = 100
    total_steps: int = 2000
    tau_base: float = 0.99
    tau_schedule: str = "cosine"  # "cosine" or "constant"
    weight_decay: float = 1e-6
    momentum: float = 0.9
    eta: float = 0.01
    predictor_lr_mult: float = 1.0
    projector_lr_mult: float = 1.0


@dataclass
class TrainConfig:
    accumulation: int = 1
    checkpoint_every: int = 0  # 0: final checkpoint only
    hist_every: int = 50
    threads: int = 1
    output_dir: str = "runs/default"


@dataclass
class ProbeConfig:
    epochs: int = 40
    batch_size: int = 256
    momentum: float = 0.9
    lrs: tuple[float, ...] = (0.1, 0.075, 0.05, 0.025, 0.0125)  # reference sweep at batch 1024, scaled to 256
    val_fraction: float = 0.1
    augment: bool = True


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    arch: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    aug1: AugmentationParams = field(default_factory=AugmentationParams.view_one)
    aug2: AugmentationParams = field(default_factory=AugmentationParams.view_two)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def sync(self) -> "RunConfig":
        """Propagate dataset geometry into architecture and augmentation sizes."""
        size = self.dataset.image_size if self.dataset.kind == "synth" else 32
        self.arch.input_shape = (3, size, size)
        self.aug1.target_size = (size, size)
        self.aug2.target_size = (size, size)
        return self


def preset_config(name: str = "desk") -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    cfg = RunConfig(preset=name)
    cfg.optim.base_lr = p.base_lr
    cfg.optim.weight_decay = p.weight_decay
    cfg.optim.tau_base = p.tau_base
    cfg.optim.momentum = p.momentum
    cfg.optim.eta = p.eta
    return cfg.sync()


# -- flattening -----------------------------------------------------------------

def _flatten(obj, prefix="") -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def valid_keys(cfg: RunConfig | None = None) -> list[str]:
    return sorted(_flatten(cfg or RunConfig()))


def _encode(v) -> str:
    if isinstance(v, tuple):
        v = list(v)
    return json.dumps(v)


def to_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_encode(v)}\n" for k, v in _flatten(cfg).items())


def _coerce(current, value, key):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(current, str):
        return str(value)
    return value


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_value(cfg: RunConfig, key: str, value) -> None:
    """Assign ``value`` at dotted ``key``; unknown keys raise :class:`ConfigError` listing valid ones."""
    parts = key.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not hasattr(obj, p) or not dataclasses.is_dataclass(getattr(obj, p)):
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid_keys(cfg))}")
        obj = getattr(obj, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)} \
            or dataclasses.is_dataclass(getattr(obj, leaf)):
        raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid_keys(cfg))}")
    setattr(obj, leaf, _coerce(getattr(obj, leaf), value, key))


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any] | list[str]) -> RunConfig:
    """Apply ``key=value`` strings or a mapping, then re-validate every section."""
    if isinstance(overrides, dict):
        items = list(overrides.items())
    else:
        items = []
        for s in overrides:
            if "=" not in s:
                raise ConfigError(f"override {s!r} is not key=value")
            k, v = s.split("=", 1)
            items.append((k.strip(), _parse_value(v)))
    for k, v in items:
        set_value(cfg, k, v)
    return validate(cfg)


def validate(cfg: RunConfig) -> RunConfig:
    cfg.sync()
    try:
        for section in (cfg.arch, cfg.loss, cfg.aug1, cfg.aug2):
            section.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.optim.optimizer not in ("lars", "sgd"):
        raise ConfigError(f"unknown optimizer {cfg.optim.optimizer!r}")
    if cfg.optim.tau_schedule not in ("cosine", "constant"):
        raise ConfigError(f"unknown tau_schedule {cfg.optim.tau_schedule!r}")
    if cfg.optim.warmup_steps > cfg.optim.total_steps:
        cfg.optim.warmup_steps = cfg.optim.total_steps
    if cfg.train.accumulation < 1:
        raise ConfigError("train.accumulation must be >= 1")
    if cfg.optim.batch_size < 2:
        raise ConfigError("optim.batch_size must be >= 2")
    return cfg


def from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        values[k.strip()] = _parse_value(v)
    cfg = base
    if cfg is None:
        cfg = preset_config(values.get("preset", "desk"))
    return apply_overrides(cfg, values)


def load(path) -> RunConfig:
    with open(path) as fh:
        return from_text(fh.read())


def save(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_text(cfg))
