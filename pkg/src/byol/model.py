"""Online/target networks and the binary checkpoint container.

Networks are written functionally: parameters live in ``dict[str, Tensor]``
and batch-norm running statistics in ``dict[str, BatchNormState]``, so the
same forward code serves the online parameters, a detached view of them, or
the EMA target parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor

TARGET_MODES = ("theta", "sg_theta", "xi")


@dataclass
class ArchitectureSpec:
    encoder: str = "mlp"  # "mlp" or "conv"
    input_shape: tuple[int, int, int] = (3, 16, 16)
    encoder_hidden: tuple[int, ...] = (256,)
    conv_channels: tuple[int, ...] = (16, 32, 64)
    repr_dim: int = 128
    proj_hidden: int = 512
    proj_dim: int = 64
    encoder_bn: bool = True
    head_bn: bool = True

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.encoder_hidden = tuple(int(v) for v in self.encoder_hidden)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        if self.encoder not in ("mlp", "conv"):
            raise ValueError(f"unknown encoder kind {self.encoder!r}")
        for name in ("repr_dim", "proj_hidden", "proj_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    # layer tables: (name, fan_in, fan_out, has_bn, kind)
    def encoder_layers(self) -> list[tuple[str, int, int, bool, str]]:
        layers = []
        if self.encoder == "mlp":
            dims = [int(np.prod(self.input_shape)), *self.encoder_hidden, self.repr_dim]
            for i in range(len(dims) - 1):
                layers.append((f"encoder.{i}", dims[i], dims[i + 1], self.encoder_bn, "linear"))
        else:
            chans = [self.input_shape[0], *self.conv_channels, self.repr_dim]
            for i in range(len(chans) - 1):
                layers.append((f"encoder.{i}", chans[i], chans[i + 1], self.encoder_bn, "conv"))
        return layers

    def head_layers(self, head: str) -> list[tuple[str, int, int, bool, str]]:
        d_in = self.repr_dim if head == "projector" else self.proj_dim
        return [
            (f"{head}.0", d_in, self.proj_hidden, self.head_bn, "linear"),
            (f"{head}.1", self.proj_hidden, self.proj_dim, False, "linear"),
        ]

    def all_layers(self, predictor: bool = True):
        layers = self.encoder_layers() + self.head_layers("projector")
        if predictor:
            layers += self.head_layers("predictor")
        return layers

    def parameter_count(self, predictor: bool = True) -> int:
        """Closed-form count of online parameters."""
        n = 0
        for _, fan_in, fan_out, bn, kind in self.all_layers(predictor):
            k = 9 if kind == "conv" else 1
            n += fan_in * fan_out * k + fan_out
            if bn:
                n += 2 * fan_out
        return n


CONV_K = 3


def init_params(arch: ArchitectureSpec, rng: np.random.Generator, predictor: bool = True) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases, unit BN scale, zero BN shift."""
    params: dict[str, np.ndarray] = {}
    for name, fan_in, fan_out, bn, kind in arch.all_layers(predictor):
        if kind == "conv":
            fan = fan_in * CONV_K * CONV_K
            shape = (fan_out, fan_in, CONV_K, CONV_K)
        else:
            fan = fan_in
            shape = (fan_in, fan_out)
        bound = np.sqrt(3.0 / fan)
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=shape)
        params[f"{name}.bias"] = np.zeros(fan_out)
        if bn:
            params[f"{name}.bn_gamma"] = np.ones(fan_out)
            params[f"{name}.bn_beta"] = np.zeros(fan_out)
    return params


def init_bn_state(arch: ArchitectureSpec, predictor: bool = True) -> dict[str, BatchNormState]:
    return {
        f"{name}.bn": BatchNormState(fan_out)
        for name, _, fan_out, bn, _ in arch.all_layers(predictor) if bn
    }


def _layer(params, bn_state, name, kind, bn, x, train, update_stats, last=False):
    if kind == "conv":
        x = T.conv2d(x, params[f"{name}.weight"], stride=1, padding=1)
        x = x + T.reshape(params[f"{name}.bias"], (1, -1, 1, 1))
    else:
        x = x @ params[f"{name}.weight"] + params[f"{name}.bias"]
    if last:
        return x
    if bn:
        x = T.batch_norm(x, params[f"{name}.bn_gamma"], params[f"{name}.bn_beta"],
                         bn_state[f"{name}.bn"], train, update_stats=update_stats)
    x = T.relu(x)
    if kind == "conv":
        x = T.avg_pool2d(x, 2) if min(x.shape[2:]) >= 2 else x
    return x


def encode(arch, params, bn_state, x, train=True, update_stats=True) -> Tensor:
    x = T.as_tensor(x)
    if arch.encoder == "mlp":
        x = T.reshape(x, (x.shape[0], -1))
    for name, _, _, bn, kind in arch.encoder_layers():
        x = _layer(params, bn_state, name, kind, bn, x, train, update_stats)
    if arch.encoder == "conv":
        x = T.global_avg_pool(x)
    return x


def head(arch, which, params, bn_state, x, train=True, update_stats=True) -> Tensor:
    """Projector or predictor: linear, batch norm, ReLU, linear (output not normalised)."""
    (n0, _, _, bn0, k0), (n1, _, _, _, k1) = arch.head_layers(which)
    x = _layer(params, bn_state, n0, k0, bn0, x, train, update_stats)
    return _layer(params, bn_state, n1, k1, False, x, train, update_stats, last=True)


class NetworkPair:
    """Online parameters (encoder, projector, predictor) and EMA target (encoder, projector)."""

    def __init__(self, arch: ArchitectureSpec, seed: int = 0, predictor: bool = True, dtype=np.float64):
        self.arch = arch
        self.has_predictor = predictor
        rng = np.random.default_rng([int(seed), 0x5EED])
        raw = init_params(arch, rng, predictor)
        self.online: dict[str, Tensor] = {
            k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in raw.items()
        }
        self.online_bn = init_bn_state(arch, predictor)
        self.target: dict[str, Tensor] = {
            k: Tensor(v.data.copy(), name=k) for k, v in self.online.items() if not k.startswith("predictor.")
        }
        self.target_bn = {k: _copy_bn(v) for k, v in self.online_bn.items() if not k.startswith("predictor.")}

    # -- forwards -------------------------------------------------------------
    def forward_online(self, v, train: bool = True, predictor: bool = True, update_stats: bool = True):
        """Return (y, z, p) for the online branch; p is None when predictor is off."""
        self._check_input(v)
        y = encode(self.arch, self.online, self.online_bn, v, train, update_stats)
        z = head(self.arch, "projector", self.online, self.online_bn, y, train, update_stats)
        p = None
        if predictor:
            if not self.has_predictor:
                raise ValueError("network built without a predictor")
            p = head(self.arch, "predictor", self.online, self.online_bn, z, train, update_stats)
        return y, z, p

    def forward_target(self, v, train: bool = True) -> Tensor:
        """Target projection g_xi(f_xi(v)), detached. Uses batch statistics, never updates running ones."""
        self._check_input(v)
        with T.no_grad():
            y = encode(self.arch, self.target, self.target_bn, v, train, update_stats=False)
            z = head(self.arch, "projector", self.target, self.target_bn, y, train, update_stats=False)
        return T.stop_grad(z)

    def target_view(self, mode: str) -> Callable:
        """Return a function mapping (views, online projections) to target projections.

        ``theta`` reuses the online projection with gradient flow, ``sg_theta``
        reuses it detached, ``xi`` runs the EMA network.
        """
        if mode == "theta":
            return lambda v, z_online: z_online
        if mode == "sg_theta":
            return lambda v, z_online: T.stop_grad(z_online)
        if mode == "xi":
            return lambda v, z_online: self.forward_target(v)
        raise ValueError(f"unknown target mode {mode!r}; expected one of {TARGET_MODES}")

    def _check_input(self, v):
        shape = np.shape(v.data if isinstance(v, Tensor) else v)
        if tuple(shape[1:]) != tuple(self.arch.input_shape):
            raise ValueError(f"input shape {shape[1:]} does not match architecture {self.arch.input_shape}")

    # -- parameter handling ------------------------------------------------------
    def zero_grad(self) -> None:
        for t in self.online.values():
            t.grad = None

    def ema_update(self, tau: float) -> None:
        """xi <- tau * xi + (1 - tau) * theta, including batch-norm running statistics."""
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau={tau} outside [0, 1]")
        for k, t in self.target.items():
            t.data = tau * t.data + (1.0 - tau) * self.online[k].data
        for k, s in self.target_bn.items():
            o = self.online_bn[k]
            s.mean = tau * s.mean + (1.0 - tau) * o.mean
            s.var = tau * s.var + (1.0 - tau) * o.var

    def target_grads_absent(self) -> bool:
        return all(t.grad is None and not t.requires_grad for t in self.target.values())

    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.online.items() if k.startswith("encoder.")}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, t in self.online.items():
            out[f"online/{k}"] = t.data
        for k, t in self.target.items():
            out[f"target/{k}"] = t.data
        for prefix, bn in (("online_bn", self.online_bn), ("target_bn", self.target_bn)):
            for k, s in bn.items():
                out[f"{prefix}/{k}.mean"] = s.mean
                out[f"{prefix}/{k}.var"] = s.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = set(expected) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing arrays: {sorted(missing)[:5]}")
        for k, ref in expected.items():
            if arrays[k].shape != ref.shape:
                raise ValueError(f"shape mismatch for {k}: checkpoint {arrays[k].shape}, model {ref.shape}")
        for k, t in self.online.items():
            t.data = arrays[f"online/{k}"].copy()
        for k, t in self.target.items():
            t.data = arrays[f"target/{k}"].copy()
        for prefix, bn in (("online_bn", self.online_bn), ("target_bn", self.target_bn)):
            for k, s in bn.items():
                s.mean = arrays[f"{prefix}/{k}.mean"].copy()
                s.var = arrays[f"{prefix}/{k}.var"].copy()


def _copy_bn(s: BatchNormState) -> BatchNormState:
    c = BatchNormState(len(s.mean))
    c.mean = s.mean.copy()
    c.var = s.var.copy()
    return c


def layer_count(pair: NetworkPair, branch: str) -> int:
    """Number of linear/conv layers applied on the loss path of ``branch`` ("online" or "target")."""
    names = pair.online if branch == "online" else pair.target
    return sum(1 for k in names if k.endswith(".weight"))


# -- checkpoint container -------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic    8 bytes  b"BYOLCKPT"
#   version  u32
#   step     u64
#   cfg_len  u32, followed by cfg_len bytes of UTF-8 config text
#   count    u32, followed by `count` records:
#       name_len u16, name (UTF-8)
#       dtype    u8   (see DTYPE_CODES)
#       ndim     u8,  then ndim x u32 extents
#       data     prod(extents) * itemsize bytes, little-endian, row-major

MAGIC = b"BYOLCKPT"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("<u8"): 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def save_checkpoint(path, arrays: dict[str, np.ndarray], config_text: str = "", step: int = 0) -> None:
    cfg = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<IQI", VERSION, step, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        dt = a.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise TypeError(f"unsupported dtype {a.dtype} for {name}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", DTYPE_CODES[dt], a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=dt).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str, int]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, step, cfg_len = struct.unpack_from("<IQI", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 8 + 16
    cfg = buf[off:off + cfg_len].decode("utf-8")
    off += cfg_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = CODE_DTYPES[code]
        n = int(np.prod(shape)) * dt.itemsize
        arrays[name] = np.frombuffer(buf[off:off + n], dtype=dt).reshape(shape).copy()
        off += n
    return arrays, cfg, int(step)
