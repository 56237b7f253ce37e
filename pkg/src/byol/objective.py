"""Loss functions: normalised regression, generalised InfoNCE, closed-form linear predictor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import tensor as T
from .model import TARGET_MODES, NetworkPair
from .tensor import Tensor

NORMALIZATIONS = ("l2", "layernorm", "batchnorm", "none")
STAT_EPS = 1e-12


@dataclass
class LossSpec:
    family: str = "byol"  # "byol" or "infonce"
    alpha: float = 0.1
    beta: float = 0.0
    use_predictor: bool = True
    target_mode: str = "xi"
    normalization: str = "l2"
    closed_form_predictor: bool = False
    loss_scale: float = 1.0

    def __post_init__(self):
        if self.family not in ("byol", "infonce"):
            raise ValueError(f"unknown loss family {self.family!r}")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"unknown target mode {self.target_mode!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.family == "infonce" and not self.alpha > 0:
            raise ValueError("infonce needs alpha > 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")

    @property
    def needs_mlp_predictor(self) -> bool:
        return self.use_predictor and not self.closed_form_predictor


def normalize_rows(x: Tensor, kind: str) -> Tensor:
    """Row normalisation n(.) applied to predictions and targets.

    ``layernorm`` and ``batchnorm`` are non-affine and divided by sqrt(d) so
    their squared row norms are comparable with the l2 variant.
    """
    d = x.shape[1]
    if kind == "l2":
        return T.l2_normalize(x, axis=1)
    if kind == "none":
        return x
    if kind == "layernorm":
        xc = x - T.mean(x, axis=1, keepdims=True)
        sigma = T.sqrt(T.mean(xc * xc, axis=1, keepdims=True) + STAT_EPS)
        return xc / (sigma * np.sqrt(d))
    if kind == "batchnorm":
        xc = x - T.mean(x, axis=0, keepdims=True)
        sigma = T.sqrt(T.mean(xc * xc, axis=0, keepdims=True) + STAT_EPS)
        return xc / (sigma * np.sqrt(d))
    raise ValueError(f"unknown normalization {kind!r}")


def byol_pair_loss(p: Tensor, z_target: Tensor, normalization: str = "l2") -> Tensor:
    """Mean over the batch of ||n(p_i) - n(z'_i)||^2 (= 2 - 2 cos for l2)."""
    if tuple(p.shape) != tuple(z_target.shape):
        raise ValueError(f"shape mismatch: {p.shape} vs {z_target.shape}")
    diff = normalize_rows(p, normalization) - normalize_rows(z_target, normalization)
    return T.mean(T.tsum(diff * diff, axis=1))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    return T.l2_normalize(a, axis=1) @ T.transpose(T.l2_normalize(b, axis=1))


def infonce_from_outputs(phi_v: Tensor, psi_v: Tensor, psi_vp: Tensor, alpha: float, beta: float) -> Tensor:
    """Negated generalised InfoNCE for one direction.

    ``phi_v`` is phi(v); ``psi_v`` and ``psi_vp`` are psi(v) and psi(v').
    Returns -(2/B) sum_i S(v_i, v'_i)
            + beta * (2 alpha / B) sum_i log(sum_{j!=i} e^{S(v_i,v_j)/alpha} + sum_j e^{S(v_i,v'_j)/alpha}).
    """
    B = phi_v.shape[0]
    if B == 0:
        raise ValueError("infonce needs a non-empty batch")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    s_cross = cosine_matrix(phi_v, psi_vp)  # S(v_i, v'_j)
    s_same = cosine_matrix(phi_v, psi_v) if beta else None  # S(v_i, v_j)
    return infonce_from_similarities(s_same, s_cross, alpha, beta)


def infonce_from_similarities(s_same: Tensor | None, s_cross: Tensor, alpha: float, beta: float) -> Tensor:
    """The same quantity from precomputed (B, B) similarity matrices; the diagonal of ``s_same`` is ignored."""
    B = s_cross.shape[0]
    eye = np.eye(B, dtype=bool)
    positive = T.tsum(T.masked_fill(s_cross, ~eye, 0.0)) * (-2.0 / B)
    if beta == 0.0:
        return positive
    logits = T.concat([T.masked_fill(s_same, eye, -np.inf), s_cross], axis=1) * (1.0 / alpha)
    negative = T.tsum(T.logsumexp(logits, axis=1)) * (beta * 2.0 * alpha / B)
    return positive + negative


def infonce_reference(phi_v, psi_v, psi_vp, alpha, beta) -> float:
    """Direct double-loop evaluation of the same quantity (plain numpy, no tape)."""
    phi_v, psi_v, psi_vp = (np.asarray(a, dtype=float) for a in (phi_v, psi_v, psi_vp))
    B = len(phi_v)

    def S(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    pos = sum(S(phi_v[i], psi_vp[i]) for i in range(B))
    neg = 0.0
    for i in range(B):
        terms = [np.exp(S(phi_v[i], psi_v[j]) / alpha) for j in range(B) if j != i]
        terms += [np.exp(S(phi_v[i], psi_vp[j]) / alpha) for j in range(B)]
        neg += np.log(sum(terms))
    return -(2.0 / B) * pos + beta * (2.0 * alpha / B) * neg


def closed_form_predictor(Z, Z_target, ridge_scale: float = 1e-6) -> np.ndarray:
    """Least-squares linear map Q minimising ||Z Q - Z'||_F^2 (+ ridge).

    The ridge is ``ridge_scale * trace(Z^T Z) / F`` so the system stays
    solvable when B < F. Returned as a plain array: it carries no gradient.
    """
    Z = np.asarray(Z.data if isinstance(Z, Tensor) else Z, dtype=np.float64)
    Zt = np.asarray(Z_target.data if isinstance(Z_target, Tensor) else Z_target, dtype=np.float64)
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(Zt))):
        raise ValueError("closed_form_predictor: non-finite input")
    F = Z.shape[1]
    gram = Z.T @ Z
    lam = ridge_scale * np.trace(gram) / F
    if lam <= 0:
        lam = np.finfo(float).tiny
    c = scipy.linalg.cho_factor(gram + lam * np.eye(F))
    return scipy.linalg.cho_solve(c, Z.T @ Zt)


# -- network-level losses ---------------------------------------------------------

@dataclass
class LossOutput:
    loss: Tensor
    cos_sim: float
    z_norm_mean: float
    zp_norm_mean: float
    projections: np.ndarray  # online projections of the first view


def _row_norm_mean(x: Tensor) -> float:
    return float(np.linalg.norm(x.data, axis=1).mean())


def _mean_cos(a: Tensor, b: Tensor) -> float:
    an = a.data / np.maximum(np.linalg.norm(a.data, axis=1, keepdims=True), T.EPS_NORM)
    bn = b.data / np.maximum(np.linalg.norm(b.data, axis=1, keepdims=True), T.EPS_NORM)
    return float((an * bn).sum(axis=1).mean())


def branch_outputs(pair: NetworkPair, v1, v2, spec: LossSpec):
    """Compute phi and psi for both views according to the loss wiring."""
    _, z1, p1 = pair.forward_online(v1, predictor=spec.needs_mlp_predictor)
    _, z2, p2 = pair.forward_online(v2, predictor=spec.needs_mlp_predictor)
    target = pair.target_view(spec.target_mode)
    psi1, psi2 = target(v1, z1), target(v2, z2)
    if spec.closed_form_predictor:
        # predictor fitted on the current batch, treated as a constant
        phi1 = z1 @ closed_form_predictor(z1, psi2)
        phi2 = z2 @ closed_form_predictor(z2, psi1)
    elif spec.use_predictor:
        phi1, phi2 = p1, p2
    else:
        phi1, phi2 = z1, z2
    return (z1, z2), (phi1, phi2), (psi1, psi2)


def byol_symmetrized_loss(pair: NetworkPair, v1, v2, spec: LossSpec | None = None) -> LossOutput:
    """L(p(v), z'(v')) + L(p(v'), z'(v)); value in [0, 8] for l2 normalisation."""
    spec = spec or LossSpec()
    (z1, z2), (phi1, phi2), (psi1, psi2) = branch_outputs(pair, v1, v2, spec)
    loss = byol_pair_loss(phi1, psi2, spec.normalization) + byol_pair_loss(phi2, psi1, spec.normalization)
    return _package(loss, spec, z1, z2, phi1, phi2, psi1, psi2)


def infonce_loss(pair: NetworkPair, v1, v2, spec: LossSpec, symmetrize: bool = True) -> LossOutput:
    """Negated InfoNCE^{alpha,beta} with phi/psi wired from ``spec``; both directions summed by default."""
    (z1, z2), (phi1, phi2), (psi1, psi2) = branch_outputs(pair, v1, v2, spec)
    loss = infonce_from_outputs(phi1, psi1, psi2, spec.alpha, spec.beta)
    if symmetrize:
        loss = loss + infonce_from_outputs(phi2, psi2, psi1, spec.alpha, spec.beta)
    return _package(loss, spec, z1, z2, phi1, phi2, psi1, psi2)


def _package(loss, spec, z1, z2, phi1, phi2, psi1, psi2) -> LossOutput:
    if spec.loss_scale != 1.0:
        loss = loss * spec.loss_scale
    return LossOutput(
        loss=loss,
        cos_sim=0.5 * (_mean_cos(phi1, psi2) + _mean_cos(phi2, psi1)),
        z_norm_mean=0.5 * (_row_norm_mean(z1) + _row_norm_mean(z2)),
        zp_norm_mean=0.5 * (_row_norm_mean(psi1) + _row_norm_mean(psi2)),
        projections=z1.data,
    )


def compute_loss(pair: NetworkPair, v1, v2, spec: LossSpec) -> LossOutput:
    if spec.family == "byol":
        return byol_symmetrized_loss(pair, v1, v2, spec)
    return infonce_loss(pair, v1, v2, spec)
