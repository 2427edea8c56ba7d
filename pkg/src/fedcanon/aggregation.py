"""Server aggregation strategies: Fed-CMP and the FedAvg/FedAdam/FedProx baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import linalg
from .params import Layer, ProjectorParams, squared_distance, weighted_average, weighted_sum

log = logging.getLogger(__name__)


class DegenerateWeightsError(ValueError):
    """No client moved, so reliability weights are 0/0."""


@dataclass
class ClientUpdate:
    client_id: int
    params: ProjectorParams
    alignment_error: float
    sample_count: int

    def __post_init__(self):
        if not np.isfinite(self.alignment_error) or self.alignment_error < 0:
            raise ValueError(f"client {self.client_id}: alignment error must be finite and >= 0")
        if self.sample_count < 1:
            raise ValueError(f"client {self.client_id}: sample count must be positive")


@dataclass
class CanonicalLayer:
    """Joint decomposition [W_1 ... W_K] = u diag(sigma) [v_1; ...; v_K]^T."""

    u: np.ndarray  # (I, r)
    sigma: np.ndarray  # (r,)
    v_blocks: list[np.ndarray]  # K x (O, r)

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ np.vstack(self.v_blocks).T


@dataclass
class LayerMomentum:
    u_prev: np.ndarray
    sigma_prev: np.ndarray


@dataclass
class MomentumState:
    layers: dict[int, LayerMomentum] = field(default_factory=dict)
    round_index: int = 0

    @property
    def empty(self) -> bool:
        return not self.layers


@dataclass
class FedCmpConfig:
    alpha: float = 1.0
    beta_min: float = 0.5
    beta_max: float = 0.9
    lam: float = 1.0
    csc: bool = True
    rwf: bool = True
    opm: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 <= self.beta_min <= self.beta_max < 1:
            raise ValueError("need 0 <= beta_min <= beta_max < 1")
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")


@dataclass
class AggregationInfo:
    """Per-round diagnostics reported by fedcmp_aggregate."""

    weights: np.ndarray
    beta_used: list[float | None]
    cosdis: list[float | None]
    orthogonality_defect: list[float | None]
    warnings: list[str] = field(default_factory=list)


def cra_decompose(client_weights: Sequence[np.ndarray]) -> CanonicalLayer:
    if len(client_weights) < 1:
        raise ValueError("need at least one client matrix")
    mats = [linalg.as_matrix(w, f"client weight {k}") for k, w in enumerate(client_weights)]
    shape = mats[0].shape
    for k, w in enumerate(mats):
        if w.shape != shape:
            raise ValueError(f"client {k} weight has shape {w.shape}, expected {shape}")
    res = linalg.svd(np.hstack(mats))
    o = shape[1]
    v_blocks = [res.vt[:, k * o:(k + 1) * o].T.copy() for k in range(len(mats))]
    return CanonicalLayer(res.u, res.sigma, v_blocks)


def reliability_weights(updates: Sequence[ClientUpdate], global_prev: ProjectorParams,
                        alpha: float) -> np.ndarray:
    """w_k proportional to ||theta_k - theta_0||^2 * exp(-alpha d_k), over all parameters."""
    if not updates:
        raise ValueError("need at least one update")
    sq = np.array([squared_distance(u.params, global_prev) for u in updates])
    d = np.array([u.alignment_error for u in updates])
    moved = sq > 0
    if not moved.any():
        raise DegenerateWeightsError("all reliability numerators are zero; no client moved")
    # log space so exp(-alpha d) cannot underflow to an all-zero vector
    logs = np.full(len(sq), -np.inf)
    logs[moved] = np.log(sq[moved]) - alpha * d[moved]
    num = np.exp(logs - logs[moved].max())
    return num / num.sum()


def fuse_global(decomp: CanonicalLayer, w: Sequence[float]) -> np.ndarray:
    if len(w) != len(decomp.v_blocks):
        raise ValueError(f"{len(w)} weights for {len(decomp.v_blocks)} coefficient blocks")
    v_fused = weighted_sum(decomp.v_blocks, w)
    return (decomp.u * decomp.sigma) @ v_fused.T


def adaptive_beta(cosdis: float, beta_min: float, beta_max: float, lam: float) -> float:
    return beta_min + (beta_max - beta_min) * (1.0 - cosdis ** lam)


def opm_update(fresh: CanonicalLayer, state: LayerMomentum, beta_min: float, beta_max: float,
               lam: float) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Momentum on the shared basis, retracted back to orthonormal columns.

    Returns (u_next, sigma_next, beta_used, cosdis).
    """
    aligned = linalg.align_signs(fresh.u, state.u_prev)
    cosdis = linalg.cos_dissimilarity(aligned, state.u_prev)
    beta = adaptive_beta(cosdis, beta_min, beta_max, lam)
    u_next = linalg.polar_orth(beta * state.u_prev + (1.0 - beta) * aligned)
    sigma_next = beta * state.sigma_prev + (1.0 - beta) * fresh.sigma
    return u_next, sigma_next, beta, cosdis


def _align_decomposition(decomp: CanonicalLayer, u_ref: np.ndarray) -> CanonicalLayer:
    """Flip columns of u and of every v_k together, so the factorization is unchanged."""
    signs = np.where(np.einsum("ij,ij->j", decomp.u, u_ref) < 0, -1.0, 1.0)
    return CanonicalLayer(decomp.u * signs, decomp.sigma, [v * signs for v in decomp.v_blocks])


def _sample_weights(updates: Sequence[ClientUpdate]) -> np.ndarray:
    n = np.array([u.sample_count for u in updates], dtype=np.float64)
    return n / n.sum()


def _raw_cosdis(new: np.ndarray, ref: np.ndarray) -> float:
    try:
        return linalg.cos_dissimilarity(new, ref)
    except ValueError:
        return 1.0


def fedcmp_aggregate(updates: Sequence[ClientUpdate], global_prev: ProjectorParams,
                     state: MomentumState, cfg: FedCmpConfig
                     ) -> tuple[ProjectorParams, MomentumState, AggregationInfo]:
    """One Fed-CMP server step.

    With csc on, each weight matrix goes through the joint SVD, its
    coefficient blocks are fused with the reliability weights, and (from the
    second call on, if opm is on) the shared basis and singular values are
    carried with orthogonality-preserving momentum. Biases are always a
    weighted average. With csc off the weights are averaged directly, and
    opm degrades to plain momentum on the raw parameters.
    """
    if not updates:
        raise ValueError("need at least one update")
    for u in updates:
        global_prev.check_shape(u.params, f"client {u.client_id} params")

    warnings: list[str] = []
    if cfg.rwf:
        try:
            w = reliability_weights(updates, global_prev, cfg.alpha)
        except DegenerateWeightsError:
            msg = "degenerate reliability weights; using uniform"
            log.warning(msg)
            warnings.append(msg)
            w = np.full(len(updates), 1.0 / len(updates))
    else:
        w = _sample_weights(updates)

    n_layers = len(global_prev.layers)
    betas: list[float | None] = [None] * n_layers
    cosdis: list[float | None] = [None] * n_layers
    defects: list[float | None] = [None] * n_layers
    use_momentum = cfg.opm and state.round_index >= 1
    new_state = MomentumState(round_index=state.round_index + 1)
    layers = []

    if not cfg.csc:
        avg = weighted_average([u.params for u in updates], w)
        for i, (layer, prev) in enumerate(zip(avg.layers, global_prev.layers)):
            if use_momentum:
                cd = _raw_cosdis(layer.weight, prev.weight)
                beta = adaptive_beta(cd, cfg.beta_min, cfg.beta_max, cfg.lam)
                layer = Layer(beta * prev.weight + (1 - beta) * layer.weight,
                              beta * prev.bias + (1 - beta) * layer.bias)
                betas[i], cosdis[i] = beta, cd
            layers.append(layer)
        return (ProjectorParams(layers, global_prev.activation), new_state,
                AggregationInfo(w, betas, cosdis, defects, warnings))

    for i in range(n_layers):
        decomp = cra_decompose([u.params.layers[i].weight for u in updates])
        u_basis, sigma = decomp.u, decomp.sigma
        if use_momentum and i in state.layers:
            decomp = _align_decomposition(decomp, state.layers[i].u_prev)
            u_basis, sigma, betas[i], cosdis[i] = opm_update(
                decomp, state.layers[i], cfg.beta_min, cfg.beta_max, cfg.lam)
        if cfg.opm:
            new_state.layers[i] = LayerMomentum(u_basis, sigma)
            defects[i] = linalg.orthogonality_defect(u_basis)
        weight = fuse_global(CanonicalLayer(u_basis, sigma, decomp.v_blocks), w)
        bias = weighted_sum([u.params.layers[i].bias for u in updates], w)
        layers.append(Layer(weight, bias))

    if not cfg.opm:
        new_state = MomentumState(round_index=state.round_index + 1)
    return (ProjectorParams(layers, global_prev.activation), new_state,
            AggregationInfo(w, betas, cosdis, defects, warnings))


def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> ProjectorParams:
    if not updates:
        raise ValueError("need at least one update")
    return weighted_average([u.params for u in updates], _sample_weights(updates))


@dataclass
class FedAdamConfig:
    server_lr: float = 1e-2
    b1: float = 0.9
    b2: float = 0.99
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


def fedadam_aggregate(updates: Sequence[ClientUpdate], global_prev: ProjectorParams,
                      adam_state: AdamState, cfg: FedAdamConfig
                      ) -> tuple[ProjectorParams, AdamState]:
    """Adam on the pseudo-gradient fedavg(updates) - global_prev, with bias correction."""
    theta = global_prev.flatten()
    delta = fedavg_aggregate(updates).flatten() - theta
    m = np.zeros_like(theta) if adam_state.m is None else adam_state.m
    v = np.zeros_like(theta) if adam_state.v is None else adam_state.v
    t = adam_state.t + 1
    m = cfg.b1 * m + (1 - cfg.b1) * delta
    v = cfg.b2 * v + (1 - cfg.b2) * delta * delta
    m_hat = m / (1 - cfg.b1 ** t)
    v_hat = v / (1 - cfg.b2 ** t)
    theta = theta + cfg.server_lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return global_prev.unflatten(theta), AdamState(m, v, t)


def fedprox_penalty(local: ProjectorParams, global_ref: ProjectorParams,
                    mu: float) -> tuple[float, ProjectorParams]:
    """(mu/2) ||theta - theta_ref||^2 and its gradient mu (theta - theta_ref)."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    local.check_shape(global_ref)
    loss = 0.5 * mu * squared_distance(local, global_ref)
    grad = ProjectorParams(
        [Layer(mu * (a.weight - b.weight), mu * (a.bias - b.bias))
         for a, b in zip(local.layers, global_ref.layers)],
        local.activation,
    )
    return loss, grad
