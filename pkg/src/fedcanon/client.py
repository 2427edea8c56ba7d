"""Simulated client: surrogate alignment loss and one-epoch local SGD.

The surrogate replaces the autoregressive LLM loss with a pooled-embedding
regression: loss = ||mean_rows(projector(visual)) - mean_rows(text)||^2.
Its minimizer also minimizes the client's alignment error d_k.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import fedprox_penalty
from .params import Layer, ProjectorParams


class DivergenceError(FloatingPointError):
    pass


@dataclass
class Sample:
    visual_tokens: np.ndarray  # (N, D_v)
    text_tokens: np.ndarray  # (L, C)


@dataclass
class Shard:
    """One client's data for one round, stored as stacked token arrays."""

    visual: np.ndarray  # (S, N, D_v)
    text: np.ndarray  # (S, L, C)
    client_id: int = 0
    round_index: int = 0

    def __post_init__(self):
        if len(self.visual) != len(self.text):
            raise ValueError("visual and text sample counts differ")

    def __len__(self) -> int:
        return len(self.visual)

    @classmethod
    def from_samples(cls, samples: list[Sample], client_id: int = 0, round_index: int = 0) -> "Shard":
        return cls(np.stack([s.visual_tokens for s in samples]),
                   np.stack([s.text_tokens for s in samples]), client_id, round_index)


@dataclass
class TrainConfig:
    lr: float = 0.02
    prox_mu: float = 0.0
    batch_size: int = 32


@dataclass
class TrainReport:
    params_after: ProjectorParams
    mean_loss: float
    alignment_error: float
    steps: int


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if name == "tanh" else z


def _act_grad(name: str, z: np.ndarray) -> np.ndarray | float:
    return 1.0 - np.tanh(z) ** 2 if name == "tanh" else 1.0


def _forward_cache(params: ProjectorParams, x: np.ndarray):
    if x.shape[-1] != params.layers[0].weight.shape[0]:
        raise ValueError(f"visual dim {x.shape[-1]} does not match projector input "
                         f"{params.layers[0].weight.shape[0]}")
    hs, zs = [x], []
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        z = hs[-1] @ layer.weight + layer.bias
        zs.append(z)
        hs.append(z if i == last else _act(params.activation, z))
    return hs, zs


def forward(params: ProjectorParams, visual_tokens: np.ndarray) -> np.ndarray:
    """Project visual tokens (..., N, D_v) to language-space tokens (..., N, C)."""
    hs, _ = _forward_cache(params, np.asarray(visual_tokens, dtype=np.float64))
    return hs[-1]


def pooled_residuals(params: ProjectorParams, visual: np.ndarray, text: np.ndarray) -> np.ndarray:
    """mean_rows(forward(visual)) - mean_rows(text) per sample, shape (S, C)."""
    out = forward(params, visual)
    if out.shape[-1] != text.shape[-1]:
        raise ValueError(f"projector output dim {out.shape[-1]} != text dim {text.shape[-1]}")
    return out.mean(axis=-2) - text.mean(axis=-2)


def batch_loss(params: ProjectorParams, visual: np.ndarray, text: np.ndarray
               ) -> tuple[float, ProjectorParams, np.ndarray]:
    """Mean surrogate loss over a batch (B, N, D_v) and its gradient.

    Also returns the per-sample losses.
    """
    # overflow is checked explicitly below and reported as DivergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        return _batch_loss(params, visual, text)


def _batch_loss(params, visual, text):
    hs, zs = _forward_cache(params, visual)
    out = hs[-1]
    resid = out.mean(axis=1) - text.mean(axis=1)  # (B, C)
    per_sample = np.sum(resid * resid, axis=1)
    if not np.all(np.isfinite(per_sample)):
        raise DivergenceError("non-finite surrogate loss")
    b, n = visual.shape[0], visual.shape[1]
    dz = np.broadcast_to((2.0 / (b * n)) * resid[:, None, :], out.shape)
    grads = []
    for i in range(len(params.layers) - 1, -1, -1):
        h = hs[i]
        gw = np.einsum("bnd,bnc->dc", h, dz)
        gb = dz.sum(axis=(0, 1))
        grads.append(Layer(gw, gb))
        if i:
            dz = (dz @ params.layers[i].weight.T) * _act_grad(params.activation, zs[i - 1])
    grads.reverse()
    if not all(np.all(np.isfinite(g.weight)) and np.all(np.isfinite(g.bias)) for g in grads):
        raise DivergenceError("non-finite gradient")
    return float(per_sample.mean()), ProjectorParams(grads, params.activation), per_sample


def surrogate_loss(params: ProjectorParams, sample: Sample) -> tuple[float, ProjectorParams]:
    loss, grads, _ = batch_loss(params, np.asarray(sample.visual_tokens, dtype=np.float64)[None],
                                np.asarray(sample.text_tokens, dtype=np.float64)[None])
    return loss, grads


def alignment_error(params: ProjectorParams, visual: np.ndarray, text: np.ndarray) -> float:
    """Mean L2 distance between pooled projected visual and pooled text tokens."""
    resid = pooled_residuals(params, visual, text)
    return float(np.mean(np.sqrt(np.sum(resid * resid, axis=1))))


def local_train(global_params: ProjectorParams, shard: Shard, cfg: TrainConfig,
                seed: int | np.random.SeedSequence = 0,
                prox_ref: ProjectorParams | None = None) -> TrainReport:
    """One epoch of mini-batch SGD over the shard in a seeded shuffled order."""
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard in round {shard.round_index}")
    if cfg.lr < 0:
        raise ValueError("lr must be >= 0")
    ref = prox_ref if prox_ref is not None else global_params
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(shard))
    params = global_params.copy()
    total, steps = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        try:
            loss, grads, _ = batch_loss(params, shard.visual[idx], shard.text[idx])
        except DivergenceError as e:
            raise DivergenceError(f"client {shard.client_id}, round {shard.round_index}: "
                                  f"diverged at step {steps} ({e})") from e
        if cfg.prox_mu > 0:
            prox_loss, prox_grad = fedprox_penalty(params, ref, cfg.prox_mu)
            loss_total = loss + prox_loss
            grads = ProjectorParams(
                [Layer(g.weight + p.weight, g.bias + p.bias)
                 for g, p in zip(grads.layers, prox_grad.layers)], params.activation)
        else:
            loss_total = loss
        if not np.isfinite(loss_total):
            raise DivergenceError(f"client {shard.client_id}, round {shard.round_index}: "
                                  f"non-finite loss at step {steps}")
        total += loss * len(idx)
        with np.errstate(over="ignore", invalid="ignore"):
            stepped = [Layer(p.weight - cfg.lr * g.weight, p.bias - cfg.lr * g.bias)
                       for p, g in zip(params.layers, grads.layers)]
        if not all(np.all(np.isfinite(l.weight)) and np.all(np.isfinite(l.bias)) for l in stepped):
            raise DivergenceError(f"client {shard.client_id}, round {shard.round_index}: "
                                  f"parameters overflowed at step {steps}")
        params = ProjectorParams(stepped, params.activation)
        steps += 1
    with np.errstate(over="ignore", invalid="ignore"):
        d_k = alignment_error(params, shard.visual, shard.text)
    if not np.isfinite(d_k) or not np.isfinite(total):
        raise DivergenceError(f"client {shard.client_id}, round {shard.round_index}: "
                              f"non-finite alignment error after {steps} steps")
    return TrainReport(params, total / len(shard), d_k, steps)
