"""Federation driver: broadcast, local training, aggregation, evaluation, per round."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import aggregation as agg
from .client import TrainConfig, batch_loss, local_train
from .datagen import Corpus, CorpusSpec, PartitionPlan
from .params import ProjectorParams, squared_distance

AGGREGATORS = ("fedcmp", "fedavg", "fedadam", "fedprox")
LR_SCHEDULES = ("constant", "cosine")


class FederationError(RuntimeError):
    pass


@dataclass
class FederationConfig:
    num_clients: int = 5
    num_rounds: int = 10
    aggregator: str = "fedcmp"
    alpha: float = 1.0
    beta_min: float = 0.5
    beta_max: float = 0.9
    lam: float = 1.0
    csc: bool = True
    rwf: bool = True
    opm: bool = True
    lr: float = 0.02
    lr_schedule: str = "constant"
    warmup_ratio: float = 0.03
    batch_size: int = 32
    prox_mu: float = 0.01
    server_lr: float = 1e-2
    adam_b1: float = 0.9
    adam_b2: float = 0.99
    adam_eps: float = 1e-8
    layer_dims: list[int] = field(default_factory=lambda: [16, 12, 8])
    activation: str = "identity"
    init_scale: float = 1.0
    seed: int = 0
    partition_mode: str = "image_image"
    eval_fraction: float = 0.2
    corpus: dict[str, Any] | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}; valid: {', '.join(AGGREGATORS)}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}; valid: {', '.join(LR_SCHEDULES)}")
        if self.num_clients < 1 or self.num_rounds < 1:
            raise ValueError("num_clients and num_rounds must be >= 1")
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs at least input and output dims")
        # validates alpha, beta bounds and lambda
        self.fedcmp_config()

    @classmethod
    def from_dict(cls, d: dict) -> "FederationConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def fedcmp_config(self) -> agg.FedCmpConfig:
        return agg.FedCmpConfig(self.alpha, self.beta_min, self.beta_max, self.lam,
                                self.csc, self.rwf, self.opm)

    def adam_config(self) -> agg.FedAdamConfig:
        return agg.FedAdamConfig(self.server_lr, self.adam_b1, self.adam_b2, self.adam_eps)

    def corpus_spec(self) -> CorpusSpec:
        spec = dict(self.corpus or {})
        spec.setdefault("seed", self.seed)
        spec.setdefault("d_v", self.layer_dims[0])
        spec.setdefault("c", self.layer_dims[-1])
        spec.setdefault("num_clusters", self.num_clients)
        return CorpusSpec(**spec)

    def round_lr(self, r: int) -> float:
        """Learning rate for 0-based round r."""
        if self.lr_schedule == "constant":
            return self.lr
        warm = self.warmup_ratio * self.num_rounds
        if r < warm:
            return self.lr * (r + 1) / math.ceil(warm)
        span = max(self.num_rounds - warm, 1e-12)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * (r - warm) / span))


@dataclass
class ClientRecord:
    client_id: int
    mean_loss: float
    alignment_error: float
    update_sq_norm: float
    weight: float
    steps: int


@dataclass
class RoundRecord:
    round_index: int
    clients: list[ClientRecord]
    beta_used: list[float | None]
    cosdis: list[float | None]
    orthogonality_defect: list[float | None]
    eval_loss: float
    warnings: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d

    def to_json(self) -> str:
        # wall time stays out so identical runs serialize identically
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class FederationResult:
    records: list[RoundRecord]
    final_params: ProjectorParams
    momentum: agg.MomentumState
    adam: agg.AdamState


def evaluate(params: ProjectorParams, visual: np.ndarray, text: np.ndarray) -> float:
    """Mean surrogate loss over an eval set."""
    if len(visual) == 0:
        raise ValueError("empty eval set")
    loss, _, _ = batch_loss(params, np.asarray(visual, dtype=np.float64),
                            np.asarray(text, dtype=np.float64))
    return loss


def client_seed(seed: int, round_index: int, client_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 1, round_index, client_id])


def initial_params(cfg: FederationConfig) -> ProjectorParams:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    return ProjectorParams.init(cfg.layer_dims, rng, cfg.activation, cfg.init_scale)


def run_federation(cfg: FederationConfig, corpus: Corpus, plan: PartitionPlan,
                   init: ProjectorParams | None = None) -> FederationResult:
    if plan.num_clients != cfg.num_clients or plan.num_rounds != cfg.num_rounds:
        raise FederationError(f"plan is for {plan.num_clients} clients x {plan.num_rounds} rounds, "
                              f"config wants {cfg.num_clients} x {cfg.num_rounds}")
    plan.validate()
    eval_idx = plan.eval_indices
    if len(eval_idx) == 0:
        raise FederationError("plan has no held-out eval samples")
    eval_v, eval_t = corpus.visual[eval_idx], corpus.text[eval_idx]

    global_params = initial_params(cfg) if init is None else init.copy()
    momentum = agg.MomentumState()
    adam = agg.AdamState()
    fedcmp_cfg = cfg.fedcmp_config()
    records: list[RoundRecord] = []
    pool = ThreadPoolExecutor(cfg.jobs) if cfg.jobs > 1 else None

    try:
        for r in range(cfg.num_rounds):
            t0 = time.perf_counter()
            train_cfg = TrainConfig(cfg.round_lr(r), cfg.prox_mu if cfg.aggregator == "fedprox" else 0.0,
                                    cfg.batch_size)

            def train(k: int, g=global_params, tc=train_cfg, r=r):
                try:
                    return local_train(g, plan.shard(corpus, k, r), tc, client_seed(cfg.seed, r, k))
                except Exception as e:
                    raise FederationError(f"round {r + 1}, client {k}: {e}") from e

            ids = range(cfg.num_clients)
            reports = list(pool.map(train, ids)) if pool else [train(k) for k in ids]
            updates = [agg.ClientUpdate(k, rep.params_after, rep.alignment_error,
                                        len(plan.shard_indices(k, r)))
                       for k, rep in enumerate(reports)]

            n_layers = len(global_params.layers)
            betas: list[float | None] = [None] * n_layers
            cosdis: list[float | None] = [None] * n_layers
            defects: list[float | None] = [None] * n_layers
            warnings: list[str] = []
            try:
                if cfg.aggregator == "fedcmp":
                    new_params, momentum, info = agg.fedcmp_aggregate(updates, global_params, momentum,
                                                                      fedcmp_cfg)
                    weights = info.weights
                    betas, cosdis, defects = info.beta_used, info.cosdis, info.orthogonality_defect
                    warnings = info.warnings
                elif cfg.aggregator == "fedadam":
                    new_params, adam = agg.fedadam_aggregate(updates, global_params, adam,
                                                             cfg.adam_config())
                    weights = _sample_weights(updates)
                else:
                    new_params = agg.fedavg_aggregate(updates)
                    weights = _sample_weights(updates)
            except Exception as e:
                raise FederationError(f"round {r + 1}, aggregation: {e}") from e

            clients = [ClientRecord(u.client_id, rep.mean_loss, rep.alignment_error,
                                    squared_distance(u.params, global_params), float(w), rep.steps)
                       for u, rep, w in zip(updates, reports, weights)]
            global_params = new_params
            records.append(RoundRecord(r + 1, clients, betas, cosdis, defects,
                                       evaluate(global_params, eval_v, eval_t), warnings,
                                       time.perf_counter() - t0))
    finally:
        if pool:
            pool.shutdown()
    return FederationResult(records, global_params, momentum, adam)


def _sample_weights(updates) -> np.ndarray:
    n = np.array([u.sample_count for u in updates], dtype=np.float64)
    return n / n.sum()


def write_metrics(records: list[RoundRecord], out_dir: str | Path):
    """metrics.jsonl (one RoundRecord per line), rounds.csv, and timings.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    n_layers = len(records[0].beta_used) if records else 0
    header = ["round", "eval_loss", "mean_client_loss", "mean_alignment_error"]
    for i in range(n_layers):
        header += [f"beta_{i}", f"cosdis_{i}", f"orth_defect_{i}"]
    lines = [",".join(header)]
    for rec in records:
        row = [rec.round_index, rec.eval_loss,
               float(np.mean([c.mean_loss for c in rec.clients])),
               float(np.mean([c.alignment_error for c in rec.clients]))]
        for i in range(n_layers):
            row += [rec.beta_used[i], rec.cosdis[i], rec.orthogonality_defect[i]]
        lines.append(",".join("" if v is None else repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    (out / "rounds.csv").write_text("\n".join(lines) + "\n")
    (out / "timings.csv").write_text(
        "round,wall_time\n" + "".join(f"{r.round_index},{r.wall_time:.6f}\n" for r in records))


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
