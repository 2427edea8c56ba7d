"""Synthetic multimodal corpora and heterogeneity-aware client/round partitioning.

Visual tokens scatter around cluster centers on a sphere. Text is a fixed
linear map of the pooled visual embedding plus a per-topic offset and noise,
repeated over L tokens. A sample's text topic equals its visual cluster with
probability `topic_agreement`, otherwise it is drawn uniformly; this lets
text-based clustering disagree with image-based clustering.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .client import Sample, Shard

MODES = ("iid", "image_image", "text_text", "joint", "cross_modal", "dirichlet")
KMEANS_ITERS = 50
KMEANS_RESTARTS = 10

CORPUS_MAGIC = b"FCMPCORP"
PLAN_MAGIC = b"FCMPPLAN"
FORMAT_VERSION = 1


class PartitionError(ValueError):
    pass


@dataclass
class CorpusSpec:
    total_samples: int = 12500
    num_clusters: int = 5
    d_v: int = 16
    c: int = 8
    n_tokens: int = 4
    l_tokens: int = 4
    noise_std: float = 0.1
    cluster_sep: float = 3.0
    visual_std: float = 1.0
    offset_scale: float = 1.0
    topic_agreement: float = 1.0
    max_per_cluster: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_clusters < 1 or self.d_v < 1 or self.c < 1:
            raise ValueError("num_clusters and dims must be >= 1")
        if self.n_tokens < 1 or self.l_tokens < 1 or self.total_samples < 1:
            raise ValueError("token counts and total_samples must be >= 1")
        if self.noise_std < 0 or self.cluster_sep < 0 or self.visual_std < 0 or self.offset_scale < 0:
            raise ValueError("scales must be >= 0")
        if not 0 <= self.topic_agreement <= 1:
            raise ValueError("topic_agreement must lie in [0, 1]")


@dataclass
class Corpus:
    visual: np.ndarray  # (S, N, D_v)
    text: np.ndarray  # (S, L, C)
    cluster_labels: np.ndarray  # (S,)
    ground_truth_map: np.ndarray  # (D_v, C)
    offsets: np.ndarray  # (num_clusters, C)
    centers: np.ndarray  # (num_clusters, D_v)
    spec: CorpusSpec = field(default_factory=CorpusSpec)

    def __len__(self) -> int:
        return len(self.visual)

    def sample(self, i: int) -> Sample:
        return Sample(self.visual[i], self.text[i])

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def pooled_visual(self) -> np.ndarray:
        return self.visual.mean(axis=1)

    def pooled_text(self) -> np.ndarray:
        return self.text.mean(axis=1)


def _sphere_points(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    k = spec.num_clusters
    centers = spec.cluster_sep * _sphere_points(rng, k, spec.d_v)
    gt = rng.standard_normal((spec.d_v, spec.c)) / np.sqrt(spec.d_v)
    offsets = spec.offset_scale * _sphere_points(rng, k, spec.c)

    labels = rng.permutation(np.arange(spec.total_samples) % k)
    topics = labels.copy()
    swap = rng.random(spec.total_samples) >= spec.topic_agreement
    topics[swap] = rng.integers(0, k, int(swap.sum()))

    visual = centers[labels][:, None, :] + spec.visual_std * rng.standard_normal(
        (spec.total_samples, spec.n_tokens, spec.d_v))
    pooled_text = visual.mean(axis=1) @ gt + offsets[topics]
    pooled_text = pooled_text + spec.noise_std * rng.standard_normal(pooled_text.shape)
    text = np.repeat(pooled_text[:, None, :], spec.l_tokens, axis=1)

    corpus = Corpus(visual, text, labels, gt, offsets, centers, spec)
    if spec.max_per_cluster is not None:
        corpus = prune_clusters(corpus, spec.max_per_cluster)
    return corpus


def prune_clusters(corpus: Corpus, max_per_cluster: int) -> Corpus:
    """Keep at most `max_per_cluster` samples per cluster, nearest to the center first."""
    pooled = corpus.pooled_visual()
    keep = []
    for c in range(len(corpus.centers)):
        idx = np.flatnonzero(corpus.cluster_labels == c)
        dist = np.linalg.norm(pooled[idx] - corpus.centers[c], axis=1)
        keep.append(idx[np.argsort(dist, kind="stable")[:max_per_cluster]])
    keep = np.sort(np.concatenate(keep))
    return Corpus(corpus.visual[keep], corpus.text[keep], corpus.cluster_labels[keep],
                  corpus.ground_truth_map, corpus.offsets, corpus.centers, corpus.spec)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm pooled embedding")
    return x / n


def _shared_space(visual_pooled: np.ndarray, text_pooled: np.ndarray,
                  align_map: np.ndarray | None) -> np.ndarray:
    if visual_pooled.shape[-1] == text_pooled.shape[-1]:
        return visual_pooled
    if align_map is None:
        raise ValueError("cross_modal similarity across different dims needs an align_map")
    return visual_pooled @ align_map


def similarity(a: Sample, b: Sample, mode: str, align_map: np.ndarray | None = None) -> float:
    """Cosine-style similarity of two samples' pooled, L2-normalized embeddings.

    For cross_modal with d_v != c, a's pooled visual embedding is first
    mapped into text space by `align_map` (D_v x C).
    """
    va, vb = _unit(a.visual_tokens.mean(axis=0)), _unit(b.visual_tokens.mean(axis=0))
    ta, tb = _unit(a.text_tokens.mean(axis=0)), _unit(b.text_tokens.mean(axis=0))
    if mode == "image_image":
        return float(va @ vb)
    if mode == "text_text":
        return float(ta @ tb)
    if mode == "joint":
        return float(va @ vb + ta @ tb)
    if mode == "cross_modal":
        xa = _unit(_shared_space(a.visual_tokens.mean(axis=0), tb, align_map))
        return float(xa @ tb)
    raise ValueError(f"unknown similarity mode {mode!r}")


def _kmeans_once(points: np.ndarray, src: np.ndarray, k: int, rng: np.random.Generator,
                 iters: int) -> tuple[np.ndarray, float]:
    n = len(points)
    first = int(rng.integers(n))
    cents = [src[first]]
    best = points @ src[first]
    for _ in range(1, k):
        gap = np.clip(1.0 - best, 0.0, None)
        prob = gap / gap.sum() if gap.sum() > 0 else np.full(n, 1.0 / n)
        j = int(rng.choice(n, p=prob))
        cents.append(src[j])
        best = np.maximum(best, points @ src[j])
    cents = np.array(cents)
    labels = np.full(n, -1)
    for _ in range(iters):
        new = np.argmax(points @ cents.T, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = src[labels == c]
            if len(members) == 0:
                # reseed an emptied cluster at the worst-fitting point
                fit = np.max(points @ cents.T, axis=1)
                members = src[[int(np.argmin(fit))]]
            m = members.sum(axis=0)
            norm = np.linalg.norm(m)
            cents[c] = m / norm if norm > 0 else members[0]
    score = float(np.sum(np.max(points @ cents.T, axis=1)))
    return labels, score


def spherical_kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
                     centroid_source: np.ndarray | None = None, iters: int = KMEANS_ITERS,
                     restarts: int = KMEANS_RESTARTS) -> np.ndarray:
    """Cluster unit vectors by cosine similarity with k-means++ style seeding.

    Assignment uses points @ centroid; centroids are the normalized mean of
    `centroid_source` rows (defaults to `points`) over each cluster, which is
    how the asymmetric cross-modal similarity is handled. The best of
    `restarts` seeded runs (highest total similarity to assigned centroid) wins.
    """
    src = points if centroid_source is None else centroid_source
    if len(points) < k:
        raise PartitionError(f"cannot form {k} clusters from {len(points)} points")
    best_labels, best_score = None, -np.inf
    for _ in range(max(restarts, 1)):
        labels, score = _kmeans_once(points, src, k, rng, iters)
        if score > best_score:
            best_labels, best_score = labels, score
    return best_labels


def clustering_features(corpus: Corpus, mode: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Unit feature rows whose dot products realise `similarity` for `mode`."""
    v = _unit(corpus.pooled_visual())
    t = _unit(corpus.pooled_text())
    if mode == "image_image":
        return v, None
    if mode == "text_text":
        return t, None
    if mode == "joint":
        # (v_a.v_b + t_a.t_b) / 2 is the dot product of these rows
        return np.hstack([v, t]) / np.sqrt(2.0), None
    if mode == "cross_modal":
        x = _unit(_shared_space(corpus.pooled_visual(), t, corpus.ground_truth_map))
        return x, t
    raise ValueError(f"mode {mode!r} does not cluster")


@dataclass
class PartitionPlan:
    """Per-sample (client, round) assignment; -1 marks unassigned samples."""

    mode: str
    num_clients: int
    num_rounds: int
    client: np.ndarray
    round: np.ndarray
    eval_mask: np.ndarray
    gamma: float | None = None

    def shard_indices(self, client_id: int, round_index: int) -> np.ndarray:
        return np.flatnonzero((self.client == client_id) & (self.round == round_index))

    def client_indices(self, client_id: int) -> np.ndarray:
        return np.flatnonzero(self.client == client_id)

    @property
    def eval_indices(self) -> np.ndarray:
        return np.flatnonzero(self.eval_mask)

    def shard(self, corpus: Corpus, client_id: int, round_index: int) -> Shard:
        idx = self.shard_indices(client_id, round_index)
        return Shard(corpus.visual[idx], corpus.text[idx], client_id, round_index)

    def validate(self):
        """Check the one-pass contract: disjoint, non-empty shards, nothing reused for eval."""
        if len(self.client) != len(self.round) or len(self.client) != len(self.eval_mask):
            raise PartitionError("plan columns have different lengths")
        assigned = self.client >= 0
        if np.any(assigned & self.eval_mask):
            raise PartitionError("a training sample is also in the eval set")
        if np.any((self.round >= 0) != assigned):
            raise PartitionError("client and round assignments disagree")
        if np.any(self.client >= self.num_clients) or np.any(self.round >= self.num_rounds):
            raise PartitionError("assignment out of range")
        for k in range(self.num_clients):
            for r in range(self.num_rounds):
                if len(self.shard_indices(k, r)) == 0:
                    raise PartitionError(f"shard (client {k}, round {r}) is empty; use more samples")


def holdout_split(corpus: Corpus, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified-by-cluster split into (train_indices, eval_indices)."""
    if not 0 <= fraction < 1:
        raise ValueError("eval fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    evals = []
    for c in np.unique(corpus.cluster_labels):
        idx = rng.permutation(np.flatnonzero(corpus.cluster_labels == c))
        evals.append(idx[:int(round(fraction * len(idx)))])
    eval_idx = np.sort(np.concatenate(evals)) if evals else np.array([], dtype=int)
    mask = np.zeros(len(corpus), dtype=bool)
    mask[eval_idx] = True
    return np.flatnonzero(~mask), eval_idx


def _client_groups(corpus: Corpus, idx: np.ndarray, k: int, mode: str, rng: np.random.Generator,
                   gamma: float) -> list[np.ndarray]:
    if mode == "iid":
        perm = rng.permutation(idx)
        return [perm[c::k] for c in range(k)]
    if mode == "dirichlet":
        groups: list[list[int]] = [[] for _ in range(k)]
        labels = corpus.cluster_labels[idx]
        for c in np.unique(labels):
            members = rng.permutation(idx[labels == c])
            p = rng.dirichlet(np.full(k, gamma))
            cuts = (np.cumsum(p)[:-1] * len(members)).astype(int)
            for client, part in enumerate(np.split(members, cuts)):
                groups[client].extend(part.tolist())
        return [np.sort(np.array(g, dtype=int)) for g in groups]
    feats, src = clustering_features(corpus, mode)
    labels = spherical_kmeans(feats[idx], k, rng, None if src is None else src[idx])
    sizes = np.bincount(labels, minlength=k)
    order = np.argsort(-sizes, kind="stable")
    return [idx[labels == c] for c in order]


def partition(corpus: Corpus, num_clients: int, num_rounds: int, mode: str, seed: int = 0,
              indices: np.ndarray | None = None, eval_indices: np.ndarray | None = None,
              gamma: float = 0.5) -> PartitionPlan:
    """Assign samples to clients by `mode`, then split each client into R one-pass shards.

    Every shard gets the same size (the smallest client's floor(n_k / R));
    remainders are dropped.
    """
    if mode not in MODES:
        raise ValueError(f"unknown partition mode {mode!r}; choose from {MODES}")
    if num_clients < 1 or num_rounds < 1:
        raise ValueError("num_clients and num_rounds must be >= 1")
    idx = np.arange(len(corpus)) if indices is None else np.sort(np.asarray(indices, dtype=int))
    if len(idx) < num_clients * num_rounds:
        raise PartitionError(f"{len(idx)} samples cannot fill {num_clients} clients x "
                             f"{num_rounds} rounds; generate more samples")
    rng = np.random.default_rng(seed)
    groups = _client_groups(corpus, idx, num_clients, mode, rng, gamma)
    per_shard = min(len(g) for g in groups) // num_rounds
    if per_shard == 0:
        raise PartitionError("a client received fewer samples than rounds; generate more samples "
                             "or use a milder partition")
    client = np.full(len(corpus), -1)
    rnd = np.full(len(corpus), -1)
    for k, g in enumerate(groups):
        g = rng.permutation(g)[:per_shard * num_rounds]
        client[g] = k
        rnd[g] = np.arange(len(g)) % num_rounds
    eval_mask = np.zeros(len(corpus), dtype=bool)
    if eval_indices is not None:
        eval_mask[np.asarray(eval_indices, dtype=int)] = True
    plan = PartitionPlan(mode, num_clients, num_rounds, client, rnd, eval_mask,
                         gamma if mode == "dirichlet" else None)
    plan.validate()
    return plan


def label_tv_distance(plan: PartitionPlan, labels: np.ndarray, num_labels: int) -> float:
    """Mean pairwise total-variation distance between client label distributions."""
    dists = []
    for k in range(plan.num_clients):
        counts = np.bincount(labels[plan.client_indices(k)], minlength=num_labels)
        dists.append(counts / max(counts.sum(), 1))
    tv = [0.5 * np.abs(dists[a] - dists[b]).sum()
          for a in range(len(dists)) for b in range(a + 1, len(dists))]
    return float(np.mean(tv)) if tv else 0.0


# Binary layout, all little-endian:
#   magic (8 bytes) | version u32 | ncols u32 | nrows u64 | per column: width u64
#   then each column as nrows * width float64 values, column after column.


def _write_columns(path: Path, magic: bytes, columns: list[np.ndarray]):
    with open(path, "wb") as f:
        nrows = len(columns[0])
        f.write(magic)
        f.write(struct.pack("<IIQ", FORMAT_VERSION, len(columns), nrows))
        flat = [np.asarray(c, dtype="<f8").reshape(nrows, -1) for c in columns]
        for c in flat:
            f.write(struct.pack("<Q", c.shape[1]))
        for c in flat:
            f.write(np.ascontiguousarray(c).tobytes())


def _read_columns(path: Path, magic: bytes) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != magic:
        raise ValueError(f"{path}: bad magic {data[:8]!r}")
    version, ncols, nrows = struct.unpack_from("<IIQ", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 24
    widths = struct.unpack_from(f"<{ncols}Q", data, pos)
    pos += 8 * ncols
    cols = []
    for w in widths:
        n = nrows * w
        cols.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(nrows, w).copy())
        pos += 8 * n
    return cols


def save_corpus(corpus: Corpus, path: str | Path):
    # generator constants go to a one-row sidecar with the same layout
    _write_columns(Path(path), CORPUS_MAGIC, [
        corpus.visual.reshape(len(corpus), -1),
        corpus.text.reshape(len(corpus), -1),
        corpus.cluster_labels,
    ])
    _write_columns(Path(str(path) + ".model"), CORPUS_MAGIC, [
        corpus.ground_truth_map.reshape(1, -1),
        corpus.offsets.reshape(1, -1),
        corpus.centers.reshape(1, -1),
    ])


def load_corpus(path: str | Path, spec: CorpusSpec) -> Corpus:
    visual, text, labels = _read_columns(Path(path), CORPUS_MAGIC)
    gt, offsets, centers = _read_columns(Path(str(path) + ".model"), CORPUS_MAGIC)
    n = len(visual)
    return Corpus(
        visual.reshape(n, spec.n_tokens, spec.d_v),
        text.reshape(n, spec.l_tokens, spec.c),
        labels[:, 0].astype(int),
        gt.reshape(spec.d_v, spec.c),
        offsets.reshape(-1, spec.c),
        centers.reshape(-1, spec.d_v),
        spec,
    )


def save_plan(plan: PartitionPlan, path: str | Path):
    _write_columns(Path(path), PLAN_MAGIC, [plan.client, plan.round, plan.eval_mask.astype(float)])


def load_plan(path: str | Path, mode: str, num_clients: int, num_rounds: int,
              gamma: float | None = None) -> PartitionPlan:
    client, rnd, ev = _read_columns(Path(path), PLAN_MAGIC)
    plan = PartitionPlan(mode, num_clients, num_rounds, client[:, 0].astype(int),
                         rnd[:, 0].astype(int), ev[:, 0] > 0, gamma)
    plan.validate()
    return plan


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(out_dir: str | Path, corpus: Corpus, plan: PartitionPlan,
                  eval_fraction: float, created: str | None = None) -> dict:
    """Write corpus.bin, corpus.bin.model, plan.bin and manifest.json into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out / "corpus.bin")
    save_plan(plan, out / "plan.bin")
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": asdict(corpus.spec),
        "num_samples": len(corpus),
        "num_train": int((plan.client >= 0).sum()),
        "num_eval": int(plan.eval_mask.sum()),
        "partition": {"mode": plan.mode, "num_clients": plan.num_clients,
                      "num_rounds": plan.num_rounds, "gamma": plan.gamma,
                      "eval_fraction": eval_fraction},
        "files": {name: _sha256(out / name) for name in ("corpus.bin", "corpus.bin.model", "plan.bin")},
        "created": created,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(data_dir: str | Path) -> tuple[Corpus, PartitionPlan, dict]:
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    for name, digest in manifest.get("files", {}).items():
        if _sha256(d / name) != digest:
            raise ValueError(f"{d / name}: checksum does not match manifest")
    spec = CorpusSpec(**manifest["spec"])
    corpus = load_corpus(d / "corpus.bin", spec)
    p = manifest["partition"]
    plan = load_plan(d / "plan.bin", p["mode"], p["num_clients"], p["num_rounds"], p.get("gamma"))
    return corpus, plan, manifest


def build_dataset(spec: CorpusSpec, num_clients: int, num_rounds: int, mode: str,
                  eval_fraction: float = 0.2, gamma: float = 0.5) -> tuple[Corpus, PartitionPlan]:
    """Generate, hold out a stratified eval set, and partition the rest."""
    corpus = generate_corpus(spec)
    train_idx, eval_idx = holdout_split(corpus, eval_fraction, spec.seed)
    plan = partition(corpus, num_clients, num_rounds, mode, spec.seed, train_idx, eval_idx, gamma)
    return corpus, plan
