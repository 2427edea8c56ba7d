"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; conftest prints them in the terminal
summary so they always appear in the pytest output. Run this file directly
to print the lines without pytest.
"""
import json
import time

import numpy as np
import pytest

from fedcanon import aggregation as agg
from fedcanon.client import TrainConfig, batch_loss, local_train
from fedcanon.datagen import CorpusSpec, build_dataset
from fedcanon.linalg import align_signs, orthogonality_defect, polar_orth
from fedcanon.metrics import summarize
from fedcanon.orchestrator import FederationConfig, client_seed, initial_params, run_federation
from fedcanon.params import Layer, ProjectorParams

RESULTS: list[str] = []


def record(tag: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} {tag}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def reference_data(seed: int):
    # 5 clusters, D_v=16, C=8, 12500 samples, 20% held out -> ~200 per client per round
    return build_dataset(CorpusSpec(seed=seed), 5, 10, "image_image")


def reference_config(seed: int, **kw) -> FederationConfig:
    return FederationConfig(seed=seed, **kw)


def haar_orthogonal(rng, count, n):
    q, r = np.linalg.qr(rng.standard_normal((count, n, n)))
    return q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]


def test_01_procrustes_optimality():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = np.inf
    for _ in range(100):
        m = rng.standard_normal((8, 8))
        best = np.sum(m * polar_orth(m))
        sampled = np.einsum("ij,sij->s", m, haar_orthogonal(rng, 1000, 8))
        worst = min(worst, best - sampled.max())
    elapsed = time.perf_counter() - t0
    record("procrustes optimality", worst >= -1e-9 and elapsed < 10,
           f"min margin {worst:.3e} (need >= -1e-9), {elapsed:.2f}s (need < 10s)")


def test_02_orthogonality_preserved_over_run():
    corpus, plan = reference_data(0)
    t0 = time.perf_counter()
    res = run_federation(reference_config(0), corpus, plan)
    elapsed = time.perf_counter() - t0
    defects = [d for rec in res.records for d in rec.orthogonality_defect]
    stored = [orthogonality_defect(lm.u_prev) for lm in res.momentum.layers.values()]
    ok = len(defects) == 20 and None not in defects and max(defects + stored) <= 1e-8 and elapsed < 30
    record("orthogonality preservation", ok,
           f"max defect {max(defects + stored):.3e} over 10 rounds x 2 layers (need <= 1e-8), {elapsed:.2f}s")


def test_03_cra_reconstruction():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        ws = [rng.standard_normal((16, 8)) for _ in range(5)]
        d = agg.cra_decompose(ws)
        full = np.hstack(ws)
        worst = max(worst, np.linalg.norm(full - d.reconstruct()) / np.linalg.norm(full))
    record("CRA reconstruction", worst <= 1e-10, f"max relative error {worst:.3e} (need <= 1e-10)")


def test_04_identical_client_fixed_point():
    rng = np.random.default_rng(4)
    g = ProjectorParams.init([16, 12, 8], rng)
    client = g.map(lambda a: a + 0.1 * rng.standard_normal(a.shape))
    worst = {"fedcmp": 0.0, "fedavg": 0.0}
    state, prev = agg.MomentumState(), g
    for _ in range(5):
        ups = [agg.ClientUpdate(k, client.copy(), 0.3, 200) for k in range(5)]
        out, state, _ = agg.fedcmp_aggregate(ups, prev, state, agg.FedCmpConfig())
        worst["fedcmp"] = max(worst["fedcmp"], np.abs(out.flatten() - client.flatten()).max())
        avg = agg.fedavg_aggregate(ups)
        worst["fedavg"] = max(worst["fedavg"], np.abs(avg.flatten() - client.flatten()).max())
        prev = out
    record("identical-client fixed point", max(worst.values()) <= 1e-8,
           f"max deviation fedcmp {worst['fedcmp']:.3e}, fedavg {worst['fedavg']:.3e} (need <= 1e-8)")


def _client_updates(global_params, corpus, plan, r, seed, lr):
    ups = []
    for k in range(plan.num_clients):
        rep = local_train(global_params, plan.shard(corpus, k, r), TrainConfig(lr), client_seed(seed, r, k))
        ups.append(agg.ClientUpdate(k, rep.params_after, rep.alignment_error, len(plan.shard_indices(k, r))))
    return ups


def test_05a_all_off_equals_fedavg():
    corpus, plan = reference_data(0)
    cfg = reference_config(0)
    g = initial_params(cfg)
    state, worst = agg.MomentumState(), 0.0
    off = agg.FedCmpConfig(csc=False, rwf=False, opm=False)
    for r in range(10):
        ups = _client_updates(g, corpus, plan, r, cfg.seed, cfg.lr)
        a, state, _ = agg.fedcmp_aggregate(ups, g, state, off)
        b = agg.fedavg_aggregate(ups)
        worst = max(worst, np.abs(a.flatten() - b.flatten()).max())
        g = b
    record("reduction: toggles off = fedavg", worst <= 1e-9, f"max per-round deviation {worst:.3e} (need <= 1e-9)")


def test_05b_zero_beta_is_aligned_fresh_basis():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        fresh = agg.cra_decompose([rng.standard_normal((16, 8)) for _ in range(5)])
        prev_u = np.linalg.qr(rng.standard_normal((16, 16)))[0]
        u, sigma, _, _ = agg.opm_update(fresh, agg.LayerMomentum(prev_u, rng.random(16)), 0.0, 0.0, 1.0)
        worst = max(worst, np.abs(u - align_signs(fresh.u, prev_u)).max(), np.abs(sigma - fresh.sigma).max())
    record("reduction: beta=0 OPM = aligned fresh basis", worst <= 1e-10,
           f"max deviation {worst:.3e} (need <= 1e-10)")


def test_05c_round_one_independent_of_opm():
    corpus, plan = reference_data(0)
    cfg = reference_config(0)
    g = initial_params(cfg)
    ups = _client_updates(g, corpus, plan, 0, cfg.seed, cfg.lr)
    a, _, _ = agg.fedcmp_aggregate(ups, g, agg.MomentumState(), agg.FedCmpConfig(opm=True))
    b, _, _ = agg.fedcmp_aggregate(ups, g, agg.MomentumState(), agg.FedCmpConfig(opm=False))
    diff = np.abs(a.flatten() - b.flatten()).max()
    record("reduction: round 1 ignores OPM", diff == 0.0, f"max deviation {diff:.3e} (need identical)")


def _scalar(x):
    return ProjectorParams([Layer(np.array([[float(x)]]), np.zeros(1))])


def test_06_reliability_weight_properties():
    rng = np.random.default_rng(6)
    g = _scalar(0)
    worst_sum = 0.0
    for _ in range(200):
        k = int(rng.integers(1, 9))
        ups = [agg.ClientUpdate(i, _scalar(rng.normal(0, 3)), float(rng.uniform(0, 5)), 1) for i in range(k)]
        worst_sum = max(worst_sum, abs(agg.reliability_weights(ups, g, float(rng.uniform(0, 3))).sum() - 1))
    hand = agg.reliability_weights([agg.ClientUpdate(0, _scalar(1), 0, 1),
                                    agg.ClientUpdate(1, _scalar(np.sqrt(3)), 0, 1)], g, 1.0)
    hand_err = np.abs(hand - [0.25, 0.75]).max()
    xs, ds = rng.uniform(0.5, 2, 4), rng.uniform(0, 5, 4)
    w0 = agg.reliability_weights([agg.ClientUpdate(i, _scalar(x), d, 1) for i, (x, d) in enumerate(zip(xs, ds))],
                                 g, 0.0)
    mag_err = np.abs(w0 - xs ** 2 / np.sum(xs ** 2)).max()
    ok = worst_sum <= 1e-12 and hand_err <= 1e-12 and mag_err <= 1e-12
    record("reliability weights", ok,
           f"sum error {worst_sum:.1e}, hand case error {hand_err:.1e}, alpha=0 error {mag_err:.1e} (need <= 1e-12)")


def test_07_adaptive_beta_bounds():
    grid = np.linspace(0, 1, 100)
    betas = np.array([agg.adaptive_beta(c, 0.5, 0.9, 1.0) for c in grid])
    ok = (betas.min() >= 0.5 and betas.max() <= 0.9 and agg.adaptive_beta(0.0, 0.5, 0.9, 1.0) == 0.9
          and agg.adaptive_beta(1.0, 0.5, 0.9, 1.0) == 0.5 and np.all(np.diff(betas) <= 0))
    record("adaptive beta bounds", bool(ok), f"range [{betas.min():.3f}, {betas.max():.3f}], monotone non-increasing")


def test_08_gradient_correctness():
    worst = 0.0
    for seed in range(50):
        r = np.random.default_rng(100 + seed)
        dims = [int(d) for d in r.integers(1, 7, size=int(r.integers(2, 4)))]
        p = ProjectorParams.init(dims, r, "tanh" if seed % 2 else "identity")
        p = p.map(lambda a: a + 0.1 * r.standard_normal(a.shape))
        v = r.standard_normal((int(r.integers(1, 5)), int(r.integers(1, 4)), dims[0]))
        t = r.standard_normal((len(v), int(r.integers(1, 4)), dims[-1]))
        analytic = batch_loss(p, v, t)[1].flatten()
        flat, fd, h = p.flatten(), np.zeros_like(analytic), 1e-5
        for i in range(flat.size):
            e = np.zeros_like(flat)
            e[i] = h
            fd[i] = (batch_loss(p.unflatten(flat + e), v, t)[0] - batch_loss(p.unflatten(flat - e), v, t)[0]) / (2 * h)
        worst = max(worst, np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), np.linalg.norm(analytic), 1e-12))
    record("gradient correctness", worst <= 1e-5, f"max relative error {worst:.3e} over 50 configs (need <= 1e-5)")


def test_09_comparative_experiment():
    t0 = time.perf_counter()
    wins, lines = 0, []
    for seed in (0, 1, 2):
        corpus, plan = reference_data(seed)
        cmp_ = summarize(run_federation(reference_config(seed, aggregator="fedcmp"), corpus, plan).records)
        avg = summarize(run_federation(reference_config(seed, aggregator="fedavg"), corpus, plan).records)
        win = cmp_.final_eval_loss <= avg.final_eval_loss and cmp_.smoothness < avg.smoothness
        wins += win
        lines.append(f"seed {seed}: final {cmp_.final_eval_loss:.4f} vs {avg.final_eval_loss:.4f}, "
                     f"smoothness {cmp_.smoothness:.4f} vs {avg.smoothness:.4f}")
    elapsed = time.perf_counter() - t0
    record("fedcmp vs fedavg on reference scenario", wins >= 2 and elapsed < 120,
           f"{wins}/3 seeds won (need >= 2), {elapsed:.1f}s; " + "; ".join(lines))


def test_10_determinism(tmp_path):
    from fedcanon.orchestrator import write_metrics
    corpus, plan = reference_data(1)
    for name in ("a", "b"):
        write_metrics(run_federation(reference_config(1), corpus, plan).records, tmp_path / name)
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    record("determinism", a == b and len(a.splitlines()) == 10,
           f"{len(a)} bytes, {'identical' if a == b else 'different'}")


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    failed = 0
    for name, fn in sorted((n, f) for n, f in globals().items() if n.startswith("test_")):
        try:
            fn(Path(tempfile.mkdtemp())) if name == "test_10_determinism" else fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
