import numpy as np
import pytest

from fedcanon.client import (DivergenceError, Sample, Shard, TrainConfig, alignment_error, batch_loss,
                             forward, local_train, surrogate_loss)
from fedcanon.params import Layer, ProjectorParams

from conftest import random_params


def finite_difference(params, visual, text, h=1e-5):
    flat = params.flatten()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (batch_loss(params.unflatten(up), visual, text)[0]
                   - batch_loss(params.unflatten(down), visual, text)[0]) / (2 * h)
    return grad


def test_forward_identity_layer(rng):
    x = rng.standard_normal((4, 3))
    p = ProjectorParams([Layer(np.eye(3), np.zeros(3))])
    np.testing.assert_array_equal(forward(p, x), x)


def test_forward_two_layer_biases(rng):
    x = rng.standard_normal((5, 3))
    b1, b2 = rng.standard_normal(3), rng.standard_normal(3)
    p = ProjectorParams([Layer(np.eye(3), b1), Layer(np.eye(3), b2)])
    np.testing.assert_allclose(forward(p, x), x + b1 + b2, atol=1e-15)


def test_forward_shape_and_dim_check(rng):
    p = random_params(rng, activation="tanh")
    out = forward(p, rng.standard_normal((6, 16)))
    assert out.shape == (6, 8) and np.all(np.isfinite(out))
    with pytest.raises(ValueError):
        forward(p, rng.standard_normal((6, 15)))


def test_surrogate_zero_when_means_match(rng):
    p = random_params(rng)
    v = rng.standard_normal((4, 16))
    out = forward(p, v)
    t = np.repeat(out.mean(axis=0, keepdims=True), 3, axis=0)
    loss, grads = surrogate_loss(p, Sample(v, t))
    assert loss == pytest.approx(0, abs=1e-25)
    assert np.abs(grads.flatten()).max() <= 1e-12


def test_surrogate_one_dimensional_hand_case():
    p = ProjectorParams([Layer(np.array([[1.0]]), np.zeros(1))])
    loss, grads = surrogate_loss(p, Sample(np.array([[1.0]]), np.array([[2.0]])))
    assert loss == pytest.approx(1.0)
    assert grads.layers[0].weight[0, 0] == pytest.approx(-2.0)
    assert grads.layers[0].bias[0] == pytest.approx(-2.0)


def test_gradients_match_finite_differences():
    worst = 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        depth = int(r.integers(1, 4))
        dims = [int(d) for d in r.integers(1, 6, size=depth + 1)]
        act = "tanh" if seed % 2 else "identity"
        p = random_params(r, dims, act)
        b, n, l = int(r.integers(1, 5)), int(r.integers(1, 4)), int(r.integers(1, 4))
        v = r.standard_normal((b, n, dims[0]))
        t = r.standard_normal((b, l, dims[-1]))
        analytic = batch_loss(p, v, t)[1].flatten()
        fd = finite_difference(p, v, t)
        rel = np.linalg.norm(analytic - fd) / max(np.linalg.norm(analytic), np.linalg.norm(fd), 1e-12)
        worst = max(worst, rel)
    assert worst <= 1e-5


def _shard(rng, s=40, dims=(16, 8), noise=0.0, gt=None):
    gt = rng.standard_normal(dims) if gt is None else gt
    v = rng.standard_normal((s, 4, dims[0]))
    t = np.repeat((v.mean(axis=1) @ gt)[:, None, :], 3, axis=1)
    return Shard(v, t + noise * rng.standard_normal(t.shape)), gt


def test_lr_zero_leaves_params(rng):
    p = random_params(rng, (16, 8))
    shard, _ = _shard(rng)
    rep = local_train(p, shard, TrainConfig(lr=0.0), seed=3)
    np.testing.assert_array_equal(rep.params_after.flatten(), p.flatten())
    assert rep.alignment_error == pytest.approx(alignment_error(p, shard.visual, shard.text), abs=1e-15)


def test_already_matching_shard_unchanged(rng):
    gt = rng.standard_normal((16, 8))
    p = ProjectorParams([Layer(gt, np.zeros(8))])
    shard, _ = _shard(rng, gt=gt)
    rep = local_train(p, shard, TrainConfig(lr=0.1), seed=0)
    np.testing.assert_allclose(rep.params_after.flatten(), p.flatten(), atol=1e-12)
    assert rep.alignment_error <= 1e-12


def test_alignment_error_zero_and_permutation_invariant(rng):
    p = random_params(rng, (16, 8))
    shard, _ = _shard(rng, noise=0.3)
    perm = rng.permutation(len(shard))
    a = alignment_error(p, shard.visual, shard.text)
    b = alignment_error(p, shard.visual[perm], shard.text[perm])
    assert abs(a - b) <= 1e-12


def test_local_train_deterministic(rng):
    p = random_params(rng, (16, 12, 8))
    shard, _ = _shard(rng, noise=0.1)
    a = local_train(p, shard, TrainConfig(lr=0.01, batch_size=7), seed=11)
    b = local_train(p, shard, TrainConfig(lr=0.01, batch_size=7), seed=11)
    np.testing.assert_array_equal(a.params_after.flatten(), b.params_after.flatten())
    assert (a.mean_loss, a.alignment_error, a.steps) == (b.mean_loss, b.alignment_error, b.steps)
    assert a.steps == 6


def test_loss_decreases_on_realizable_problem(rng):
    shard, _ = _shard(rng, s=64, dims=(6, 3))
    p = ProjectorParams([Layer(np.zeros((6, 3)), np.zeros(3))])
    losses = []
    for epoch in range(5):
        rep = local_train(p, shard, TrainConfig(lr=0.05, batch_size=8), seed=epoch)
        losses.append(rep.mean_loss)
        p = rep.params_after
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_prox_term_pulls_toward_reference(rng):
    p = random_params(rng, (16, 8))
    shard, _ = _shard(rng, noise=0.1)
    free = local_train(p, shard, TrainConfig(lr=0.01, prox_mu=0.0), seed=1)
    prox = local_train(p, shard, TrainConfig(lr=0.01, prox_mu=5.0), seed=1)
    dist = lambda q: np.linalg.norm(q.flatten() - p.flatten())
    assert dist(prox.params_after) < dist(free.params_after)


def test_divergence_names_step(rng):
    p = random_params(rng, (16, 8))
    shard, _ = _shard(rng)
    shard.client_id, shard.round_index = 3, 7
    with pytest.raises(DivergenceError, match=r"client 3, round 7: .*step \d+"):
        local_train(p, shard, TrainConfig(lr=1e30, batch_size=4), seed=0)


def test_empty_shard_and_bad_lr(rng):
    p = random_params(rng, (16, 8))
    with pytest.raises(ValueError):
        local_train(p, Shard(np.zeros((0, 4, 16)), np.zeros((0, 3, 8))), TrainConfig())
    shard, _ = _shard(rng)
    with pytest.raises(ValueError):
        local_train(p, shard, TrainConfig(lr=-1))
