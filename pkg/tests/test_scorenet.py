import json

import numpy as np
import pytest

from scoremoco.ctrecon import PhantomSampler
from scoremoco.errors import DivergenceError, IncompatibleWeightsError
from scoremoco.grid import SeededRng
from scoremoco.scorefield import GaussianScore, NoiseSchedule, ZeroScore
from scoremoco.scorenet import (Architecture, ScoreNet, TrainConfig, _silu, _silu_d1, _silu_d2, conv3x3,
                                conv3x3_transpose, conv3x3_weight_grad, dsm_loss, load_weights, save_weights,
                                smooth_losses, train)

SMALL = Architecture(channels=4, n_res_blocks=2)


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def net(schedule):
    n = ScoreNet(schedule, SMALL, seed=3)
    # non-trivial skip and biases so every term is exercised
    p = n.params.copy()
    p += 0.05 * np.random.default_rng(0).standard_normal(p.size)
    n.set_params(p)
    return n


def test_silu_derivatives():
    a = np.linspace(-6, 6, 41)
    h = 1e-6
    assert np.allclose(_silu_d1(a), (_silu(a + h) - _silu(a - h)) / (2 * h), rtol=1e-6, atol=1e-9)
    assert np.allclose(_silu_d2(a), (_silu_d1(a + h) - _silu_d1(a - h)) / (2 * h), rtol=1e-5, atol=1e-8)


def test_conv_transpose_is_adjoint(rng):
    h = rng.standard_normal((2, 5, 6, 3))
    w = rng.standard_normal((27, 4))
    g = rng.standard_normal((2, 5, 6, 4))
    lhs = np.sum(conv3x3(h, w) * g)
    rhs = np.sum(h * conv3x3_transpose(g, w))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_conv_weight_grad_finite_differences(rng):
    h = rng.standard_normal((1, 4, 4, 2))
    w = rng.standard_normal((18, 3))
    b = rng.standard_normal(3)
    g = rng.standard_normal((1, 4, 4, 3))
    gw, gb = conv3x3_weight_grad(h, g)
    f = lambda w_, b_: np.sum(conv3x3(h, w_, b_) * g)  # noqa: E731
    eps = 1e-6
    for idx in [(0, 0), (5, 1), (17, 2)]:
        e = np.zeros_like(w)
        e[idx] = eps
        assert gw[idx] == pytest.approx((f(w + e, b) - f(w - e, b)) / (2 * eps), rel=1e-6)
    e = np.zeros(3)
    e[1] = eps
    assert gb[1] == pytest.approx((f(w, b + e) - f(w, b - e)) / (2 * eps), rel=1e-6)


def test_output_shape_and_determinism(net, rng):
    x = rng.uniform(size=(8, 8))
    assert net(x, 0.4).shape == x.shape
    assert np.array_equal(net(x, 0.4), net(x, 0.4))
    assert np.all(np.isfinite(net(x, 0.0))) and np.all(np.isfinite(net(x, 1.0)))


def test_input_vjp_and_jvp(net, rng):
    x = rng.uniform(size=(6, 6))
    t = 0.35
    v = rng.standard_normal((6, 6))
    u = rng.standard_normal((6, 6))
    h = 1e-6
    fd_jvp = (net(x + h * v, t) - net(x - h * v, t)) / (2 * h)
    assert _rel(net.jvp(x, t, v), fd_jvp) <= 1e-6
    # <u, J v> = <J^T u, v>
    assert np.sum(u * net.jvp(x, t, v)) == pytest.approx(np.sum(net.vjp(x, t, u) * v), rel=1e-10)
    batch = np.stack([u, v])
    assert np.allclose(net.vjp(x, t, batch)[1], net.vjp(x, t, v), rtol=1e-12)


def test_div_grad_finite_differences(net, rng):
    x = rng.uniform(size=(5, 5))
    t = 0.2
    eps = np.sign(rng.standard_normal((2, 5, 5)))
    quad = lambda y: float(np.sum(net.jvp(y, t, eps) * eps))  # noqa: E731
    g = net.div_grad(x, t, eps)
    h = 1e-5
    for idx in [(0, 0), (2, 3), (4, 4), (1, 2)]:
        e = np.zeros_like(x)
        e[idx] = h
        fd = (quad(x + e) - quad(x - e)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_combined_vjp_is_sum(net, rng):
    x = rng.uniform(size=(5, 5))
    cot = rng.standard_normal((5, 5))
    eps = np.sign(rng.standard_normal((3, 5, 5)))
    s, comb = net.score_and_combined_vjp(x, 0.6, cot, eps, 0.25)
    assert np.allclose(s, net(x, 0.6), rtol=1e-13)
    assert np.allclose(comb, net.vjp(x, 0.6, cot) + 0.25 * net.div_grad(x, 0.6, eps), rtol=1e-10, atol=1e-12)


def test_dsm_param_gradient(net, rng):
    batch = rng.uniform(size=(3, 6, 6))
    seed = SeededRng(9)
    loss, grad = dsm_loss(net, batch, net.schedule, seed)
    assert loss >= 0 and grad.shape == net.params.shape
    p0 = net.params.copy()
    idx = np.random.default_rng(1).choice(p0.size, 10, replace=False)
    h = 1e-6
    for i in idx:
        pp, pm = p0.copy(), p0.copy()
        pp[i] += h
        pm[i] -= h
        net.set_params(pp)
        lp = dsm_loss(net, batch, net.schedule, seed, want_grad=False)[0]
        net.set_params(pm)
        lm = dsm_loss(net, batch, net.schedule, seed, want_grad=False)[0]
        fd = (lp - lm) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-4 * max(abs(fd), 1e-3 * np.max(np.abs(grad)))
    net.set_params(p0)


def test_dsm_zero_output_loss_is_dimension(schedule):
    d = 16
    loss, grad = dsm_loss(ZeroScore(), np.zeros((4000, 4, 4)), schedule, SeededRng(1))
    assert grad is None
    assert loss == pytest.approx(d, rel=0.02)  # std of ||z||^2 / n is sqrt(2d / n)


def test_dsm_gaussian_identity():
    sched = NoiseSchedule(1e-4, 10.0)
    s2 = 0.5
    n, d = 4000, 16
    data = np.sqrt(s2) * np.random.default_rng(0).standard_normal((n, 4, 4))
    score = GaussianScore(np.zeros((4, 4)), s2, sched)
    loss, _ = dsm_loss(score, data, sched, SeededRng(2))
    sig = sched.sigma_min * (sched.sigma_max / sched.sigma_min) ** SeededRng(2).generator().uniform(size=n)
    expected = np.mean(d * (1 - sig**2 / (s2 + sig**2)))
    assert loss == pytest.approx(expected, rel=0.03)


def test_dsm_errors(net):
    with pytest.raises(ValueError):
        dsm_loss(net, np.zeros((0, 4, 4)), net.schedule, SeededRng(0))
    with pytest.raises(DivergenceError):
        dsm_loss(net, np.full((1, 4, 4), np.inf), net.schedule, SeededRng(0))


def test_lipschitz_sanity(net, rng):
    x = rng.uniform(size=(8, 8))
    ratios = []
    for _ in range(10):
        d = 1e-3 * rng.standard_normal((8, 8))
        ratios.append(np.linalg.norm(net(x + d, 0.5) - net(x, 0.5)) / np.linalg.norm(d))
    assert np.all(np.isfinite(ratios)) and max(ratios) < 1e6


def test_weights_roundtrip(net, tmp_path, rng):
    save_weights(net, tmp_path / "w")
    back = load_weights(tmp_path / "w")
    assert np.array_equal(back.params, net.params.astype(np.float32).astype(np.float64))
    net.set_params(back.params)
    x = rng.uniform(size=(6, 6))
    assert np.array_equal(load_weights(tmp_path / "w", net)(x, 0.3), net(x, 0.3))
    man = json.loads((tmp_path / "w.json").read_text())
    assert man["architecture_hash"] == SMALL.hash()
    assert man["sigma_min"] == net.schedule.sigma_min and man["normalization"]


def test_weights_incompatible(net, tmp_path, schedule):
    save_weights(net, tmp_path / "w")
    man = json.loads((tmp_path / "w.json").read_text())
    man["architecture"]["n_layers"] = 9
    (tmp_path / "w.json").write_text(json.dumps(man))
    with pytest.raises(IncompatibleWeightsError):
        load_weights(tmp_path / "w")
    save_weights(net, tmp_path / "v")
    with pytest.raises(IncompatibleWeightsError):
        load_weights(tmp_path / "v", ScoreNet(schedule, Architecture(channels=5, n_res_blocks=2)))


def test_train_zero_steps_and_determinism(schedule):
    sampler = PhantomSampler(size=16, spacing=16.0)
    net = ScoreNet(schedule, SMALL, seed=1)
    p0 = net.params.copy()
    res = train(net, sampler, TrainConfig(steps=0, pool_size=4))
    assert res.losses == [] and np.array_equal(net.params, p0)
    cfg = TrainConfig(steps=6, batch_size=2, pool_size=8, seed=5)
    a = train(ScoreNet(schedule, SMALL, seed=1), sampler, cfg).losses
    b = train(ScoreNet(schedule, SMALL, seed=1), sampler, cfg).losses
    assert a == b


def test_train_divergence_keeps_checkpoint(schedule):
    net = ScoreNet(schedule, SMALL, seed=1)
    p0 = net.params.copy()
    with pytest.raises(DivergenceError) as info:
        train(net, lambda s: np.full((8, 8), np.nan), TrainConfig(steps=3, batch_size=2, pool_size=2))
    assert np.array_equal(info.value.checkpoint, p0)
    assert np.array_equal(net.params, p0)


def test_smooth_losses():
    assert np.allclose(smooth_losses([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])
    assert smooth_losses([]).size == 0


def test_train_500_steps_halves_loss(schedule):
    # regression value: measured reduction recorded in the decisions log
    net = ScoreNet(schedule, Architecture(channels=8, n_res_blocks=4), seed=0)
    res = train(net, PhantomSampler(size=64, spacing=4.0),
                TrainConfig(steps=500, batch_size=4, pool_size=64, learning_rate=3e-3, seed=0))
    sm = res.smoothed(50)
    assert sm[-1] <= 0.5 * sm[49]
