import numpy as np
import pytest

from scoremoco.ctrecon import FanBeamGeometry, FBPOperator, PhantomSampler, forward_project, sample_phantom
from scoremoco.errors import DivergenceError
from scoremoco.grid import Image, SeededRng
from scoremoco.metrics import reprojection_error
from scoremoco.motion import MotionSpline, PerturbationSpec, random_perturbation, unpack
from scoremoco.optimizer import (MAXIMIZE, MINIMIZE, Objective, OptimizerConfig, OptTrace, compensate,
                                 likelihood_objective, mse_objective, objective_and_gamma_grad, step, step_size)
from scoremoco.pfode import OdeConfig, TraceEstimatorConfig, log_likelihood
from scoremoco.scorefield import GaussianMixtureScore, NoiseSchedule


# --- step rule -------------------------------------------------------------------

def test_step_examples():
    g = np.arange(6.0)
    assert np.array_equal(step(g, np.zeros(6), 100.0), g)
    assert np.array_equal(step(g, np.ones(6), 0.0), g)
    assert np.array_equal(step(np.zeros(90), np.ones(90), 100.0, MAXIMIZE), np.full(90, 100.0))
    assert np.array_equal(step(np.zeros(3), np.ones(3), 2.0, MINIMIZE), np.full(3, -2.0))


def test_step_errors():
    with pytest.raises(DivergenceError):
        step(np.zeros(3), np.array([0.0, np.nan, 0.0]), 1.0)
    with pytest.raises(ValueError):
        step(np.zeros(3), np.zeros(4), 1.0)
    with pytest.raises(ValueError):
        step(np.zeros(3), np.zeros(3), 1.0, "sideways")


def test_step_size_schedule():
    cfg = OptimizerConfig()
    assert (cfg.iterations, cfg.r0, cfg.q) == (40, 100.0, 0.97)
    assert step_size(cfg, 0) == 100.0
    assert step_size(cfg, 1) == pytest.approx(97.0)
    sizes = [step_size(cfg, n) for n in range(200)]
    assert all(b < a for a, b in zip(sizes, sizes[1:]))
    assert sizes[-1] < 0.3
    for n in (0, 5, 39):
        assert step_size(cfg, n + 1) / step_size(cfg, n) == pytest.approx(0.97, rel=1e-14)
    with pytest.raises(ValueError):
        step_size(cfg, -1)


@pytest.mark.parametrize("kw", [dict(iterations=0), dict(r0=0.0), dict(q=0.0), dict(q=1.5),
                                dict(calibrate_step=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        OptimizerConfig(**kw)


# --- objectives --------------------------------------------------------------------

def test_mse_objective(rng):
    gt = rng.random((8, 8))
    obj = mse_objective(Image(gt, 1.0))
    assert obj.orientation == MINIMIZE
    v, g = obj.evaluate(gt)
    assert v == 0.0 and not np.any(g)
    assert obj.evaluate(gt + 1.0)[0] == pytest.approx(1.0)
    x = rng.random((8, 8))
    _, g = obj.evaluate(x)
    d = rng.normal(size=(8, 8))
    h = 1e-3
    fd = (obj.evaluate(x + h * d)[0] - obj.evaluate(x - h * d)[0]) / (2 * h)
    assert fd == pytest.approx(np.vdot(g, d), abs=1e-8)
    with pytest.raises(ValueError):
        obj.evaluate(np.zeros((8, 7)))


@pytest.fixture(scope="module")
def toy():
    """Three-component mixture over 16x16 phantoms and a small fan-beam geometry."""
    sched = NoiseSchedule(0.01, 50.0)
    sampler = PhantomSampler(size=16, spacing=8.0)
    means = [sampler(s) for s in range(3)]
    mix = GaussianMixtureScore([(1 / 3, m, 0.02) for m in means], sched)
    return sched, means, mix, FanBeamGeometry(n_views=90)


def toy_sinogram(toy, seed):
    _, means, _, g = toy
    x = means[seed % 3] + np.sqrt(0.02) * np.random.default_rng(seed).normal(size=(16, 16))
    gt, _ = random_perturbation(PerturbationSpec(5, 3.0, 3.0, seed), g.n_views)
    return forward_project(Image(x, 8.0), g, gt.per_view_radians())


def test_likelihood_objective_delegates_and_refreshes_probes(toy, rng):
    sched, _, mix, _ = toy
    trace = TraceEstimatorConfig(rng=SeededRng(5))
    obj = likelihood_objective(mix, sched, OdeConfig(), trace)
    assert obj.orientation == MAXIMIZE
    x = rng.random((16, 16))
    v0, g0 = obj.evaluate(x)
    v1, g1 = obj.evaluate(x)
    ref = log_likelihood(mix, sched, OdeConfig(), trace.with_rng(SeededRng(5).spawn(0)), x, want_gradient=True)
    assert v0 == ref.logp and np.array_equal(g0, ref.gradient)
    assert v0 != v1
    assert obj.calls == 2


class Frozen(Objective):
    """Likelihood objective pinned to the probes of its first call."""

    def __init__(self, inner):
        self.inner = inner
        self.orientation = inner.orientation

    def evaluate(self, image):
        self.inner.calls = 0
        return self.inner.evaluate(image)


def _gamma_fd(op, obj, gamma, i, h, nodes):
    e = np.zeros_like(gamma)
    e[i] = h
    vp = obj.evaluate(op.reconstruct(unpack(gamma + e, nodes, op.geometry.n_views).per_view_radians()).data)[0]
    vm = obj.evaluate(op.reconstruct(unpack(gamma - e, nodes, op.geometry.n_views).per_view_radians()).data)[0]
    return (vp - vm) / (2 * h)


def test_chain_rule_mse_objective():
    g = FanBeamGeometry()
    img = sample_phantom(PhantomSampler(), 4)
    gt, _ = random_perturbation(PerturbationSpec(10, 5.0, 5.0, 4))
    ref = FBPOperator(forward_project(img, g), (64, 64), 4.0).reconstruct()
    op = FBPOperator(forward_project(img, g, gt.per_view_radians()), (64, 64), 4.0)
    obj = mse_objective(ref)
    gamma = np.random.default_rng(1).uniform(-2, 2, size=90)
    _, grad, _ = objective_and_gamma_grad(op, obj, gamma, 30)
    tol = 1e-2 * np.abs(grad).max()
    for i in np.random.default_rng(2).choice(90, size=10, replace=False):
        assert _gamma_fd(op, obj, gamma, i, 1e-4, 30) == pytest.approx(grad[i], rel=1e-2, abs=tol)


def test_chain_rule_likelihood_frozen_probes(toy):
    sched, _, mix, g = toy
    op = FBPOperator(toy_sinogram(toy, 0), (16, 16), 8.0)
    obj = Frozen(likelihood_objective(mix, sched, OdeConfig(40, 40), TraceEstimatorConfig(rng=SeededRng(3))))
    gamma = np.random.default_rng(4).uniform(-1, 1, size=15)
    _, grad, _ = objective_and_gamma_grad(op, obj, gamma, 5)
    tol = 1e-2 * np.abs(grad).max()
    for i in np.random.default_rng(5).choice(15, size=10, replace=False):
        assert _gamma_fd(op, obj, gamma, i, 1e-4, 5) == pytest.approx(grad[i], rel=1e-2, abs=tol)


# --- compensation loop ---------------------------------------------------------------

@pytest.fixture(scope="module")
def phantom_case():
    g = FanBeamGeometry()
    img = sample_phantom(PhantomSampler(), 100)
    ref = FBPOperator(forward_project(img, g), (64, 64), 4.0).reconstruct()
    return g, img, ref


def test_zero_perturbation_is_fixed_point(phantom_case):
    g, img, ref = phantom_case
    sino = forward_project(img, g)
    res = compensate(sino, mse_objective(ref), OptimizerConfig(), (64, 64), 4.0)
    assert np.abs(res.gamma).max() <= 0.05
    assert res.trace.records[0]["grad_norm"] <= 1e-12
    assert len(res.trace) == 41
    assert res.status == "ok"


def test_oracle_compensation_reduces_rpe(phantom_case):
    g, img, ref = phantom_case
    gt, _ = random_perturbation(PerturbationSpec(10, 5.0, 5.0, 100))
    sino = forward_project(img, g, gt.per_view_radians())
    res = compensate(sino, mse_objective(ref), OptimizerConfig(calibrate_step=5.0), (64, 64), 4.0)
    init = reprojection_error(gt, MotionSpline.zeros(30), g)
    assert reprojection_error(gt, res.spline, g) <= 0.4 * init
    vals = res.trace.values
    assert vals[-1] < vals[0]
    # calibration: the first update moves the largest node by exactly calibrate_step
    assert np.abs(res.trace.records[1]["gamma"]).max() == pytest.approx(5.0, rel=1e-12)
    assert res.trace.records[0]["step_size"] == res.r0_effective


def test_likelihood_ascent_is_monotone(toy):
    sched, _, mix, _ = toy
    monotone = 0
    for seed in range(10):
        obj = likelihood_objective(mix, sched, OdeConfig(40, 40), TraceEstimatorConfig(mode="exact"))
        res = compensate(toy_sinogram(toy, seed), obj, OptimizerConfig(iterations=8, nodes=5, calibrate_step=0.5),
                         (16, 16), 8.0)
        monotone += bool(np.all(np.diff(res.trace.values) > 0))
    assert monotone >= 9


class FailsAt(Objective):
    orientation = MINIMIZE

    def __init__(self, inner, n):
        self.inner, self.n, self.calls = inner, n, 0

    def evaluate(self, image):
        self.calls += 1
        if self.calls > self.n:
            return float("nan"), np.zeros_like(image)
        return self.inner.evaluate(image)


def test_failure_returns_best_so_far(phantom_case):
    g, img, ref = phantom_case
    gt, _ = random_perturbation(PerturbationSpec(10, 5.0, 5.0, 101))
    sino = forward_project(img, g, gt.per_view_radians())
    obj = FailsAt(mse_objective(ref), 4)
    res = compensate(sino, obj, OptimizerConfig(calibrate_step=5.0), (64, 64), 4.0)
    assert res.status == "degraded"
    assert len(res.trace) == 4
    best = int(np.argmin(res.trace.values))
    assert np.array_equal(res.gamma, np.array(res.trace.records[best]["gamma"]))
    op = FBPOperator(sino, (64, 64), 4.0)
    assert np.array_equal(res.image.data, op.reconstruct(res.spline.per_view_radians()).data)


def test_trace_deterministic_and_serialisable(tmp_path, toy):
    sched, _, mix, _ = toy
    sino = toy_sinogram(toy, 1)
    runs = []
    for k in range(2):
        obj = likelihood_objective(mix, sched, OdeConfig(), TraceEstimatorConfig(rng=SeededRng(9)))
        res = compensate(sino, obj, OptimizerConfig(iterations=3, nodes=5, calibrate_step=0.5), (16, 16), 8.0)
        res.trace.write_jsonl(tmp_path / f"t{k}.jsonl")
        runs.append(res)
    assert (tmp_path / "t0.jsonl").read_bytes() == (tmp_path / "t1.jsonl").read_bytes()
    assert np.array_equal(runs[0].gamma, runs[1].gamma)
    back = OptTrace.read_jsonl(tmp_path / "t0.jsonl")
    assert len(back) == 4
    assert set(back.records[0]) == {"iteration", "gamma", "value", "step_size", "grad_norm"}
    runs[0].trace.write_jsonl(tmp_path / "w.jsonl", wall_time=True)
    assert "wall_time" in OptTrace.read_jsonl(tmp_path / "w.jsonl").records[0]
