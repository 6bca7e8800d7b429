import json

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from scoremoco.ctrecon import FanBeamGeometry
from scoremoco.grid import Image
from scoremoco.metrics import (FIELDS, EvalReport, aggregate, evaluate_case, invert_convention, motion_mae,
                               reprojection_error, rmse, ssim, write_quantiles_json, write_report_csv)
from scoremoco.motion import MotionSpline, PerturbationSpec, random_perturbation, resample

G = FanBeamGeometry(n_views=36)


def test_rmse_trivial_and_brute_force(rng):
    a = rng.random((17, 23))
    assert rmse(a, a) == 0.0
    assert rmse(a, a + 1.0) == pytest.approx(1.0, abs=1e-15)
    b = rng.random((17, 23))
    acc = 0.0
    for i in range(17):
        for j in range(23):
            acc += (a[i, j] - b[i, j]) ** 2
    assert rmse(a, b) == pytest.approx(np.sqrt(acc / (17 * 23)), abs=1e-12)
    assert rmse(Image(a, 1.0), Image(b, 1.0)) == rmse(b, a)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        rmse(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((5, 4)))


def test_ssim_matches_reference_implementation(sampler, rng):
    from scoremoco.ctrecon import sample_phantom
    a = sample_phantom(sampler, 1).data
    b = np.clip(a + 0.05 * rng.normal(size=a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)


def test_ssim_identity_and_inversion(sampler):
    from scoremoco.ctrecon import sample_phantom
    a = sample_phantom(sampler, 2).data
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, a.max() - a) < 0.5


def test_ssim_constant_images_closed_form():
    c, d = 0.3, 0.2
    c1 = 0.01**2
    expected = (2 * c * (c + d) + c1) / (c * c + (c + d) ** 2 + c1)
    assert ssim(np.full((32, 32), c), np.full((32, 32), c + d)) == pytest.approx(expected, abs=1e-10)


def test_ssim_zero_data_range():
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 16)), data_range=0.0)


# --- reprojection error ----------------------------------------------------------

def detector_shift(delta):
    """Per-view translation of delta mm along each view's detector axis."""
    _, u = G.frames()
    return np.column_stack([delta * u[:, 0], delta * u[:, 1], np.zeros(G.n_views)])


def test_rpe_zero_for_identical_motion():
    m, _ = random_perturbation(PerturbationSpec(10, 5.0, 5.0, 1), 36)
    assert reprojection_error(m, m, G) == 0.0


def test_rpe_monotone_in_detector_shift():
    zero = np.zeros((36, 3))
    vals = [reprojection_error(zero, detector_shift(d), G) for d in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert vals[0] == 0.0
    assert all(b > a for a, b in zip(vals, vals[1:]))
    # a shift of the whole frame moves every projection by about delta times the magnification
    assert vals[1] == pytest.approx(0.5 * G.magnification, rel=0.02)


def test_rpe_zero_motion_independent_of_fiducial_radius():
    zero = np.zeros((36, 3))
    pts = np.array([[100.0, 0.0], [-100.0, 0.0], [0.0, 100.0], [0.0, -100.0]])
    assert reprojection_error(zero, zero, G) == reprojection_error(zero, zero, G, fiducials=pts) == 0.0


def test_rpe_convention_flip_consistency():
    a, _ = random_perturbation(PerturbationSpec(10, 5.0, 5.0, 2), 36)
    b, _ = random_perturbation(PerturbationSpec(10, 5.0, 5.0, 3), 36)
    direct = reprojection_error(a, b, G)
    flipped = reprojection_error(invert_convention(a.per_view()), invert_convention(b.per_view()), G,
                                 convention="patient")
    assert flipped == pytest.approx(direct, rel=1e-12)
    np.testing.assert_allclose(invert_convention(invert_convention(a.per_view())), a.per_view(), atol=1e-12)


def test_rpe_errors():
    with pytest.raises(ValueError):
        reprojection_error(np.zeros((36, 3)), np.zeros((35, 3)), G)
    with pytest.raises(ValueError):
        reprojection_error(np.zeros((36, 3)), np.zeros((36, 3)), G, convention="sideways")


# --- motion MAE -----------------------------------------------------------------

def test_mae_cases():
    m, _ = random_perturbation(PerturbationSpec(10, 5.0, 5.0, 4))
    assert motion_mae(m, m) == (0.0, 0.0, 0.0)
    shifted = m.per_view() + [1.0, 0.0, 0.0]
    assert motion_mae(m, shifted) == pytest.approx((1.0, 0.0, 0.0), abs=1e-12)
    tx, ty, r = motion_mae(m, resample(m, 30))
    assert max(tx, ty, r) <= 0.1


def test_mae_shape_mismatch():
    with pytest.raises(ValueError):
        motion_mae(np.zeros((36, 3)), np.zeros((30, 3)))


# --- reports --------------------------------------------------------------------

def test_eval_report_validation():
    EvalReport(0.1, 0.9, 1.0, 0.1, 0.1, 0.1)
    with pytest.raises(ValueError):
        EvalReport(np.nan, 0.9, 1.0, 0.1, 0.1, 0.1)
    with pytest.raises(ValueError):
        EvalReport(0.1, 1.5, 1.0, 0.1, 0.1, 0.1)


def test_evaluate_case_and_outputs(tmp_path, sampler):
    from scoremoco.ctrecon import sample_phantom
    img = sample_phantom(sampler, 1)
    gt, _ = random_perturbation(PerturbationSpec(10, 5.0, 5.0, 4), 36)
    zero = MotionSpline.zeros(30, 36)
    rep = evaluate_case(img, img, gt, zero, G)
    assert rep.rmse == 0.0 and rep.ssim == pytest.approx(1.0)
    assert rep.rpe_mm > 0 and rep.mae_tx_mm > 0
    reps = [rep, EvalReport(0.2, 0.5, 2.0, 1.0, 1.0, 1.0)]
    agg = aggregate(reps)
    assert set(agg) == set(FIELDS)
    assert agg["rmse"]["mean"] == pytest.approx(0.1)
    assert agg["rmse"]["min"] == 0.0 and agg["rmse"]["max"] == 0.2
    write_report_csv({"init": reps}, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].split(",")[:2] == ["method", "n"] and lines[1].startswith("init,2,")
    write_quantiles_json({"init": reps}, tmp_path / "q.json")
    assert json.loads((tmp_path / "q.json").read_text())["init"]["ssim"]["median"] == pytest.approx(0.75)
