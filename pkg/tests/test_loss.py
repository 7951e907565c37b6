import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from exitbsde.funclass import Perturbed, Polynomial, constant, gaussian_bump
from exitbsde.loss import (ConstantPlus, CensoredPathError, ExpExitClamped, StepRangeError, ThetaUnavailableError,
                           Unit, boundary_loss, decomposition, dynamical_loss, estimate_weighted_loss,
                           grouped_neumaier, loss_summand, overlap_residual, path_losses, straddle_decomposition,
                           two_point_loss, weight_from_dict)
from exitbsde.problems import get_problem
from exitbsde.rng import RngStream
from exitbsde.simulate import refine_batch, refine_reference, simulate_path

from helpers import line_problem


def test_constant_candidate_has_zero_summand():
    prob = line_problem()
    path = simulate_path(prob, [0.0], 0.05, rng=RngStream(1, 1))
    U = constant(0.4, 1)
    assert all(loss_summand(U, prob, path, k) == 0.0 for k in range(path.exit_index))


def test_linear_candidate_leaves_driver_times_h():
    phi = lambda x: np.sin(3 * x[:, 0])  # noqa: E731
    prob = line_problem(driver=lambda x, y, z: phi(x))
    path = simulate_path(prob, [0.1], 0.05, rng=RngStream(2, 0))
    U = Polynomial([[1]], [1.0], 1)
    for k in range(path.exit_index):
        expected = phi(path.states[k:k + 1])[0] * 0.05
        assert loss_summand(U, prob, path, k) == pytest.approx(expected, abs=1e-15)


def test_quadratic_cancellation_every_path():
    prob = get_problem("P2")
    for pid in range(30):
        path = simulate_path(prob, [0.1, -0.2], 2.0**-5, rng=RngStream(9, pid))
        vals = [loss_summand(prob.exact_solution, prob, path, k) for k in range(path.exit_index)]
        assert max(abs(v) for v in vals) <= 1e-12
        assert dynamical_loss(prob.exact_solution, prob, path) <= 1e-24


def test_summand_step_range():
    prob = get_problem("P1")
    path = simulate_path(prob, [0.0], 0.25, increments=[[1.5]])
    with pytest.raises(StepRangeError):
        loss_summand(prob.exact_solution, prob, path, 1)


def test_single_term_dynamical_loss():
    prob = line_problem(driver=lambda x, y, z: np.ones(len(x)))
    path = simulate_path(prob, [0.0], 0.25, increments=[[1.5]])
    U = Polynomial([[1]], [1.0], 1)
    assert dynamical_loss(U, prob, path) == pytest.approx(loss_summand(U, prob, path, 0) ** 2)


def test_two_point_examples():
    prob, U = get_problem("P3"), gaussian_bump([0.1, 0.1], 0.5)
    x = np.array([0.2, 0.3])
    assert two_point_loss(U, prob, 0.3, 0.3, x, x, np.zeros(2)) == 0.0
    path = simulate_path(prob, [0.0, 0.1], 2.0**-4, rng=RngStream(3, 3))
    for k in range(path.exit_index):
        a = two_point_loss(U, prob, k * path.h, (k + 1) * path.h, path.states[k], path.states[k + 1],
                           path.increments[k])
        assert a == loss_summand(U, prob, path, k)
    with pytest.raises(ValueError):
        two_point_loss(U, prob, 1.0, 0.5, x, x, np.zeros(2))


def test_boundary_loss_examples():
    glob = get_problem("P1", boundary_extension="global")
    path = simulate_path(glob, [0.0], 0.1, increments=[[1.1]])
    assert boundary_loss(Polynomial([[2]], [1.0], 1), glob, path) == pytest.approx(1.0, abs=1e-14)
    assert boundary_loss(glob.exact_solution, glob, path) == 0.0
    censored = simulate_path(glob, [0.0], 0.1, max_steps=3, increments=np.zeros((3, 1)))
    with pytest.raises(CensoredPathError):
        boundary_loss(glob.exact_solution, glob, censored)


def test_boundary_loss_shrinks_with_h():
    prob = get_problem("P2")
    means = [estimate_weighted_loss(prob.exact_solution, prob, Unit(), h, 3000, "uniform", 5).boundary_mean
             for h in (2.0**-3, 2.0**-6)]
    assert means[1] < means[0] / 2


def test_overlap_split_identity_arbitrary_point():
    prob = get_problem("P3")
    U = Perturbed(prob.exact_solution, 0.4, gaussian_bump([0.2, -0.3], 0.6))
    rng = np.random.default_rng(0)
    n = 200
    x1 = rng.uniform(-0.6, 0.6, size=(n, 2))
    h = 0.05
    lam = rng.uniform(size=n)
    w31 = rng.normal(size=(n, 2)) * np.sqrt(lam * h)[:, None]
    w23 = rng.normal(size=(n, 2)) * np.sqrt((1 - lam) * h)[:, None]
    s1, s2, s3 = np.zeros(n), np.full(n, h), lam * h
    sig = prob.diffusion(x1)
    x3 = x1 + prob.drift(x1) * s3[:, None] + np.einsum("nij,nj->ni", sig, w31)
    x2 = x3 + prob.drift(x1) * (h - s3)[:, None] + np.einsum("nij,nj->ni", sig, w23)
    whole = two_point_loss(U, prob, s1, s2, x1, x2, w31 + w23)
    pre = two_point_loss(U, prob, s1, s3, x1, x3, w31)
    post = two_point_loss(U, prob, s3, s2, x3, x2, w23)
    R = overlap_residual(U, prob, s1, s2, s3, x1, x3, w31, w23)
    assert np.max(np.abs(pre + post + R - whole)) <= 1e-12


def test_decomposition_on_refined_path():
    prob = get_problem("P3")
    U = Perturbed(prob.exact_solution, 0.3, gaussian_bump([0.0, 0.0], 0.5))
    checked = 0
    for pid in range(20):
        path = simulate_path(prob, [0.2, 0.1], 2.0**-4, rng=RngStream(12, pid))
        ref = refine_reference(path, 16, problem=prob)
        if not np.isfinite(ref.theta_ref):
            continue
        for k in range(path.exit_index):
            pre, post, R = decomposition(U, prob, path, ref, k)
            t, h = k * path.h, path.h
            th = ref.theta_ref
            total = (t < th) * pre + (th < t + h) * post + (t < th < t + h) * R
            assert total == pytest.approx(loss_summand(U, prob, path, k), abs=1e-10)
            if t + h < th:
                assert post == 0.0 and R == 0.0 and pre == loss_summand(U, prob, path, k)
            if th <= t:
                assert pre == 0.0 and R == 0.0 and post == loss_summand(U, prob, path, k)
            checked += 1
    assert checked > 100


def test_decomposition_unavailable():
    prob = get_problem("P3")
    path = simulate_path(prob, [0.2, 0.1], 2.0**-4, rng=RngStream(12, 0))
    ref = refine_reference(path, 4, problem=prob)
    ref.theta_ref = float("nan")
    with pytest.raises(ThetaUnavailableError):
        decomposition(prob.exact_solution, prob, path, ref, 0)


def test_straddle_batch_identity():
    prob = get_problem("P3")
    U = Perturbed(prob.exact_solution, 0.3, gaussian_bump([0.0, 0.0], 0.5))
    ref = refine_batch(prob, "uniform", 2.0**-5, 64, 300, 2)
    dec = straddle_decomposition(U, prob, ref)
    assert dec.straddle.sum() > 200
    assert np.max(dec.violation()) <= 1e-10


def test_weights():
    tb = np.array([0.1, 1.0, 5.0])
    assert Unit().evaluate(tb).tolist() == [1.0, 1.0, 1.0]
    assert ExpExitClamped(0.0, 2.0).evaluate(tb).tolist() == [1.0, 1.0, 1.0]
    np.testing.assert_allclose(ExpExitClamped(1.0, 2.0).evaluate(tb), np.exp([0.1, 1.0, 2.0]))
    assert ConstantPlus(2.0).evaluate(tb).tolist() == [2.0, 2.0, 2.0]
    cp = ConstantPlus(0.5, "exit_fraction", cap=2.0)
    assert cp.evaluate(tb).tolist() == [0.55, 1.0, 1.5] and cp.lower_bound == 0.5
    with pytest.raises(ValueError):
        ExpExitClamped(-1.0, 1.0)
    with pytest.raises(ValueError):
        ConstantPlus(0.0)
    for w in (Unit(), ExpExitClamped(0.5, 3.0), cp):
        assert weight_from_dict(w.to_dict()) == w
    with pytest.raises(ValueError):
        weight_from_dict({"type": "mystery"})


def _reports(weight, U=None, prob=None):
    prob = prob or get_problem("P3")
    U = U or Perturbed(prob.exact_solution, 0.2, gaussian_bump([0.1, 0.0], 0.5))
    return estimate_weighted_loss(U, prob, weight, 2.0**-4, 500, "uniform", 21)


def test_weighted_estimate_contracts():
    unit = _reports(Unit())
    zero_rate = _reports(ExpExitClamped(0.0, 4.0))
    two = _reports(ConstantPlus(2.0))
    for key in ("boundary_mean", "dynamical_mean", "weighted_total_mean"):
        assert getattr(unit, key) == getattr(zero_rate, key)
        assert getattr(two, key) == 2 * getattr(unit, key)
    assert abs(unit.weighted_total_mean - unit.boundary_mean - unit.dynamical_mean) <= 1e-12
    hi, lo = _reports(ExpExitClamped(1.0, 4.0)), _reports(ExpExitClamped(0.5, 4.0))
    for key in ("boundary_mean", "dynamical_mean", "weighted_total_mean"):
        assert getattr(hi, key) >= getattr(lo, key)
    d = json.loads(unit.to_json())
    assert d["n_paths"] == 500 and d["start"] == "uniform"


def test_standard_error_definition():
    rep = estimate_weighted_loss(get_problem("P1").exact_solution, get_problem("P1"), Unit(), 2.0**-4, 400,
                                 [0.0], 3, per_path=True)
    b = np.asarray(rep.per_path["boundary"])
    assert rep.boundary_se == pytest.approx(b.std(ddof=1) / math.sqrt(400), rel=1e-12)
    assert rep.start == "fixed:[0.0]"


def test_per_path_csv(tmp_path):
    prob = get_problem("P1")
    rep = estimate_weighted_loss(prob.exact_solution, prob, Unit(), 2.0**-4, 10, [0.0], 3, per_path=True)
    rep.write_per_path_csv(tmp_path / "pp.csv")
    lines = (tmp_path / "pp.csv").read_text().splitlines()
    assert lines[0] == "path_id,tau_bar,boundary,dynamical,psi" and len(lines) == 11


def test_quadratic_cancellation_estimate():
    prob = get_problem("P2")
    rep = estimate_weighted_loss(prob.exact_solution, prob, Unit(), 2.0**-5, 500, "uniform", 1)
    assert rep.dynamical_mean <= 1e-24


def test_doubling_perturbation_quadruples():
    prob = get_problem("P3")
    bump = gaussian_bump([0.0, 0.0], 0.5)
    vals = [path_losses(Perturbed(prob.exact_solution, e, bump), prob, 2.0**-7, 400, "uniform", 4).dynamical.mean()
            for e in (1.0, 2.0)]
    assert 3.2 <= vals[1] / vals[0] <= 4.8


def test_path_losses_chunk_invariant():
    prob = get_problem("P4")
    U = gaussian_bump([0.0, 0.0], 0.7)
    a = path_losses(U, prob, 2.0**-4, 90, "uniform", 8, chunk_size=1000)
    b = path_losses(U, prob, 2.0**-4, 90, "uniform", 8, chunk_size=11, threads=3)
    assert np.array_equal(a.dynamical, b.dynamical) and np.array_equal(a.boundary, b.boundary)


def test_estimate_needs_two_paths():
    prob = get_problem("P1")
    with pytest.raises(ValueError):
        estimate_weighted_loss(prob.exact_solution, prob, Unit(), 0.1, 1, [0.0], 0)


@given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=200))
def test_compensated_sum_accuracy(vals):
    v = np.array(vals)
    got = grouped_neumaier(v, np.zeros(len(v), dtype=np.int64), 1)[0]
    assert got == pytest.approx(math.fsum(vals), rel=1e-15, abs=1e-300)


@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_weight_dominance(a, b):
    tb = np.linspace(0.0, 6.0, 13)
    hi, lo = max(a, b), min(a, b)
    assert np.all(ExpExitClamped(hi, 2.5).evaluate(tb) >= ExpExitClamped(lo, 2.5).evaluate(tb))
    assert np.all(ExpExitClamped(lo, 2.5).evaluate(tb) >= 1.0)
