import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from exitbsde.problems import get_problem
from exitbsde.rng import RngStream, derive_seed, standard_normals
from exitbsde.simulate import (CensoredPathError, InvalidStartError, bridge_increments, exit_statistics,
                               exit_tail, refine_batch, refine_reference, rng_provider, simulate_batch,
                               simulate_path)

from helpers import line_problem


def test_zero_increments_censor(caplog):
    with caplog.at_level(logging.WARNING):
        p = simulate_path(line_problem(), [0.2], 0.1, max_steps=25, increments=np.zeros((25, 1)))
    assert p.censored and p.exit_index == 25
    assert np.all(p.states == 0.2)
    assert "censored" in caplog.text


def test_injected_exit_after_one_step():
    p = simulate_path(line_problem(), [0.0], 0.25, increments=[[1.5]])
    assert p.states[:, 0].tolist() == [0.0, 1.5]
    assert p.exit_index == 1 and p.exited and p.tau_bar == 0.25


def test_deterministic_drift_exits_at_index_4():
    p = simulate_path(line_problem(mu=1.0, sigma=0.0), [0.0], 0.25, increments=np.zeros((10, 1)))
    assert p.states[:, 0].tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert p.exit_index == 4 and p.tau_bar == 1.0


def test_invalid_start():
    with pytest.raises(InvalidStartError):
        simulate_path(line_problem(), [1.5], 0.1, rng=RngStream(0, 0))
    with pytest.raises(InvalidStartError):
        simulate_path(line_problem(), [1.0], 0.1, rng=RngStream(0, 0))


@pytest.mark.parametrize("h", [0.0, 1.0, -0.1])
def test_invalid_h(h):
    with pytest.raises(ValueError):
        simulate_path(line_problem(), [0.0], h, rng=RngStream(0, 0))


def test_grid_path_invariants_and_recompute():
    prob = get_problem("P3")
    p = simulate_path(prob, [0.1, 0.2], 2.0**-5, rng=RngStream(5, 17))
    assert np.array_equal(p.states[0], [0.1, 0.2])
    assert all(prob.domain.contains(s) for s in p.states[:p.exit_index])
    assert not prob.domain.contains(p.states[p.exit_index])
    assert np.array_equal(p.recompute_states(prob), p.states)
    assert p.tau_bar == p.exit_index * p.h


def test_single_path_matches_batch():
    prob = get_problem("P2")
    h, seed = 2.0**-5, 31
    b = simulate_batch(prob, [0.0, 0.0], h, 40, seed)
    for i in (0, 7, 39):
        single = simulate_path(prob, [0.0, 0.0], h, rng=RngStream(seed, i))
        batched = b.path(i)
        assert single.exit_index == batched.exit_index
        np.testing.assert_array_equal(single.states, batched.states)
        np.testing.assert_array_equal(single.increments, batched.increments)


@pytest.mark.parametrize("chunk,threads", [(1000, 1), (7, 1), (13, 3)])
def test_batch_independent_of_chunks_and_threads(chunk, threads):
    prob = get_problem("P3")
    ref = simulate_batch(prob, "uniform", 2.0**-4, 120, 9, chunk_size=1000)
    b = simulate_batch(prob, "uniform", 2.0**-4, 120, 9, chunk_size=chunk, threads=threads)
    assert np.array_equal(b.exit_index, ref.exit_index)
    assert np.array_equal(b.exit_state, ref.exit_state)
    assert np.array_equal(b.x0, ref.x0)


def test_block_provider_equals_per_step_draws():
    ids = np.arange(5, 12, dtype=np.uint64)
    h = 0.01
    prov = rng_provider(42, ids, 2, h, block=4)
    active = np.arange(len(ids))
    for k in range(11):
        if k == 6:
            active = active[::2]
        got = prov(active, k)
        want = np.array([RngStream(42, int(ids[i])).increment(k, 2, h) for i in active])
        np.testing.assert_array_equal(got, want)


def test_streams_differ_by_path_and_seed():
    a = standard_normals(1, "simulate", [0, 1], 0, 4)
    b = standard_normals(2, "simulate", [0], 0, 4)
    assert not np.array_equal(a[0], a[1]) and not np.array_equal(a[0], b[0])
    assert derive_seed(1, "x") != derive_seed(1, "y")
    assert derive_seed(1, "x") == derive_seed(1, "x")


def test_normals_look_standard():
    z = standard_normals(0, "simulate", np.arange(20000), 3, 2).ravel()
    assert abs(z.mean()) < 0.02 and abs(z.std() - 1.0) < 0.02


def test_bridge_sum_matches_parent():
    rng = np.random.default_rng(0)
    dW = rng.normal(size=(30, 2)) * 0.1
    sub = bridge_increments(3, np.arange(30, dtype=np.uint64), 4, dW, 64, 0.01)
    assert sub.shape == (30, 64, 2)
    assert np.max(np.abs(sub.sum(axis=1) - dW)) <= 1e-12


def test_refine_rejects_bad_factor():
    prob = get_problem("P1")
    path = simulate_path(prob, [0.0], 0.1, rng=RngStream(0, 0))
    for R in (1, 3, 2048):
        with pytest.raises(ValueError):
            refine_reference(path, R, problem=prob)


def test_refine_censored_parent():
    prob = line_problem()
    path = simulate_path(prob, [0.0], 0.1, max_steps=5, increments=np.zeros((5, 1)))
    with pytest.raises(CensoredPathError):
        refine_reference(path, 4, rng=RngStream(0, 0), problem=prob)


def test_deterministic_crossing_time():
    prob = line_problem(mu=1.0, sigma=0.0)
    h, R = 0.3, 16
    path = simulate_path(prob, [0.0], h, rng=RngStream(0, 0))
    ref = refine_reference(path, R, problem=prob)
    assert abs(ref.tau_ref - 1.0) <= h / R + 1e-12
    assert ref.theta_ref <= path.tau_bar


def test_refined_path_invariants():
    prob = get_problem("P3")
    h, R = 2.0**-4, 8
    path = simulate_path(prob, [0.3, 0.0], h, rng=RngStream(4, 2))
    ref = refine_reference(path, R, problem=prob)
    sums = ref.sub_increments.reshape(path.exit_index, R, 2).sum(axis=1)
    assert np.max(np.abs(sums - path.increments)) <= 1e-12
    assert ref.theta_ref <= path.tau_bar
    assert ref.theta_plus <= path.tau_bar + 1e-15
    # stopped-increment bound on the frozen-coefficient interpolation, q = 2
    W = ref.fine_W
    hf = h / R
    sup_mu, sup_sig = prob.constants.sup_mu, prob.constants.sup_sigma
    n = len(ref.fine_xc)
    for k in range(path.exit_index):
        for j in range(1, R + 1):
            a, b = k * R, k * R + j
            if b >= n:
                break
            dx = np.linalg.norm(ref.fine_xc[b] - ref.fine_xc[a])
            dw = np.linalg.norm(W[b] - W[a])
            assert dx**2 <= 2 * ((sup_mu * j * hf) ** 2 + sup_sig**2 * dw**2) + 1e-12


def test_batch_refinement_ordering():
    ref = refine_batch(get_problem("P3"), "uniform", 2.0**-4, 16, 400, 8)
    ok = ref.usable()
    assert ok.sum() > 350
    assert np.all(ref.theta[ok] <= ref.tau_bar[ok] + 1e-15)
    assert np.all(ref.tau_bar[ok] - ref.theta_plus[ok] >= 0)
    table = exit_statistics(ref, p_list=(1, 2))
    assert table.rows["theta_plus_gap_sq"][0] >= 0
    assert set(table.rows) >= {"exit_error_p1", "exit_error_p2", "space_error", "theta_plus_gap_sq"}


def test_exit_statistics_zero_when_reference_matches():
    ref = refine_batch(get_problem("P1"), [0.0], 2.0**-4, 4, 50, 1)
    ref.tau_ref = ref.tau_bar.astype(float)
    ref.x_tau_ref = ref.exit_state.copy()
    ref.theta = ref.tau_bar.astype(float)
    t = exit_statistics(ref, (1, 2))
    for key in ("exit_error_p1", "exit_error_p2", "space_error", "theta_plus_gap_sq"):
        assert t.rows[key][0] == 0.0


def test_exit_statistics_empty():
    ref = refine_batch(get_problem("P1"), [0.0], 2.0**-4, 4, 5, 1)
    ref.exited[:] = False
    with pytest.raises(ValueError):
        exit_statistics(ref)


def test_mean_exit_time_sanity():
    ref = refine_batch(get_problem("P1"), [0.0], 2.0**-6, 16, 4000, 77)
    ok = ref.usable()
    tau = ref.tau_ref[ok]
    se = tau.std(ddof=1) / np.sqrt(len(tau))
    assert abs(tau.mean() - 1.0) <= 3 * se + 2 * 2.0**-3


def test_exit_tail_decreasing():
    b = simulate_batch(get_problem("P1"), [0.0], 2.0**-5, 2000, 3)
    tail = exit_tail(b.tau_bar, 5)
    probs = [p for _, p in tail]
    assert probs[0] == 1.0 and all(a >= b for a, b in zip(probs, probs[1:]))


@given(st.integers(0, 2**40), st.integers(0, 2**20), st.integers(0, 500))
def test_counter_rng_is_pure(seed, pid, step):
    a = RngStream(seed, pid).increment(step, 3, 0.01)
    b = standard_normals(seed, "simulate", [pid, pid + 1], step, 3)[0] * 0.1
    np.testing.assert_array_equal(a, b)
