import numpy as np
import pytest
from hypothesis import given, strategies as st

from exitbsde.funclass import (ExactWrapper, NumericOverflowError, Perturbed, Polynomial, SingleHiddenLayerNet,
                               constant, dnorm_distance, fd_check, from_dict, gaussian_bump, load_json,
                               save_json, taylor_remainders, third_derivative_bound)
from exitbsde.geometry import Ball, Interval, sample_uniform
from exitbsde.problems import get_problem, p3_solution

rng0 = np.random.default_rng(123)


def random_net(width=6, dim=2, seed=0):
    return SingleHiddenLayerNet.init_random(width, dim, np.random.default_rng(seed))


def test_polynomial_snapshot():
    v, g, H = Polynomial([[2]], [1.0], 1).eval_with_derivatives(3.0)
    assert v == 9.0 and g.tolist() == [6.0] and H.tolist() == [[2.0]]


def test_dead_output_layer():
    net = SingleHiddenLayerNet(rng0.normal(size=(5, 2)), rng0.normal(size=5), np.zeros(5), 0.7)
    v, g, H = net.eval_with_derivatives([0.3, -0.4])
    assert v == 0.7 and not g.any() and not H.any()


def test_perturbed_is_linear():
    base, bump = p3_solution(), gaussian_bump([0.1, 0.2], 0.5)
    P = Perturbed(base, 0.25, bump)
    x = np.array([[0.3, -0.1], [0.0, 0.5]])
    for a, b, c in zip(P._eval(x), base._eval(x), bump._eval(x)):
        np.testing.assert_allclose(a, b + 0.25 * c, rtol=0, atol=1e-15)


def test_non_finite_output_is_reported():
    bad = ExactWrapper(1, lambda x: np.full(len(x), np.inf), lambda x: np.zeros_like(x),
                       lambda x: np.zeros((len(x), 1, 1)), name="bad")
    with pytest.raises(NumericOverflowError, match="ExactWrapper"):
        bad.eval_with_derivatives([0.0])


def test_hessians_symmetric():
    x = sample_uniform(Ball((0.0, 0.0), 1.0), 50, np.random.default_rng(1))
    for U in (p3_solution(), random_net(), gaussian_bump([0.0, 0.0])):
        H = U.hess(x)
        assert np.max(np.abs(H - np.swapaxes(H, 1, 2))) <= 1e-10


def test_dnorm_examples():
    dom = Interval(-1.0, 1.0)
    U = Polynomial([[2], [0]], [1.0, -1.0], 1)
    assert dnorm_distance(U, U, dom, budget=100).value == 0.0
    shifted = Perturbed(U, 0.3, constant(1.0, 1))
    assert dnorm_distance(U, shifted, dom, budget=100).value == pytest.approx(0.3, abs=1e-14)
    eps = 0.01
    lin = Perturbed(U, eps, Polynomial([[1]], [1.0], 1))
    est = dnorm_distance(U, lin, dom, budget=200)
    assert est.value == pytest.approx(2 * eps, rel=0.01)
    assert abs(abs(est.argmax_point[0]) - 1.0) < 1e-9


def test_dnorm_symmetric_and_spectral():
    dom = Ball((0.0, 0.0), 1.0)
    U, V = p3_solution(), random_net()
    assert dnorm_distance(U, V, dom, budget=300).value == dnorm_distance(V, U, dom, budget=300).value


def test_dnorm_nested_samples_monotone():
    dom = Ball((0.0, 0.0), 1.0)
    U, V = p3_solution(), random_net(seed=4)
    vals = [dnorm_distance(U, V, dom, budget=b, refinement_levels=0).value for b in (128, 256, 512)]
    assert vals[0] <= vals[1] <= vals[2]


def test_budget_floor():
    with pytest.raises(ValueError):
        dnorm_distance(p3_solution(), p3_solution(), Ball((0.0, 0.0), 1.0), budget=50)


def test_fd_check_examples():
    pts = sample_uniform(Ball((0.0, 0.0), 1.0), 100, np.random.default_rng(2))
    rep = fd_check(p3_solution(), pts)
    assert rep.passed and rep.max_deviation <= 1e-8
    assert fd_check(random_net(16), pts).passed

    U = p3_solution()

    def corrupt(x):
        H = U._eval(x)[2].copy()
        H[:, 0, 1] += 0.1
        return H

    broken = ExactWrapper(2, U._value, lambda x: U._eval(x)[1], corrupt)
    assert not fd_check(broken, pts).passed


def test_net_param_sensitivities_match_fd():
    net = random_net(5, 2, seed=7)
    x = sample_uniform(Ball((0.0, 0.0), 1.0), 4, np.random.default_rng(3))
    dv, dg, dH = net.param_sensitivities(x)
    th = net.params()
    step = 1e-6
    for i in range(len(th)):
        p, m = th.copy(), th.copy()
        p[i] += step
        m[i] -= step
        ep = SingleHiddenLayerNet.from_params(p, 5, 2)._eval(x)
        em = SingleHiddenLayerNet.from_params(m, 5, 2)._eval(x)
        np.testing.assert_allclose(dv[:, i], (ep[0] - em[0]) / (2 * step), atol=1e-8)
        np.testing.assert_allclose(dg[:, i, :], (ep[1] - em[1]) / (2 * step), atol=1e-8)
        np.testing.assert_allclose(dH[:, i], (ep[2] - em[2]) / (2 * step), atol=1e-7)


def test_contract_matches_sensitivities():
    net = random_net(7, 3, seed=9)
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, size=(11, 3))
    cv, cg, cH = rng.normal(size=11), rng.normal(size=(11, 3)), rng.normal(size=(11, 3, 3))
    dv, dg, dH = net.param_sensitivities(x)
    ref = dv.T @ cv + np.einsum("ni,npi->p", cg, dg) + np.einsum("nij,npij->p", cH, dH)
    np.testing.assert_allclose(net.contract_sensitivities(x, cv, cg, cH), ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(net.contract_sensitivities(x, cv), dv.T @ cv, rtol=1e-12, atol=1e-12)


def test_serialization_round_trip(tmp_path):
    for U in (p3_solution(), random_net(4, 2)):
        again = from_dict(U.to_dict())
        x = np.array([[0.2, 0.1]])
        np.testing.assert_array_equal(U._eval(x)[2], again._eval(x)[2])
        save_json(U, tmp_path / "u.json")
        np.testing.assert_array_equal(load_json(tmp_path / "u.json")._value(x), U._value(x))


def test_from_dict_rejects_bad_version():
    doc = p3_solution().to_dict()
    doc["version"] = 99
    with pytest.raises(ValueError):
        from_dict(doc)


def test_taylor_remainder_bounds():
    U = random_net(8, 2, seed=1)
    dom = Ball((0.0, 0.0), 1.0)
    x2 = sample_uniform(dom, 300, np.random.default_rng(0)) * 0.8
    x1 = x2 + np.random.default_rng(1).normal(scale=0.05, size=x2.shape)
    C = 1.5 * third_derivative_bound(U, np.concatenate([x1, x2, sample_uniform(dom, 2000, np.random.default_rng(2))]))
    r_val, r_grad = taylor_remainders(U, x1, x2)
    dx = np.linalg.norm(x1 - x2, axis=1)
    assert np.all(r_val <= C * dx**3 + 1e-13)
    assert np.all(r_grad <= C * dx**2 + 1e-13)


def test_polynomial_quadratic_taylor_exact():
    U = get_problem("P2").exact_solution
    x1, x2 = np.array([[0.3, -0.2]]), np.array([[-0.5, 0.4]])
    r_val, r_grad = taylor_remainders(U, x1, x2)
    assert r_val[0] <= 1e-15 and r_grad[0] <= 1e-15


terms = st.dictionaries(st.tuples(st.integers(0, 3), st.integers(0, 3)), st.floats(-2, 2, allow_nan=False),
                        min_size=1, max_size=6)


@given(terms, st.integers(0, 2**31))
def test_random_polynomials_pass_fd(table, seed):
    U = Polynomial.from_terms(table, 2)
    pts = sample_uniform(Ball((0.0, 0.0), 1.0), 20, np.random.default_rng(seed))
    assert fd_check(U, pts).max_deviation <= 1e-8


@given(st.integers(1, 12), st.integers(1, 3), st.integers(0, 2**31))
def test_random_nets_pass_fd(width, dim, seed):
    net = random_net(width, dim, seed)
    pts = np.random.default_rng(seed + 1).uniform(-0.7, 0.7, size=(10, dim))
    assert fd_check(net, pts).passed
