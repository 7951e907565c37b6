import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from exitbsde.funclass import gaussian_bump
from exitbsde.loss import ExpExitClamped, path_losses
from exitbsde.problems import get_problem
from exitbsde.rates import (A_FUNCTIONALS, AFunctional, InsufficientPrecisionError, _parse_quantity,
                            check_h_list, fit_power_law, make_table, plateau_study, run_exit_study,
                            run_rate_study, wald_test, write_long_csv)

HS = [2.0**-k for k in range(4, 10)]


def test_fitter_exact_linear():
    fit = fit_power_law(HS, [3.0 * h for h in HS])
    assert fit.slope == pytest.approx(1.0, abs=1e-10) and fit.r_squared == pytest.approx(1.0, abs=1e-12)


def test_fitter_exact_sqrt():
    assert fit_power_law(HS, [0.7 * h**0.5 for h in HS]).slope == pytest.approx(0.5, abs=1e-10)


def test_fitter_drops_noisy_rows():
    means = [h for h in HS]
    ses = [0.01 * m for m in means]
    means[-1] = 1.0
    ses[-1] = 0.5  # 50% relative error, row excluded
    fit = fit_power_law(HS, means, ses)
    assert fit.slope == pytest.approx(1.0, abs=1e-10) and not fit.used[-1]


def test_fitter_insufficient():
    with pytest.raises(InsufficientPrecisionError, match="increase n_paths"):
        fit_power_law(HS[:3], [1.0, 1.0, 1.0], [1.0, 1.0, 0.01])


def test_table_verdicts():
    t = make_table("dynamical", HS, [h**1.2 for h in HS], [1e-3 * h for h in HS], [10] * 6, 1.25)
    assert t.verdict == "pass"
    t = make_table("boundary", HS, [h**0.05 for h in HS], [1e-3] * 6, [10] * 6, 0.25)
    assert t.verdict == "fail"
    t = make_table("dynamical", HS, [0.0] * 6, [0.0] * 6, [10] * 6, 1.25)
    assert t.verdict == "degenerate-zero" and t.slope is None
    t = make_table("dynamical", HS, [1.0] * 6, [1.0] * 6, [10] * 6, 1.25)
    assert t.verdict == "insufficient-precision"


def test_table_serialisation(tmp_path):
    t = make_table("dynamical", HS, [h for h in HS], [1e-3 * h for h in HS], [10] * 6, 1.25)
    csv = t.to_csv().splitlines()
    assert csv[0] == "h,estimate_mean,estimate_se,n_paths,used" and len(csv) == 7
    assert json.loads(t.summary_json())["verdict"] == "fail"
    write_long_csv([t, t], tmp_path / "long.csv")
    assert len((tmp_path / "long.csv").read_text().splitlines()) == 13
    assert [r["h"] for r in t.rows] == sorted(HS, reverse=True)


def test_h_list_checks():
    assert check_h_list([0.25, 0.125, 0.0625, 0.125]) == [0.25, 0.125, 0.0625]
    with pytest.raises(ValueError):
        check_h_list([0.25, 0.125])
    with pytest.raises(ValueError):
        check_h_list([0.25, 0.2, 0.15])


def test_quantity_parsing():
    assert _parse_quantity("exit_error(2)") == ("exit_error", 2)
    assert _parse_quantity("exit_error:3") == ("exit_error", 3)
    assert _parse_quantity("boundary") == ("boundary", None)
    with pytest.raises(ValueError):
        _parse_quantity("bogus")


def test_quadratic_cancellation_degenerate_zero():
    prob = get_problem("P2")
    t = run_rate_study(prob, prob.exact_solution, None, [2.0**-3, 2.0**-4, 2.0**-5], 200, "uniform", 1,
                       "dynamical")
    assert t.verdict == "degenerate-zero"


def test_rate_study_deterministic():
    prob = get_problem("P3")
    args = (prob, prob.exact_solution, ExpExitClamped(0.5, 2.0), [2.0**-3, 2.0**-4, 2.0**-5], 500,
            "uniform", 4, "dynamical")
    a, b = run_rate_study(*args), run_rate_study(*args, chunk_size=37, threads=2)
    assert a.to_csv() == b.to_csv() and a.summary_json() == b.summary_json()
    assert a.target_exponent == 1.25


def test_exit_study_small():
    res = run_exit_study(get_problem("P1"), [2.0**-3, 2.0**-4, 2.0**-5], 2000, [0.0], 1, R=16, p_list=(1, 2))
    assert set(res["tables"]) == {"exit_error_p1", "exit_error_p2", "space_error", "theta_plus_gap_sq"}
    means = [r["estimate_mean"] for r in res["tables"]["exit_error_p1"].rows]
    assert means[0] > means[-1]


def test_plateau_baseline_and_ratios():
    prob = get_problem("P3")
    tab = plateau_study(prob, gaussian_bump([0.0, 0.0], 0.5), [0.5, 1.0, 2.0], 2.0**-6, 500, "uniform", 3)
    assert tab.rows[0].eps == 0.0
    pl = path_losses(prob.exact_solution, prob, 2.0**-6, 500, "uniform", 3)
    assert tab.rows[0].mean == pytest.approx(float(np.mean(pl.dynamical)), rel=1e-14)
    assert len(tab.ratios) == 2
    for r in tab.ratios:
        assert r["eps_ratio"] == 2.0
        if r["above_baseline"]:
            assert 3.2 <= r["ratio"] <= 4.8


def test_plateau_needs_two_eps():
    prob = get_problem("P3")
    with pytest.raises(ValueError):
        plateau_study(prob, gaussian_bump([0.0, 0.0]), [1.0], 0.1, 10, "uniform", 0)


def test_wald_const_h_exact():
    rep = wald_test(get_problem("P1"), 2.0**-4, "const_h", 300, [0.0], 1)
    assert rep.valid and rep.passed
    assert rep.lhs_mean == pytest.approx(rep.mean_stop, rel=1e-14)


def test_wald_dw_sq_passes():
    rep = wald_test(get_problem("P1"), 2.0**-5, "dw_sq", 5000, [0.0], 2)
    assert rep.valid and rep.passed, rep


def test_wald_lookahead_invalid():
    rep = wald_test(get_problem("P1"), 2.0**-5, "lookahead_dw_sq", 100, [0.0], 2)
    assert not rep.valid and not rep.passed and "not adapted" in rep.note


def test_wald_custom_functional():
    A = AFunctional("abs_dw", lambda w, h: np.abs(w[:, 0, 0]))
    rep = wald_test(get_problem("P1"), 2.0**-4, A, 4000, [0.0], 5)
    assert rep.valid and rep.passed
    assert set(A_FUNCTIONALS) == {"dw_sq", "const_h", "lookahead_dw_sq"}


@given(st.floats(0.01, 100.0), st.floats(0.05, 3.0))
def test_fitter_recovers_power(C, p):
    fit = fit_power_law(HS, [C * h**p for h in HS])
    assert abs(fit.slope - p) <= 1e-10
    assert fit.r_squared == pytest.approx(1.0, abs=1e-10)
