import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from singular_euler.analysis import (
    GronwallInput,
    RateReport,
    fit_rate,
    gronwall_constant,
    gronwall_numeric_check,
    gronwall_reduction,
    gronwall_small_time_bound,
    mc_weak_error,
    random_gronwall_inputs,
    rate_study,
    tv_error,
    weighted_sup_error,
)
from singular_euler.density import Grid, GridDensity, default_grid, propagate
from singular_euler.driftlib import DriftSpec
from singular_euler.gaussian import beta_function, g
from singular_euler.scheme import SchemeParams

GRID = Grid((0.0,), 6.0, 33)
BS = DriftSpec.bounded_sign(1.0)
TS = DriftSpec.time_singular(0.3, DriftSpec.bounded_sign(1.0), q=3.0)


def dens(values, grid=GRID, t=1.0) -> GridDensity:
    return GridDensity(t, grid, np.asarray(values, dtype=float))


values_strategy = arrays(np.float64, 33, elements=st.floats(0.0, 1.0))


# --- metrics ----------------------------------------------------------------


def test_weighted_sup_error_examples():
    base = g(1.0, 1.0, GRID.points())
    assert weighted_sup_error(dens(base), dens(base), (0.0,)) == 0.0
    eps = 1e-3
    bumped = base + eps * g(2.0, 1.0, GRID.points())
    assert weighted_sup_error(dens(bumped), dens(base), (0.0,)) == pytest.approx(eps, rel=1e-10)


def test_metrics_reject_mismatched_grids():
    a = dens(np.zeros(33))
    b = dens(np.zeros(17), grid=Grid((0.0,), 6.0, 17))
    with pytest.raises(ValueError):
        weighted_sup_error(a, b, (0.0,))
    with pytest.raises(ValueError):
        tv_error(a, b)
    with pytest.raises(ValueError):
        tv_error(a, dens(np.zeros(33), t=0.5))
    with pytest.raises(ValueError):
        weighted_sup_error(a, a, (0.0,), c=1.0)


@settings(max_examples=100, deadline=None)
@given(a=values_strategy, b=values_strategy, c=values_strategy)
def test_weighted_sup_error_is_a_metric(a, b, c):
    A, B, C = dens(a), dens(b), dens(c)
    x = (0.0,)
    dab = weighted_sup_error(A, B, x)
    assert dab == weighted_sup_error(B, A, x)
    assert (dab == 0) == np.array_equal(a, b)
    assert weighted_sup_error(A, C, x) <= dab + weighted_sup_error(B, C, x) + 1e-12 * (1 + dab)


@settings(max_examples=100, deadline=None)
@given(a=values_strategy, b=values_strategy)
def test_tv_dominated_by_weighted_sup(a, b):
    assert tv_error(dens(a), dens(b)) <= weighted_sup_error(dens(a), dens(b), (0.0,)) * (1 + 1e-12)


def test_tv_examples():
    grid = Grid((0.0,), 4.0, 9)  # dx = 1
    left = np.zeros(9)
    left[2] = 1.0
    right = np.zeros(9)
    right[6] = 1.0
    assert tv_error(dens(left, grid), dens(left, grid)) == 0.0
    assert tv_error(dens(left, grid), dens(right, grid)) == pytest.approx(1.0)


# --- rate fitting -----------------------------------------------------------


def test_fit_rate_examples():
    hs = [1 / 16, 1 / 32, 1 / 64]
    fit = fit_rate([(h, 2 * h**0.5) for h in hs])
    assert fit.slope == pytest.approx(0.5, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(2), abs=1e-12)
    assert fit.residual_norm <= 1e-12
    assert fit_rate([(h, 3 * h) for h in hs]).slope == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(p=st.floats(-2, 3), C=st.floats(1e-3, 1e3), k=st.integers(3, 10))
def test_fit_rate_exact_on_power_laws(p, C, k):
    hs = [2.0**-j for j in range(2, 2 + k)]
    fit = fit_rate([(h, C * h**p) for h in hs])
    assert fit.slope == pytest.approx(p, abs=1e-9)
    assert fit.residual_norm <= 1e-9


def test_fit_rate_errors():
    with pytest.raises(ValueError):
        fit_rate([(0.1, 1.0), (0.05, 0.5)])
    with pytest.raises(ValueError):
        fit_rate([(0.1, 1.0), (0.05, 0.0), (0.025, 0.2)])


def test_rate_report_outputs(tmp_path):
    rep = RateReport("primary", BS.to_dict(), [(16, 1 / 16, 0.5, 0.1), (32, 1 / 32, 0.35, 0.07)],
                     0.5, 0.1, 0.01, 0.5)
    rep.passed = True
    rep.write(tmp_path)
    lines = (tmp_path / "rate.csv").read_text().splitlines()
    assert lines[0] == "n,h,weighted_sup_error,tv_error"
    assert lines[1].startswith("16,6.2500000000000000e-02,")
    summary = json.loads((tmp_path / "rate.json").read_text())
    assert summary["pass"] is True and summary["threshold"] == pytest.approx(0.4)


def test_small_rate_study_bounded_sign():
    p = SchemeParams(BS, n=8)
    grid = default_grid(p, N=512)
    report, finals, ref = rate_study(p, [8, 16, 32], 512, grid=grid)
    errs = [r[2] for r in report.rows]
    assert all(e > 0 for e in errs) and errs == sorted(errs, reverse=True)
    for _, _, ws, tv in report.rows:
        assert tv <= ws
    assert report.passed and 0.4 <= report.slope <= 1.1
    with pytest.raises(ValueError):
        rate_study(p, [8, 8, 16], 512, grid=grid)


# --- Monte Carlo weak error -------------------------------------------------


def test_mc_zero_and_constant_drift_are_exact():
    zero = mc_weak_error(SchemeParams(DriftSpec.zero(), n=8), "coordinate", 8, 128, 500, seed=3)
    assert zero.estimate == 0.0 and zero.stderr == 0.0
    const = mc_weak_error(SchemeParams(DriftSpec.constant([0.5]), n=8), "coordinate", 8, 128, 500, seed=3)
    assert const.estimate == 0.0


@pytest.mark.parametrize("drift", [BS, TS])
@pytest.mark.parametrize("phi", ["coordinate", "squared_norm", "bump", "halfspace"])
def test_mc_same_resolution_is_zero(drift, phi):
    est = mc_weak_error(SchemeParams(drift, n=16, x=(0.5,)), phi, 16, 16, 300, seed=1)
    assert est.estimate == 0.0


def test_mc_rejects_bad_input():
    p = SchemeParams(BS, n=8)
    with pytest.raises(ValueError):
        mc_weak_error(p, "halfspace", 8, 128, 99, seed=0)
    with pytest.raises(ValueError):
        mc_weak_error(p, "halfspace", 8, 100, 1000, seed=0)
    with pytest.raises(ValueError):
        mc_weak_error(p, "cubic", 8, 128, 1000, seed=0)


def test_mc_halfspace_matches_grid_densities():
    n, n_ref = 32, 4096
    p = SchemeParams(BS, n=n)
    est = mc_weak_error(p, "halfspace", n, n_ref, 200_000, seed=12)
    grid = default_grid(p)
    coarse = propagate(p, grid, keep="final").final
    fine = propagate(p.with_n(n_ref), grid, keep="final").final
    ax, w = grid.axis(0), grid.weights()
    # the 0.5 level falls between nodes; integrate the linear interpolant beyond it
    y = np.linspace(0.5, ax[-1], 200_001)

    def tail(dens):
        return float(np.trapezoid(np.interp(y, ax, dens.values), y))

    grid_diff = tail(coarse) - tail(fine)
    tv = tv_error(coarse, fine)
    assert abs(est.estimate - grid_diff) <= 3 * est.stderr + 1e-5
    assert abs(est.estimate) <= tv + 3 * est.stderr
    assert np.sign(est.estimate) == np.sign(grid_diff)
    assert w.sum() > 0


# --- Gronwall-Volterra ------------------------------------------------------


def test_gronwall_examples():
    assert gronwall_constant(GronwallInput.case_one(0.0, 0.0, 1.0, 1.0)) == pytest.approx(math.e, rel=1e-15)
    inp = GronwallInput.case_two(0.0, 0.5, 0.0, 1.0, 1.0)
    oracle = 1.0 / (1.0 - beta_function(1.0, 0.5) * 0.04**0.5)
    assert gronwall_small_time_bound(inp, 0.04) == pytest.approx(oracle, rel=1e-14)
    assert oracle == pytest.approx(1.6667, abs=5e-5)
    assert gronwall_constant(GronwallInput.case_one(0.3, -0.2, 2.5, 0.0)) == 2.5


def test_gronwall_small_time_bound_case_one_and_limits():
    inp = GronwallInput.case_one(0.2, 0.1, 1.0, 0.5)
    assert gronwall_small_time_bound(inp, 0.1) == pytest.approx(0.8 / (0.8 - 0.5 * 0.1**0.9), rel=1e-14)
    with pytest.raises(ValueError):
        gronwall_small_time_bound(GronwallInput.case_two(0.0, 0.5, 0.0, 1.0, 1.0), 0.3)


def test_gronwall_invariants_rejected():
    with pytest.raises(ValueError):
        GronwallInput.case_one(1.0, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        GronwallInput.case_one(0.5, -0.6, 1.0, 1.0)
    with pytest.raises(ValueError):
        GronwallInput.case_two(0.5, 0.5, -0.1, 1.0, 1.0)
    with pytest.raises(ValueError):
        GronwallInput.case_two(0.0, 1.0, 0.5, 1.0, 1.0)


def test_gronwall_iteration_counts():
    # gamma = 1 + beta_check - beta_tilde - beta_hat
    first = GronwallInput.case_two(0.3, 0.7, 0.1, 1.0, 1.0)
    gam = 1 + 0.1 - 0.3 - 0.7
    red = gronwall_reduction(first)
    assert red.branch == "first"
    assert red.iterations == math.ceil(math.log2(1 + 0.7 / gam))
    assert red.beta == pytest.approx(2**red.iterations * gam + 0.3 - 1)
    second = GronwallInput.case_two(0.0, 0.8, 0.2, 1.0, 1.0)
    red = gronwall_reduction(second)
    assert red.branch == "second"
    assert red.iterations == math.ceil(-math.log2(1 - 0.8))


def test_gronwall_one_doubling_step_by_hand():
    bt, bh, bc, a, b, T = 0.2, 0.5, 0.4, 1.5, 0.7, 0.9
    gam = 1 + bc - bt - bh
    red = gronwall_reduction(GronwallInput.case_two(bt, bh, bc, a, b, T))
    assert red.iterations == 1 and red.branch == "second"
    a1 = a + a * b * T**gam * beta_function(1 - bt, 1 - bh)
    b1 = b * b * beta_function(1 - bh, 1 - bh)
    assert red.eta == pytest.approx(a1, rel=1e-14) and red.delta == pytest.approx(b1, rel=1e-14)
    expected = a1 * math.exp(b1 * T ** (1 + red.beta - bt) / (1 + min(red.beta, 0) - bt))
    assert gronwall_constant(GronwallInput.case_two(bt, bh, bc, a, b, T)) == pytest.approx(expected, rel=1e-14)


case_two_inputs = st.tuples(
    st.floats(-0.5, 0.8), st.floats(-0.5, 0.9), st.floats(0.05, 1.5), st.floats(0.1, 2.0),
    st.floats(0.05, 1.5), st.floats(0.2, 1.5), st.floats(1.0, 2.0),
)


@settings(max_examples=200, deadline=None)
@given(case_two_inputs)
def test_gronwall_monotone_in_b_and_T(args):
    bt, bh, margin, a, b, T, factor = args
    bc = bt + bh - 1 + margin
    base = gronwall_constant(GronwallInput.case_two(bt, bh, bc, a, b, T))
    bigger_b = gronwall_constant(GronwallInput.case_two(bt, bh, bc, a, b * factor, T))
    bigger_T = gronwall_constant(GronwallInput.case_two(bt, bh, bc, a, b, T * factor))
    assert bigger_b >= base * (1 - 1e-12)
    assert bigger_T >= base * (1 - 1e-12)


def test_gronwall_numeric_classical_case():
    rep = gronwall_numeric_check(GronwallInput.case_one(0.0, 0.0, 1.0, 1.0), points=2**17)
    assert rep.satisfied and not rep.flagged
    assert rep.sup_f == pytest.approx(math.e, rel=1e-10)


def test_gronwall_branch_consistency():
    one = GronwallInput.case_one(0.3, 0.2, 1.5, 0.7)
    two = GronwallInput.case_two(0.3, 0.0, 0.2, 1.5, 0.7)
    assert gronwall_constant(one) == gronwall_constant(two)
    assert gronwall_numeric_check(one, 512).sup_f == pytest.approx(gronwall_numeric_check(two, 512).sup_f, rel=1e-13)


def test_gronwall_numeric_random_draws():
    for inp in random_gronwall_inputs(3, seed=5):
        rep = gronwall_numeric_check(inp, 1024)
        assert rep.satisfied and not rep.flagged


def test_gronwall_non_convergent_iteration_flagged():
    # a huge coefficient makes the implicit diagonal weight exceed one on the first cell
    rep = gronwall_numeric_check(GronwallInput.case_two(0.5, 0.5, 0.5, 1.0, 1e4), 16)
    assert rep.flagged and not rep.satisfied
