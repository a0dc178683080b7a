import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from singular_euler.driftlib import (
    DriftSpec,
    InadmissibleDrift,
    check_condition,
    cutoff,
    cutoff_function,
    cutoff_primary,
    cutoff_threshold,
    cutoff_zero_first,
    default_cutoff_constant,
    evaluate,
    lq_lrho_norm,
)

# d=1, rho=2, q=4 sits on the boundary d/rho + 2/q = 1; used only through strict=False
BOUNDARY = DriftSpec.custom(lambda t, x: np.zeros_like(x), d=1, rho=2.0, q=4.0)


def const1(value: float) -> DriftSpec:
    return DriftSpec.custom(lambda t, x: np.full_like(x, value), d=1, rho=2.0, q=4.0)


# --- evaluate ---------------------------------------------------------------


def test_zero_drift_is_zero_vector():
    out = evaluate(DriftSpec.zero(d=3), 0.7, np.array([[1.0, -2.0, 3.0]]))
    assert np.array_equal(out, np.zeros((1, 3)))


def test_constant_drift_value():
    out = evaluate(DriftSpec.constant([0.5]), 0.3, np.array([-2.0]))
    assert out.tolist() == [0.5]


def test_power_singularity_value_matches_high_precision():
    drift = DriftSpec.power_singularity(theta=1.0, gamma=0.4, R=1.0)
    oracle = float(mpmath.mpf("0.5") * mpmath.power(mpmath.mpf("0.5"), mpmath.mpf("-1.4")))
    got = float(evaluate(drift, 0.0, np.array([0.5]))[0])
    assert got == pytest.approx(oracle, rel=1e-14)
    assert got == pytest.approx(1.3195, abs=5e-5)


def test_power_singularity_singular_point_and_outside_support():
    drift = DriftSpec.power_singularity(theta=1.0, gamma=0.4, R=1.0)
    out = evaluate(drift, 0.0, np.array([[0.0], [1.5], [-0.5]]))
    assert out[0, 0] == 0.0 and out[1, 0] == 0.0
    assert out[2, 0] == pytest.approx(-1.3195, abs=5e-5)


def test_bounded_sign_points_to_origin():
    drift = DriftSpec.bounded_sign(2.0)
    out = evaluate(drift, 0.0, np.array([[-1.0], [0.0], [3.0]]))
    assert out[:, 0].tolist() == [2.0, 0.0, -2.0]


def test_time_singular_value():
    drift = DriftSpec.time_singular(0.3, DriftSpec.bounded_sign(1.0), q=3.0)
    out = evaluate(drift, np.array([0.0, 0.25]), np.array([[1.0], [1.0]]))
    assert out[0, 0] == 0.0
    assert out[1, 0] == pytest.approx(-(0.25**-0.3), rel=1e-15)


def test_invariants_rejected():
    with pytest.raises(ValueError):
        DriftSpec.power_singularity(1.0, 0.5, 1.0, rho=2.0)  # gamma rho = 1 = d
    with pytest.raises(ValueError):
        DriftSpec.time_singular(0.4, DriftSpec.bounded_sign(1.0), q=3.0)  # delta q > 1
    with pytest.raises(ValueError):
        DriftSpec.zero(rho=1.5)
    with pytest.raises(ValueError):
        DriftSpec.zero(q=2.0)


# --- cutoffs ----------------------------------------------------------------


@pytest.mark.parametrize("b, expected", [(3.0, 3.0), (-25.0, -10.0), (0.0, 0.0)])
def test_cutoff_primary_examples(b, expected):
    # threshold 0.01^-(1/4 + 1/4) = 10
    assert cutoff_threshold(BOUNDARY, 0.01, 1.0, strict=False) == pytest.approx(10.0, rel=1e-14)
    out = cutoff_primary(const1(b), 0.01, 1.0, 0.0, np.array([0.0]), strict=False)
    assert out[0] == pytest.approx(expected, rel=1e-14)


def test_cutoff_rejects_inadmissible_by_default():
    with pytest.raises(InadmissibleDrift):
        cutoff_primary(const1(3.0), 0.01, 1.0, 0.0, np.array([0.0]))


def test_cutoff_zero_first_examples():
    big = const1(-25.0)
    assert cutoff_zero_first(big, 0.01, 1.0, 0.005, np.array([0.0]), strict=False)[0] == 0.0
    assert cutoff_zero_first(big, 0.01, 1.0, 0.5, np.array([0.0]), strict=False)[0] == pytest.approx(-10.0)
    small = const1(3.0)
    assert cutoff_zero_first(small, 0.04, 1.0, 0.5, np.array([0.0]), strict=False)[0] == 3.0


def test_cutoff_function_matches_cutoff():
    drift = DriftSpec.power_singularity(1.0, 0.4, 1.0, rho=2.4)
    xs = np.linspace(-1.2, 1.2, 101)[:, None]
    for variant in ("primary", "zero_first"):
        fn = cutoff_function(drift, 0.01, 1.0, variant)
        assert np.array_equal(fn(0.5, xs), cutoff(drift, 0.01, 1.0, 0.5, xs, variant))


@settings(max_examples=200, deadline=None)
@given(
    x=st.lists(st.floats(-3, 3), min_size=2, max_size=2),
    h=st.floats(1e-4, 0.5),
    B=st.floats(0.05, 5.0),
    t=st.floats(0.0, 1.0),
)
def test_cutoff_magnitude_and_direction(x, h, B, t):
    drift = DriftSpec.power_singularity(1.3, 0.6, 2.0, d=2, rho=3.0, q=math.inf)
    pt = np.array([x])
    b = evaluate(drift, t, pt)[0]
    bh = cutoff_primary(drift, h, B, t, pt)[0]
    thr = B * h ** -(0.5 * 2 / 3.0)
    nb = np.linalg.norm(b)
    assert np.linalg.norm(bh) == pytest.approx(min(nb, thr), rel=1e-12, abs=1e-300)
    if nb > 0:
        lam = np.dot(bh, b) / nb**2
        assert 0 < lam <= 1 + 1e-12
        assert np.allclose(bh, lam * b, rtol=1e-12, atol=0)


@settings(max_examples=100, deadline=None)
@given(h=st.floats(1e-3, 0.5), frac=st.floats(0.0, 0.999999), x=st.floats(-2, 2))
def test_zero_first_vanishes_on_first_step(h, frac, x):
    drift = DriftSpec.bounded_sign(1.0)
    assert cutoff_zero_first(drift, h, 1.0, frac * h, np.array([x]))[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(beta=st.floats(0.0, 5.0), h=st.floats(1e-5, 1.0), x=st.floats(-4, 4), t=st.floats(0, 1))
def test_bounded_drift_with_sup_norm_constant_is_untouched(beta, h, x, t):
    drift = DriftSpec.bounded_sign(beta)
    B = default_cutoff_constant(drift)
    pt = np.array([x])
    assert np.array_equal(cutoff_primary(drift, h, B, t, pt), evaluate(drift, t, pt))


def test_default_cutoff_constant():
    assert default_cutoff_constant(DriftSpec.bounded_sign(2.5)) == 2.5
    assert default_cutoff_constant(DriftSpec.power_singularity(1.0, 0.4, 1.0, rho=2.4)) == 1.0
    assert default_cutoff_constant(DriftSpec.zero()) == 1.0


# --- norms ------------------------------------------------------------------


def test_bounded_sign_norm_is_sup():
    assert lq_lrho_norm(DriftSpec.bounded_sign(1.0), 1.0).value == 1.0


def test_power_singularity_norm_closed_and_quadrature():
    drift = DriftSpec.power_singularity(1.0, 0.4, 1.0, rho=2.0)
    # independent oracle: 2 int_0^1 x^(-0.8) dx with the algebraic weight handled by QUADPACK
    inner, _ = integrate.quad(lambda x: 1.0, 0.0, 1.0, weight="alg", wvar=(-0.8, 0.0))
    oracle = math.sqrt(2.0 * inner)
    closed = lq_lrho_norm(drift, 1.0, method="closed").value
    quad = lq_lrho_norm(drift, 1.0, method="quadrature").value
    assert closed == pytest.approx(oracle, rel=1e-12)
    assert quad == pytest.approx(oracle, rel=1e-8)
    assert closed == pytest.approx(3.16228, abs=5e-6)


def test_time_singular_norm_closed_and_quadrature():
    drift = DriftSpec.time_singular(0.3, DriftSpec.bounded_sign(1.0), q=3.0)
    inner, _ = integrate.quad(lambda t: 1.0, 0.0, 1.0, weight="alg", wvar=(-0.9, 0.0))
    oracle = inner ** (1.0 / 3.0)
    assert lq_lrho_norm(drift, 1.0, method="closed").value == pytest.approx(oracle, rel=1e-12)
    assert lq_lrho_norm(drift, 1.0, method="quadrature").value == pytest.approx(oracle, rel=1e-8)
    assert oracle == pytest.approx(2.15443, abs=5e-6)


def test_divergent_norm_reported_as_non_member():
    drift = DriftSpec.power_singularity(1.0, 0.4, 1.0, rho=2.4)
    rep = lq_lrho_norm(drift, 1.0, rho=3.0)
    assert not rep.member


@settings(max_examples=30, deadline=None)
@given(lam=st.floats(0.0, 10.0))
def test_norm_is_absolutely_homogeneous(lam):
    drifts = [
        DriftSpec.constant([0.5, -1.0]),
        DriftSpec.bounded_sign(1.5),
        DriftSpec.power_singularity(1.0, 0.3, 1.2, rho=2.5),
        DriftSpec.time_singular(0.2, DriftSpec.bounded_sign(1.0), q=4.0),
    ]
    for drift in drifts:
        base = lq_lrho_norm(drift, 1.0).value
        assert lq_lrho_norm(drift.scaled(lam), 1.0).value == pytest.approx(lam * base, rel=1e-12, abs=1e-300)


# --- admissibility ----------------------------------------------------------


def test_check_condition_examples():
    rep = check_condition(1, 4, 8)
    assert rep.admissible and rep.alpha == 0.5 and rep.threshold_exponent == 0.25
    rep = check_condition(2, 2, math.inf)
    assert not rep.admissible and rep.failure_reason
    rep = check_condition(1, math.inf, math.inf)
    assert rep.admissible and rep.alpha == 1.0 and rep.threshold_exponent == 0.0


@settings(max_examples=300, deadline=None)
@given(d=st.integers(1, 4), rho=st.floats(2.0, 50.0), q=st.floats(2.001, 50.0))
def test_alpha_identity(d, rho, q):
    rep = check_condition(d, rho, q)
    s = d / rho + 2.0 / q
    assert rep.admissible == (s < 1)
    if rep.admissible:
        assert rep.alpha + s == pytest.approx(1.0, abs=1e-15)
        assert rep.threshold_exponent < 0.5


# --- serialization ----------------------------------------------------------


@pytest.mark.parametrize(
    "drift",
    [
        DriftSpec.zero(d=2),
        DriftSpec.constant([0.5, 0.25]),
        DriftSpec.bounded_sign(1.0),
        DriftSpec.power_singularity(1.0, 0.4, 1.0, rho=2.4),
        DriftSpec.time_singular(0.3, DriftSpec.bounded_sign(1.0), q=3.0),
    ],
)
def test_json_roundtrip(drift):
    text = drift.to_json()
    obj = json.loads(text)
    assert set(obj) == {"family", "params", "d", "rho", "q"}
    back = DriftSpec.from_json(text)
    assert back.to_json() == text
    assert back.rho == drift.rho and back.q == drift.q


def test_infinite_exponents_serialized_as_string():
    obj = DriftSpec.bounded_sign(1.0).to_dict()
    assert obj["rho"] == "inf" and obj["q"] == "inf"
