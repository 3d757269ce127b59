import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optmm.hamiltonian import HamiltonianError, IntensityParams, _solve_logit, h_derivs_zero, optimal_quote, rate

from oracles import brute_force_hamiltonian

IP = IntensityParams(lambdaMax=1.0, alpha=-0.7, beta=10.0)


def test_fill_probability_at_mid():
    assert float(rate(IP, 15.0, 0.0)) == pytest.approx(1 / (1 + np.exp(-0.7)), rel=1e-15)
    assert float(rate(IP, 15.0, 0.0)) == pytest.approx(0.668, abs=5e-4)


def test_one_percent_better_quote():
    vega = 15.0
    assert float(rate(IP, vega, -0.01 * vega)) == pytest.approx(1 / (1 + np.exp(-0.8)), rel=1e-15)
    assert float(rate(IP, vega, -0.01 * vega)) == pytest.approx(0.69, abs=5e-3)


def test_rate_limits_and_domain():
    assert float(rate(IP, 15.0, 1e6)) == 0.0
    assert float(rate(IP, 15.0, -1e6)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        rate(IP, 0.0, 0.0)


def test_unit_slope_case_against_brute_force():
    # beta / vega = 1
    ev = optimal_quote(IP, 10.0, 0.0)
    h, d = brute_force_hamiltonian(1.0, -0.7, 10.0, 10.0, 0.0)
    assert float(ev.value) == pytest.approx(h, rel=1e-10)
    assert float(ev.argmax) == pytest.approx(d, abs=1e-6)


def test_grid_of_p_against_brute_force():
    vega = 16.0
    for p in np.linspace(-5 * vega, 5 * vega, 50):
        h, d = brute_force_hamiltonian(IP.lambdaMax, IP.alpha, IP.beta, vega, p)
        ev = optimal_quote(IP, vega, p)
        assert float(ev.value) == pytest.approx(h, rel=1e-8)
        assert float(ev.argmax) == pytest.approx(d, abs=1e-6)


@pytest.mark.parametrize("c", [-1.0, 0.5, 2.0])
def test_translation_and_envelope(c):
    vega = 12.0
    for p in (-3.0, 0.0, 4.0):
        a, b = optimal_quote(IP, vega, p), optimal_quote(IP, vega, p + c)
        assert float(b.firstDeriv) == pytest.approx(-float(rate(IP, vega, b.argmax)), rel=1e-12)
        # H(p + c) equals the payoff at the shifted problem's argmax
        assert float(b.value) == pytest.approx(float(rate(IP, vega, b.argmax)) * (float(b.argmax) - p - c), rel=1e-12)
        assert float(b.argmax) > float(a.argmax) if c > 0 else float(b.argmax) < float(a.argmax)


def test_h_derivs_zero_matches_optimal_quote():
    ev = optimal_quote(IP, 14.0, 0.0)
    assert h_derivs_zero(IP, 14.0) == (ev.value, ev.firstDeriv, ev.secondDeriv)


def test_second_derivative_finite_difference():
    vega = 14.0
    h = 1e-4 * vega
    H = lambda p: float(optimal_quote(IP, vega, p).value)  # noqa: E731
    fd = (H(h) - 2 * H(0.0) + H(-h)) / h**2
    assert float(h_derivs_zero(IP, vega)[2]) == pytest.approx(fd, rel=1e-5)


def test_vega_scaling():
    h1 = float(h_derivs_zero(IP, 8.0)[0])
    h2 = float(h_derivs_zero(IP, 16.0)[0])
    assert h2 == pytest.approx(2 * h1, rel=1e-13)
    assert h2 == pytest.approx(brute_force_hamiltonian(1.0, -0.7, 10.0, 16.0, 0.0)[0], rel=1e-10)


def test_non_convergence_is_reported():
    with pytest.raises(HamiltonianError):
        _solve_logit(np.array([0.3, np.nan]), -0.7)


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        optimal_quote(IP, -1.0, 0.0)
    with pytest.raises(ValueError):
        optimal_quote(IP, 1.0, np.inf)


@settings(max_examples=300)
@given(st.floats(1.0, 1e5), st.floats(-3.0, 3.0), st.floats(0.5, 50.0), st.floats(1e-3, 1e3), st.floats(-10.0, 10.0))
def test_invariants(lam, alpha, beta, vega, pv):
    p = pv * vega
    ev = optimal_quote(IntensityParams(lam, alpha, beta), vega, p)
    assert ev.value >= 0
    assert ev.firstDeriv <= 0
    assert ev.secondDeriv >= 0
    assert ev.argmax - p >= vega / beta * (1 - 1e-12)
    assert float(ev.firstDeriv) == pytest.approx(-float(rate(IntensityParams(lam, alpha, beta), vega, ev.argmax)), rel=1e-8)


@given(st.floats(1e-2, 1e2))
def test_convex_decreasing_monotone_argmax(vega):
    ps = np.linspace(-5 * vega, 5 * vega, 201)
    ev = optimal_quote(IP, vega, ps)
    assert np.all(np.diff(ev.value) < 0)
    assert np.all(np.diff(ev.value, 2) >= -1e-12 * ev.value[:-2])
    assert np.all(np.diff(ev.argmax) > 0)
