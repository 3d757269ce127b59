import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from optmm import theta as th
from optmm.grid import Generator, SpatialGrid
from optmm.hamiltonian import IntensityParams, h_derivs_zero
from optmm.model import CorrelationStructure, HestonJumpParams

from conftest import make_book
from oracles import rk4

T = 0.004
GAMMA = 2e-5


@pytest.fixture(scope="module")
def small(params, corr):
    """Two options on a coarse reference grid, solved at three risk-aversion levels."""
    book = make_book(strikes=(97.0, 100.0), maturities=(0.3,))
    grid = SpatialGrid.build([params], T, n_s=21, n_nu=15, n_steps=40)
    src = th.build_sources(grid, book, [params], corr, times=grid.tNodes[::10])
    fields = {g: th.solve_theta(grid, src, [params], corr, g) for g in (0.0, 1e-5, GAMMA)}
    return book, grid, src, fields


def frozen_case(n_steps=200, vega=15.0, z=1.1e5, lam=12600.0, g=0.0, nu=(0.03, 0.04, 0.05)):
    H, H1, H2 = (float(x) for x in h_derivs_zero(IntensityParams(lam), vega))
    p = HestonJumpParams()
    grid = SpatialGrid((np.array([100.0]), np.array(nu)), T, n_steps)
    src = th.frozen_sources(grid, z, vega, g, p.xi / 2 * vega, H, H1, H2)
    return p, grid, src, (H, H1, H2)


# theta2 ------------------------------------------------------------------

def test_zero_risk_aversion_gives_zero_theta2(small):
    assert not np.any(small[3][0.0].theta2)


def test_frozen_riccati_matches_rk4(corr):
    p, grid, src, (H, H1, H2) = frozen_case()
    f = th.solve_theta(grid, src, [p], corr, GAMMA, generator=False)
    R = p.xi / 2 * 15.0
    a, b = 0.5 * GAMMA * R * R, 4 * 1.1e5 * H2
    ode = lambda tau, y: a - b * y * y  # noqa: E731
    for k, t in enumerate(f.times):
        tau = T - t
        ref = rk4(ode, [0.0], (0.0, tau), max(1, int(round(tau / T * 4000))))[0] if tau > 0 else 0.0
        assert abs(f.theta2[k, 0, 1, 0, 0] - ref) <= 1e-6
        assert f.theta2[k, 0, 1, 0, 0] == pytest.approx(ref, rel=5e-3, abs=1e-15)


def test_frozen_riccati_error_is_first_order(corr):
    errs = []
    for n in (100, 400):
        p, grid, src, (H, H1, H2) = frozen_case(n)
        f = th.solve_theta(grid, src, [p], corr, GAMMA, generator=False)
        a, b = 0.5 * GAMMA * (p.xi / 2 * 15.0) ** 2, 4 * 1.1e5 * H2
        exact = np.sqrt(a / b) * np.tanh(np.sqrt(a * b) * T)
        errs.append(abs(f.theta2[0, 0, 1, 0, 0] - exact))
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_exchange_symmetry_for_identical_options(params, corr):
    book = make_book(strikes=(100.0, 100.0), maturities=(0.5,))
    grid = SpatialGrid.build([params], T, n_s=11, n_nu=9, n_steps=20)
    src = th.build_sources(grid, book, [params], corr, times=grid.tNodes[::10])
    t2 = th.solve_theta(grid, src, [params], corr, GAMMA).theta2
    np.testing.assert_allclose(t2[..., 0, 0], t2[..., 1, 1], rtol=1e-12, atol=0)
    np.testing.assert_array_equal(t2[..., 0, 1], t2[..., 1, 0])


def test_riccati_guard_reports(small, params, corr):
    book, grid, src, _ = small
    with pytest.raises(th.SolverError):
        th.solve_theta(grid, src, [params], corr, GAMMA, theta2_bound=1e-9)


def test_invalid_arguments(small, params, corr):
    book, grid, src, _ = small
    with pytest.raises(ValueError):
        th.solve_theta(grid, src, [params], corr, -1.0)
    with pytest.raises(ValueError):
        th.solve_theta(grid, src, [params], corr, GAMMA, penalty_form="bogus")


def test_penalty_form_switch_scales_source(corr):
    p = HestonJumpParams()
    grid = SpatialGrid((np.array([100.0]), np.array([0.03, 0.04, 0.05])), T, 1)
    src = th.frozen_sources(grid, [1.1e5, 1.1e5], 15.0, 0.0, 5.25, 1.0, -1.0, 0.5)
    full = th.solve_theta(grid, src, [p], corr, GAMMA, generator=False)
    scaled = th.solve_theta(grid, src, [p], corr, GAMMA, "eq6_scaled", generator=False)
    # one explicit step from the zero terminal slice: theta2 = dt * (gamma/2) * P * factor
    np.testing.assert_allclose(full.theta2[0, 0, 1], T * 0.5 * GAMMA * 5.25**2 * np.ones((2, 2)), rtol=1e-14)
    np.testing.assert_allclose(scaled.theta2[0, 0, 1], full.theta2[0, 0, 1] / 2, rtol=1e-14)


# theta1 ------------------------------------------------------------------

def test_no_measure_change_gives_zero_theta1(small):
    for f in small[3].values():
        assert not np.any(f.theta1)


def test_theta1_direct_integration(corr):
    p, grid, src, _ = frozen_case(g=3.5)
    f = th.solve_theta(grid, src, [p], corr, 0.0, generator=False)
    np.testing.assert_allclose(f.theta1[:, 0, :, 0], 3.5 * (T - f.times)[:, None] * np.ones(3), rtol=1e-12, atol=1e-18)


def _dense_oracle(grid, src, params, corr, gamma, n_out):
    """Packed system after spatial discretisation, integrated as a dense ODE in tau = T - t."""
    gen = Generator(grid, [params], corr)
    n_nodes = int(np.prod(grid.shape))
    basis = np.eye(n_nodes).reshape(*grid.shape, n_nodes)
    L = gen.apply(basis).reshape(n_nodes, n_nodes)
    N = src.n
    F = 1 + N + N * N
    sigma_nu = np.asarray(corr.sigmaNu, float)
    w = src.weights(0.0, sigma_nu)

    def rhs(tau, y):
        U = y.reshape(*grid.shape, F)
        explicit = th._rhs(U, w, N, src.tradeSize, gamma, sigma_nu, {})
        return (L @ U.reshape(n_nodes, F) + explicit.reshape(n_nodes, F)).ravel()

    taus = np.linspace(0.0, T, n_out)
    sol = solve_ivp(rhs, (0.0, T), np.zeros(n_nodes * F), method="Radau", t_eval=taus, rtol=1e-10, atol=1e-14)
    return sol.y.T.reshape(n_out, *grid.shape, F)[::-1]


def test_theta_small_instance_against_dense_ode(corr):
    params = HestonJumpParams(kappaP=3.0, thetaP=0.05)  # kappa_P != kappa_Q so that G != 0
    grid = SpatialGrid((np.array([95.0, 100.0, 105.0]), np.array([0.03, 0.04, 0.05])), T, 400)
    book = make_book(strikes=(98.0, 100.0), maturities=(0.4,))
    src = th.build_sources(grid, book, [params], corr, times=[0.0])
    assert np.any(src.gVec)
    fields = th.solve_theta(grid, src, [params], corr, GAMMA, save_every=100)
    ref = _dense_oracle(grid, src, params, corr, GAMMA, fields.times.size)
    N = book.n
    got = fields.data
    for sl, name in ((slice(0, 1), "theta0"), (slice(1, 1 + N), "theta1"), (slice(1 + N, None), "theta2")):
        scale = np.abs(ref[..., sl]).max()
        assert scale > 0, name
        assert np.abs(got[..., sl] - ref[..., sl]).max() <= 2e-3 * scale, name


# theta0 ------------------------------------------------------------------

def test_theta0_frozen_is_linear(corr):
    p, grid, src, (H, _, _) = frozen_case()
    f = th.solve_theta(grid, src, [p], corr, 0.0, generator=False)
    np.testing.assert_allclose(f.theta0[:, 0, :], (2 * 1.1e5 * H * (T - f.times))[:, None] * np.ones(3), rtol=1e-12)


def test_theta0_positive_over_the_day(small, params):
    f = small[3][GAMMA]
    assert th.value(f, 0.0, params.s0, params.nu0, np.zeros(2)) > 0


def test_component_wrappers_agree(small, params, corr):
    book, grid, src, fields = small
    t2 = th.solve_theta2(grid, src, GAMMA, corr, [params])
    t1 = th.solve_theta1(grid, src, t2, corr, [params])
    t0 = th.solve_theta0(grid, src, t1, t2, corr, [params])
    full = th.solve_theta(grid, src, [params], corr, GAMMA)
    np.testing.assert_allclose(t2, full.theta2, rtol=1e-13, atol=0)
    np.testing.assert_allclose(t0, full.theta0, rtol=1e-13)


# value, quotes -----------------------------------------------------------

def test_value_identities(small, params):
    book, grid, src, fields = small
    f = fields[GAMMA]
    S, nu, t = 101.3, 0.047, 0.0011
    q = np.array([2.0, -1.0]) * book.tradeSize
    th0, _, th2 = f.interpolate(t, [[S, nu]])
    assert th.value(f, t, S, nu, np.zeros(2)) == th0[0]
    lhs = th.value(f, t, S, nu, q) + th.value(f, t, S, nu, -q) - 2 * th.value(f, t, S, nu, np.zeros(2))
    assert lhs == pytest.approx(-2 * q @ th2[0] @ q, rel=1e-9)


def test_interpolation_is_exact_at_nodes(small):
    f = small[3][GAMMA]
    k, i, j = 2, 7, 4
    th0, th1, th2 = f.interpolate(f.times[k], [[f.axes[0][i], f.axes[1][j]]])
    assert th0[0] == f.theta0[k, i, j]
    assert np.array_equal(th1[0], f.theta1[k, i, j]) and np.array_equal(th2[0], f.theta2[k, i, j])


def test_out_of_hull_is_clamped_and_counted(small):
    f = small[3][GAMMA]
    before = f.clamp_counter["count"]
    inside = f.interpolate(0.0, [[f.axes[0][-1], 0.04]])[0]
    outside = f.interpolate(0.0, [[f.axes[0][-1] + 50.0, 0.04]])[0]
    assert outside == inside and f.clamp_counter["count"] == before + 1


def test_symmetric_quotes_at_zero_inventory(small, params):
    book, grid, src, fields = small
    f = fields[GAMMA]
    x = np.array([[100.0, 0.04]])
    pb, pa = th.quote_increments(f, book, 0.0, x, np.zeros(2))
    _, _, th2 = f.interpolate(0.0, x)
    np.testing.assert_array_equal(pb, pa)
    np.testing.assert_allclose(pa[0], book.tradeSize * np.diag(th2[0]), rtol=1e-15)
    assert np.all(pa >= 0)


def test_long_inventory_skews_quotes(small, params):
    book, grid, src, fields = small
    f = fields[GAMMA]
    flat = np.zeros(2)
    long = np.array([3 * book.tradeSize[0], 0.0])
    a0 = th.quote(f, book, [params], 0.0, 100.0, 0.04, flat, 0, "ask")[0]
    b0 = th.quote(f, book, [params], 0.0, 100.0, 0.04, flat, 0, "bid")[0]
    a1 = th.quote(f, book, [params], 0.0, 100.0, 0.04, long, 0, "ask")[0]
    b1 = th.quote(f, book, [params], 0.0, 100.0, 0.04, long, 0, "bid")[0]
    assert a1 < a0 and b1 > b0


def test_quote_price_brackets_mid(small, params):
    from optmm import pricing
    book, grid, src, fields = small
    mid = float(pricing.call_price(params, 0.0, 100.0, 0.04, 97.0, 0.3))
    da, pa = th.quote(fields[GAMMA], book, [params], 0.0, 100.0, 0.04, np.zeros(2), 0, "ask")
    db, pb = th.quote(fields[GAMMA], book, [params], 0.0, 100.0, 0.04, np.zeros(2), 0, "bid")
    assert pa == pytest.approx(mid + da) and pb == pytest.approx(mid - db) and pb < mid < pa


def test_ask_increases_with_variance_across_maturities(params, corr):
    book = make_book(strikes=(100.0,), maturities=(0.3, 0.4, 0.5, 0.6, 0.7))
    grid = SpatialGrid.build([params], T, n_s=31, n_nu=21, n_steps=50)
    src = th.build_sources(grid, book, [params], corr, times=grid.tNodes[::10])
    f = th.solve_theta(grid, src, [params], corr, GAMMA, save_every=10)
    for j in range(book.n):
        asks = [th.quote(f, book, [params], 0.0, 100.0, nu, np.zeros(book.n), j, "ask")[0]
                for nu in np.linspace(0.01, 0.12, 12)]
        assert np.all(np.diff(asks) > 0), j


# invariants --------------------------------------------------------------

def test_theta2_psd_everywhere(small):
    for f in small[3].values():
        t2 = f.theta2
        np.testing.assert_array_equal(t2, np.swapaxes(t2, -1, -2))
        assert np.linalg.eigvalsh(t2).min() >= -1e-10


def test_theta2_monotone_in_gamma(small):
    f = small[3]
    d = [np.diagonal(f[g].theta2, axis1=-2, axis2=-1) for g in (0.0, 1e-5, GAMMA)]
    assert np.all(d[1] >= d[0]) and np.all(d[2] >= d[1])


def test_theta2_diagonal_shrinks_toward_maturity(small):
    d = np.diagonal(small[3][GAMMA].theta2, axis1=-2, axis2=-1)
    assert np.all(np.diff(d, axis=0) <= 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(-4, 4), st.integers(-4, 4), st.floats(92.0, 108.0), st.floats(0.015, 0.09))
def test_skew_antisymmetry(small_cache, k0, k1, S, nu):
    book, f = small_cache
    q = np.array([k0, k1]) * book.tradeSize
    x = np.array([[S, nu]])
    pb_plus, pa_plus = th.quote_increments(f, book, 0.0, x, q)
    pb_minus, pa_minus = th.quote_increments(f, book, 0.0, x, -q)
    np.testing.assert_allclose(pa_plus, pb_minus, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(pb_plus, pa_minus, rtol=1e-12, atol=1e-12)


@pytest.fixture(scope="module")
def small_cache(small):
    return small[0], small[3][GAMMA]


# residual check ----------------------------------------------------------

def test_residual_vanishes_when_ansatz_is_exact(corr):
    # small-scale frozen sources keep the roundoff of theta0 below the 1e-10 floor
    p, grid, src, _ = frozen_case(vega=1.0, z=1.0, lam=1.0, nu=tuple(np.linspace(0.02, 0.06, 5)))
    f = th.solve_theta(grid, src, [p], corr, 0.0, generator=False)
    qs = [np.zeros(1), np.ones(1), -2 * np.ones(1)]
    box = {"s_rel": (0.0, 10.0), "nu": (0.0, 1.0)}
    assert th.residual_check(f, grid, src, 0.0, [p], corr, qs, box=box, generator=False) <= 1e-10


def test_residual_at_zero_inventory_is_theta0_defect(small, params, corr):
    book, grid, src, fields = small
    f = fields[GAMMA]
    box = {"s_rel": (0.9, 1.1), "nu": (0.02, 0.08)}
    r = th.residual_check(f, grid, src, GAMMA, [params], corr, [np.zeros(2)], box=box)
    from optmm.grid import apply_generator
    mask = th.probe_mask(grid, [params], box)
    z, worst = book.tradeSize, 0.0
    for k in range(f.times.size - 1):
        parts = []
        for kk in (k, k + 1):
            w = src.weights(f.times[kk], np.eye(1))
            t1, t2 = f.theta1[kk], np.diagonal(f.theta2[kk], axis1=-2, axis2=-1)
            src0 = (w["h0"] + w["h1"] * t1 + w["hs"] * z * t2 + w["h2"] * t1 * t1).sum(-1)
            parts.append(apply_generator(grid, [params], corr, f.theta0[kk], order=4) + src0)
        d = (f.theta0[k + 1] - f.theta0[k]) / (f.times[k + 1] - f.times[k]) + 0.5 * (parts[0] + parts[1])
        worst = max(worst, np.abs(d[mask]).max())
    assert r == pytest.approx(worst, rel=1e-12)
