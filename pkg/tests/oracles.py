"""Independent reference implementations used only by the tests."""

import numpy as np
from scipy.integrate import quad
from scipy.linalg import solve_banded
from scipy.optimize import minimize_scalar
from scipy.special import expit


def brute_force_hamiltonian(lam, alpha, beta, vega, p, step=1e-4):
    """sup_delta Lambda(delta) (delta - p) by grid search plus bounded local refinement.

    The grid is expressed in units of vega / beta so that it resolves the
    maximiser at every Vega scale.
    """
    unit = vega / beta
    # the payoff is negative for delta < p; the maximiser sits within (|p|/unit + 30) units above p
    grid = p + unit * np.arange(0.0, abs(p) / unit + 30.0, step)
    f = lam * expit(-(alpha + beta * grid / vega)) * (grid - p)
    k = int(np.argmax(f))
    lo, hi = grid[max(k - 2, 0)], grid[min(k + 2, grid.size - 1)]
    res = minimize_scalar(lambda d: -lam * expit(-(alpha + beta * d / vega)) * (d - p),
                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-13 * max(1.0, abs(p) + unit)})
    return -res.fun, res.x


def heston_call_p1p2(p, S, nu, K, tau):
    """Heston call from the two-probability representation, integrated with adaptive quadrature."""
    x = np.log(S)

    def cf(u, j):
        b = p.kappaQ - p.rho * p.xi if j == 1 else p.kappaQ
        uj = 0.5 if j == 1 else -0.5
        a = p.kappaQ * p.thetaQ
        d = np.sqrt((p.rho * p.xi * 1j * u - b) ** 2 - p.xi**2 * (2 * uj * 1j * u - u * u))
        g = (b - p.rho * p.xi * 1j * u - d) / (b - p.rho * p.xi * 1j * u + d)
        e = np.exp(-d * tau)
        C = a / p.xi**2 * ((b - p.rho * p.xi * 1j * u - d) * tau - 2 * np.log((1 - g * e) / (1 - g)))
        D = (b - p.rho * p.xi * 1j * u - d) / p.xi**2 * (1 - e) / (1 - g * e)
        return np.exp(C + D * nu + 1j * u * x)

    def prob(j):
        f = lambda u: (np.exp(-1j * u * np.log(K)) * cf(u, j) / (1j * u)).real  # noqa: E731
        return 0.5 + quad(f, 1e-10, 500, limit=2000, epsabs=1e-13, epsrel=1e-13)[0] / np.pi

    return S * prob(1) - K * prob(2)


def mc_call_control_variate(p, S0, nu0, K, T, n_paths, n_steps, seed, chunk=250_000):
    """Euler full truncation (log-spot) Monte Carlo with S_T as a control variate (E[S_T] = S0)."""
    rng = np.random.default_rng(seed)
    dt = T / n_steps
    X, Y = [], []
    for _ in range(n_paths // chunk):
        lnS = np.full(chunk, np.log(S0))
        v = np.full(chunk, nu0)
        for _ in range(n_steps):
            z1 = rng.standard_normal(chunk)
            z2 = p.rho * z1 + np.sqrt(1 - p.rho**2) * rng.standard_normal(chunk)
            vp = np.maximum(v, 0.0)
            sq = np.sqrt(vp * dt)
            lnS += -0.5 * vp * dt + sq * z1
            v += p.kappaQ * (p.thetaQ - vp) * dt + p.xi * sq * z2
        S = np.exp(lnS)
        X.append(np.maximum(S - K, 0.0))
        Y.append(S)
    X, Y = np.concatenate(X), np.concatenate(Y)
    b = np.cov(X, Y)[0, 1] / Y.var()
    Z = X - b * (Y - S0)
    return Z.mean(), Z.std(ddof=1) / np.sqrt(Z.size)


FD1 = {-2: 1 / 12, -1: -8 / 12, 1: 8 / 12, 2: -1 / 12}
FD2 = {-2: -1 / 12, -1: 16 / 12, 0: -30 / 12, 1: 16 / 12, 2: -1 / 12}


def fd_greeks(price, S, nu, hS=0.05, hnu=2e-4):
    """Fourth-order central differences of ``price(S, nu)`` in the sqrt(nu) convention."""
    dS = sum(w * price(S + k * hS, nu) for k, w in FD1.items()) / hS
    dn = sum(w * price(S, nu + k * hnu) for k, w in FD1.items()) / hnu
    dnn = sum(w * price(S, nu + k * hnu) for k, w in FD2.items()) / hnu**2
    dSn = sum(a * b * price(S + i * hS, nu + j * hnu) for i, a in FD1.items() for j, b in FD1.items()) / (hS * hnu)
    sq = np.sqrt(nu)
    return {"delta": dS, "vega": 2 * sq * dn, "vanna": 2 * sq * dSn, "vomma": 4 * nu * dnn}


def rk4(f, y0, t_span, n):
    y = np.array(y0, dtype=float)
    h = (t_span[1] - t_span[0]) / n
    t = t_span[0]
    for _ in range(n):
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return y


def full_hjb_frozen_spot(p, nu_axis, times, vega_of, z, lam, alpha, beta, gamma, n_levels=3):
    """Exact-inventory HJB on (t, nu, q) with the spot frozen, for a single option.

    Inventory q in {-n z, ..., n z}; one level beyond each end comes from
    quadratic extrapolation. Implicit Euler in nu (own tridiagonal
    assembly), explicit Hamiltonians. ``vega_of(t)`` returns Vega on
    ``nu_axis``. Returns u with shape (len(times), len(nu_axis), 2n+1).
    """
    from optmm.hamiltonian import quote_arrays

    n_nu = nu_axis.size
    h = nu_axis[1] - nu_axis[0]
    drift = p.kappaP * (p.thetaP - nu_axis)
    diff = 0.5 * p.xi**2 * nu_axis
    lower = diff / h**2 - drift / (2 * h)
    upper = diff / h**2 + drift / (2 * h)
    centre = -2 * diff / h**2
    # boundaries: one-sided first derivative, no second derivative
    lower[0], centre[0], upper[0] = 0.0, -drift[0] / h, drift[0] / h
    lower[-1], centre[-1], upper[-1] = -drift[-1] / h, drift[-1] / h, 0.0
    q = np.arange(-n_levels, n_levels + 1) * z
    R = p.xi / 2.0
    u = np.zeros((n_nu, q.size))
    out = [u.copy()]
    for k in range(times.size - 1, 0, -1):
        dt = times[k] - times[k - 1]
        t = times[k]
        vega = vega_of(t)[:, None]
        ext = np.concatenate([
            (3 * u[:, :1] - 3 * u[:, 1:2] + u[:, 2:3]),
            u,
            (3 * u[:, -1:] - 3 * u[:, -2:-1] + u[:, -3:-2]),
        ], axis=1)
        pb = (ext[:, 1:-1] - ext[:, 2:]) / z
        pa = (ext[:, 1:-1] - ext[:, :-2]) / z
        ham = quote_arrays(lam, alpha, beta, vega, pb).value + quote_arrays(lam, alpha, beta, vega, pa).value
        G = 0.0  # P and Q variance coefficients coincide in the tests
        pen = 0.5 * gamma * (R * vega) ** 2 * q[None, :] ** 2
        rhs = u + dt * (z * ham - pen + G)
        ab = np.zeros((3, n_nu))
        ab[0, 1:] = -dt * upper[:-1]
        ab[1] = 1 - dt * centre
        ab[2, :-1] = -dt * lower[1:]
        u = solve_banded((1, 1), ab, rhs)
        out.append(u.copy())
    return np.stack(out[::-1]), q
