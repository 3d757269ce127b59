"""European call prices and volatility Greeks under the risk-neutral Heston dynamics.

Prices use the single-integral (Lewis) representation with zero rates,

    C = S - K/pi * int_0^inf Re[exp((iu + 1/2) x + A(u) + B(u) nu)] / (u^2 + 1/4) du,

with ``x = log(S/K)`` and ``exp(A + B nu)`` the characteristic function of
``log(S_T/S_t)`` at ``u - i/2``. Greeks are obtained by differentiating
under the integral sign, which only multiplies the integrand by powers of
``(iu + 1/2)`` and ``B(u)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from .model import HestonJumpParams

MAX_NODES = 4096


class PricingError(ValueError):
    pass


@dataclass(frozen=True)
class GreeksBundle:
    """Price and Greeks; volatility Greeks are per unit of sqrt(nu)."""

    price: np.ndarray
    delta: np.ndarray
    vega: np.ndarray
    vanna: np.ndarray
    vomma: np.ndarray


@lru_cache(maxsize=32)
def _legendre01(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _nodes(n: int, scale: float) -> tuple[np.ndarray, np.ndarray]:
    s, w = _legendre01(n)
    u = scale * s / (1.0 - s)
    return u, w * scale / (1.0 - s) ** 2


def _cf_coeffs(p: HestonJumpParams, tau: float, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """A(u), B(u) of the log-spot characteristic function evaluated at u - i/2."""
    k, th, xi, rho = p.kappaQ, p.thetaQ, p.xi, p.rho
    q = u * u + 0.25  # i w + w^2 at w = u - i/2
    if xi == 0.0:
        b = tau if k == 0.0 else -np.expm1(-k * tau) / k
        B = -0.5 * q * b + 0j
        A = -0.5 * q * th * (tau - b) + 0j
        return A, B
    beta = k - rho * xi * (1j * u + 0.5)
    d = np.sqrt(beta * beta + xi * xi * q)
    g = (beta - d) / (beta + d)
    e = np.exp(-d * tau)
    B = (beta - d) / xi**2 * (1.0 - e) / (1.0 - g * e)
    A = k * th / xi**2 * ((beta - d) * tau - 2.0 * np.log((1.0 - g * e) / (1.0 - g)))
    return A, B


def _integrals(p, tau, S, nu, K, n):
    """Quadrature of the integrand and its x / nu derivatives. Returns a dict of arrays."""
    u, w = _nodes(n, 6.0 / np.sqrt(max(p.thetaQ * tau, 1e-8)))
    A, B = _cf_coeffs(p, tau, u)
    x = np.log(S / K)[..., None]
    z = 1j * u + 0.5
    E = np.exp(z * x + A + B * np.asarray(nu)[..., None])
    wt = w * (K / np.pi) / (u * u + 0.25)
    zE, BE = z * E, B * E
    return {
        "I": (E.real * wt).sum(-1),
        "Ix": (zE.real * wt).sum(-1),
        "Ixx": ((z * zE).real * wt).sum(-1),
        "In": (BE.real * wt).sum(-1),
        "Inn": ((B * BE).real * wt).sum(-1),
        "Ixn": ((z * BE).real * wt).sum(-1),
    }


def _integrals_mesh(p, tau, S_axis, nu_axis, K, n):
    """As :func:`_integrals` on the tensor mesh S_axis x nu_axis.

    The integrand factorises as exp(z x) * exp(A + B nu), so every integral
    is a complex matrix product over the quadrature nodes.
    """
    u, w = _nodes(n, 6.0 / np.sqrt(max(p.thetaQ * tau, 1e-8)))
    A, B = _cf_coeffs(p, tau, u)
    z = 1j * u + 0.5
    X = np.exp(np.log(np.asarray(S_axis, float) / K)[:, None] * z)
    Y = np.exp(A + B * np.asarray(nu_axis, float)[:, None]) * (w * (K / np.pi) / (u * u + 0.25))
    zX, zzX, BY = X * z, X * z * z, Y * B
    return {
        "I": (X @ Y.T).real,
        "Ix": (zX @ Y.T).real,
        "Ixx": (zzX @ Y.T).real,
        "In": (X @ BY.T).real,
        "Inn": (X @ (BY * B).T).real,
        "Ixn": (zX @ BY.T).real,
    }


def greeks_mesh(p: HestonJumpParams, t, S_axis, nu_axis, K, Tmat, n_nodes: int | None = None) -> GreeksBundle:
    """Greeks on the tensor mesh ``S_axis x nu_axis`` (result shape (len(S), len(nu)))."""
    tau = _check(p, t, Tmat)
    S_axis = np.asarray(S_axis, float)
    nu_axis = np.maximum(np.asarray(nu_axis, float), 0.0)
    S, nu = np.meshgrid(S_axis, nu_axis, indexing="ij")
    if K == 0:
        zz = np.zeros_like(S)
        return GreeksBundle(S.copy(), np.ones_like(S), zz, zz.copy(), zz.copy())
    n = n_nodes or node_count(p, tau, K, S, nu)
    r = _integrals_mesh(p, tau, S_axis, nu_axis, K, n)
    sq = np.sqrt(nu)
    return GreeksBundle(
        price=_band(S, K, r["I"]),
        delta=1.0 - r["Ix"] / S,
        vega=-2.0 * sq * r["In"],
        vanna=-2.0 * sq * r["Ixn"] / S,
        vomma=-4.0 * nu * r["Inn"],
    )


def _band(S, K, I):
    # quadrature noise of order 1e-10 must not push deep OTM prices outside [max(S-K,0), S]
    return np.clip(S - I, np.maximum(S - K, 0.0), S)


def _check(p: HestonJumpParams, t, Tmat):
    if p.jump.rate != 0.0:
        raise PricingError("semi-analytic pricing requires jump rate 0")
    tau = float(Tmat) - float(t)
    if not tau > 0:
        raise PricingError(f"maturity {Tmat} must be after t={t}")
    return tau


@lru_cache(maxsize=4096)
def _node_count(p: HestonJumpParams, tau: float, K: float, s_lo: float, s_hi: float, n_lo: float, n_hi: float) -> int:
    """Smallest Gauss-Legendre size (from 128, doubling) whose price agrees with the next to 1e-8."""
    S = np.array([s_lo, 0.5 * (s_lo + s_hi), s_hi])[:, None] * np.ones((1, 3))
    nu = np.array([n_lo, 0.5 * (n_lo + n_hi), n_hi])[None, :] * np.ones((3, 1))
    n = 128
    prev = _integrals(p, tau, S, nu, K, n)["I"]
    while n < MAX_NODES:
        cur = _integrals(p, tau, S, nu, K, 2 * n)["I"]
        if np.max(np.abs(cur - prev)) <= 1e-8:
            return n
        n, prev = 2 * n, cur
    raise PricingError(f"price quadrature did not settle with {MAX_NODES} nodes (tau={tau}, K={K})")


def node_count(p, tau, K, S, nu) -> int:
    S, nu = np.asarray(S, float), np.asarray(nu, float)
    return _node_count(p, float(tau), float(K), float(S.min()), float(S.max()),
                       float(max(nu.min(), 0.0)), float(max(nu.max(), 0.0)))


def call_price(p: HestonJumpParams, t, S, nu, K, Tmat, n_nodes: int | None = None):
    """Heston call price (zero rates, zero dividends), vectorised over ``S`` and ``nu``."""
    tau = _check(p, t, Tmat)
    S, nu = np.broadcast_arrays(np.asarray(S, float), np.maximum(np.asarray(nu, float), 0.0))
    if K == 0:
        return S.copy()
    n = n_nodes or node_count(p, tau, K, S, nu)
    return _band(S, K, _integrals(p, tau, S, nu, K, n)["I"])


def greeks(p: HestonJumpParams, t, S, nu, K, Tmat, n_nodes: int | None = None) -> GreeksBundle:
    tau = _check(p, t, Tmat)
    S, nu = np.broadcast_arrays(np.asarray(S, float), np.maximum(np.asarray(nu, float), 0.0))
    if K == 0:
        z = np.zeros_like(S)
        return GreeksBundle(S.copy(), np.ones_like(S), z, z.copy(), z.copy())
    n = n_nodes or node_count(p, tau, K, S, nu)
    r = _integrals(p, tau, S, nu, K, n)
    sq = np.sqrt(nu)
    return GreeksBundle(
        price=_band(S, K, r["I"]),
        delta=1.0 - r["Ix"] / S,
        vega=-2.0 * sq * r["In"],
        vanna=-2.0 * sq * r["Ixn"] / S,
        vomma=-4.0 * nu * r["Inn"],
    )


def gamma(p: HestonJumpParams, t, S, nu, K, Tmat, n_nodes: int | None = None):
    tau = _check(p, t, Tmat)
    S, nu = np.broadcast_arrays(np.asarray(S, float), np.maximum(np.asarray(nu, float), 0.0))
    if K == 0:
        return np.zeros_like(S)
    r = _integrals(p, tau, S, nu, K, n_nodes or node_count(p, tau, K, S, nu))
    return -(r["Ixx"] - r["Ix"]) / S**2


# Black-Scholes (zero rates) ------------------------------------------------

def bs_call(S, K, tau, sigma):
    S, K, sigma = np.asarray(S, float), np.asarray(K, float), np.asarray(sigma, float)
    sd = sigma * np.sqrt(tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(S / K) / sd + 0.5 * sd
    return S * ndtr(d1) - K * ndtr(d1 - sd)


def bs_vega(S, K, tau, sigma):
    sd = sigma * np.sqrt(tau)
    d1 = np.log(S / K) / sd + 0.5 * sd
    return S * np.sqrt(tau) * np.exp(-0.5 * d1 * d1) / np.sqrt(2 * np.pi)


def implied_vol(price: float, S: float, K: float, tau: float) -> float:
    """Black-Scholes implied volatility by bracketed root finding."""
    if not tau > 0:
        raise PricingError("tau must be positive")
    lower = max(S - K, 0.0)
    if not (lower < price < S):
        raise PricingError(f"price {price} outside the no-arbitrage band ({lower}, {S})")
    f = lambda s: float(bs_call(S, K, tau, s)) - price  # noqa: E731
    hi = 1.0
    while f(hi) < 0:
        hi *= 2.0
        if hi > 1e3:
            raise PricingError("implied volatility above 1000")
    return brentq(f, 1e-12, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)


def surface(p: HestonJumpParams, strikes, maturities, t: float = 0.0) -> list[tuple[float, float, float]]:
    """Implied volatility at (s0, nu0) for every strike x maturity cell, maturity-major."""
    out = []
    for T in maturities:
        for K in strikes:
            c = float(call_price(p, t, p.s0, p.nu0, K, T))
            out.append((float(K), float(T), implied_vol(c, p.s0, K, T - t)))
    return out
