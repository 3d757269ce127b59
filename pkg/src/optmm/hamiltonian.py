"""Logistic RFQ fill intensities and the associated Hamiltonians.

For a quote at distance ``delta`` from the mid the fill intensity is

    Lambda(delta) = lambdaMax / (1 + exp(alpha + beta * delta / vega))

and the Hamiltonian is ``H(p) = sup_delta Lambda(delta) * (delta - p)``.
Writing ``g = alpha + beta * delta / vega`` the first-order condition is

    g - alpha - beta * p / vega = 1 + exp(-g),

which has a unique root because the left minus right side is increasing
and concave in ``g``. The root is ``c + omega(-c)`` with ``c = alpha + y + 1``
and ``omega`` the Wright omega function. Everything below is vectorised over numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, wrightomega


class HamiltonianError(ArithmeticError):
    """Raised when the optimal-quote root search fails to converge."""


@dataclass(frozen=True)
class IntensityParams:
    lambdaMax: float
    alpha: float = -0.7
    beta: float = 10.0
    side: str = "ask"

    @property
    def fill_probability_at_mid(self) -> float:
        return float(expit(-self.alpha))


@dataclass(frozen=True)
class HamiltonianEval:
    value: np.ndarray
    argmax: np.ndarray
    firstDeriv: np.ndarray
    secondDeriv: np.ndarray


def _check_vega(vega) -> np.ndarray:
    vega = np.asarray(vega, dtype=float)
    if np.any(~(vega > 0)):
        raise ValueError("vega must be strictly positive for the logistic intensity")
    return vega


def rate(params: IntensityParams, vega, delta_quote):
    """Fill intensity (per year) for a quote ``delta_quote`` away from the mid."""
    vega = _check_vega(vega)
    g = params.alpha + params.beta * np.asarray(delta_quote, dtype=float) / vega
    return params.lambdaMax * expit(-g)


def _solve_logit(y: np.ndarray, alpha, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """Root of f(g) = g - alpha - y - 1 - exp(-g) by safeguarded Newton.

    The bracket [c, c + exp(-c)] with c = alpha + y + 1 always contains the
    root: f(c) = -exp(-c) < 0 and f(c + exp(-c)) = exp(-c) - exp(-c - exp(-c)) > 0.
    """
    c = alpha + y + 1.0
    lo = np.array(c, dtype=float)
    with np.errstate(over="ignore"):
        hi = c + np.exp(-c)
    # w = g - c solves w e^w = e^-c, so the Wright omega function gives the root; Newton only polishes
    g = np.clip(c + wrightomega(-c).real, lo, hi)
    for _ in range(max_iter):
        e = np.exp(-g)
        f = g - c - e
        done = np.abs(f) <= tol * np.maximum(1.0, np.abs(c))
        if np.all(done):
            return g
        lo = np.where(f < 0, g, lo)
        hi = np.where(f > 0, g, hi)
        step = g - f / (1.0 + e)
        bad = (step <= lo) | (step >= hi) | ~np.isfinite(step)
        g = np.where(done, g, np.where(bad, 0.5 * (lo + hi), step))
    e = np.exp(-g)
    resid = np.abs(g - c - e)
    if np.all(resid <= tol * np.maximum(1.0, np.abs(c))):
        return g
    worst = int(np.argmax(resid))
    raise HamiltonianError(
        f"optimal quote did not converge in {max_iter} iterations: max residual {resid.max():.3e}"
        f" at flat index {worst} (y={np.ravel(y)[worst] if np.ndim(y) else y})"
    )


def optimal_quote(params: IntensityParams, vega, p) -> HamiltonianEval:
    """Optimal spread ``delta*(p)``, ``H(p)`` and its first two derivatives."""
    return quote_arrays(params.lambdaMax, params.alpha, params.beta, vega, p)


def quote_arrays(lam, alpha, beta, vega, p) -> HamiltonianEval:
    """Array form of :func:`optimal_quote`; all arguments broadcast together."""
    vega = _check_vega(vega)
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("reservation increment p must be finite")
    lam = np.asarray(lam, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    scale = vega / np.asarray(beta, dtype=float)
    y = p / scale
    shape = np.broadcast_shapes(y.shape, alpha.shape, lam.shape)
    g = _solve_logit(np.broadcast_to(y, shape), alpha)
    fill = expit(-g)
    delta = (g - alpha) * scale
    value = lam * scale * np.exp(-g)
    first = -lam * fill
    # -Lambda'(delta*) * d delta*/dp, with d delta*/dp = expit(g)
    second = lam / scale * fill * expit(g) ** 2
    return HamiltonianEval(value=value, argmax=delta, firstDeriv=first, secondDeriv=second)


def h_derivs_zero(params: IntensityParams, vega):
    """``(H(0), H'(0), H''(0))`` as consumed by the quadratic expansion."""
    ev = optimal_quote(params, vega, 0.0)
    return ev.value, ev.firstDeriv, ev.secondDeriv
