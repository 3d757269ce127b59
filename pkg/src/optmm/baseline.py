"""Constant-Vega comparison strategy: an HJB on (t, nu, portfolio Vega).

The book is collapsed into its Vega ``V = sum_j q_j Vega_j`` (q in contracts)
with every option Vega frozen at the day-start state. A bid fill on option j
moves V by ``+z_j Vega_j`` and an ask fill by ``-z_j Vega_j``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import pricing
from .grid import Generator, SpatialGrid
from .hamiltonian import quote_arrays
from .model import BookSpec, CorrelationStructure, HestonJumpParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VegaPortfolioGrid:
    nuNodes: np.ndarray
    vegaNodes: np.ndarray
    tNodes: np.ndarray
    frozenVegas: np.ndarray
    tradeSize: np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.frozenVegas) > 0)):
            raise ValueError("frozen Vegas must be positive")
        if np.any(np.diff(self.vegaNodes) <= 0) or np.any(np.diff(self.nuNodes) <= 0):
            raise ValueError("axes must be strictly increasing")
        if self.nuNodes[0] <= 0:
            raise ValueError("variance nodes must be positive")

    @classmethod
    def build(
        cls,
        params: HestonJumpParams,
        book: BookSpec,
        horizon: float,
        n_nu: int = 40,
        nu_min: float = 0.005,
        nu_max: float = 0.15,
        n_vega: int = 81,
        trades: float = 40.0,
        n_steps: int | None = None,
        stability: float = 0.5,
    ) -> "VegaPortfolioGrid":
        """Frozen Vegas at (t=0, s0, nu0); the time step is chosen from the explicit stability bound when omitted."""
        vegas = np.array(
            [float(pricing.greeks(params, 0.0, params.s0, params.nu0, o.strike, o.maturity).vega) for o in book.options]
        )
        z = np.asarray(book.tradeSize, dtype=float)
        span = trades * float(np.max(z * vegas))
        if n_steps is None:
            total = sum(ip.lambdaMax for ip in book.intensityBid) + sum(ip.lambdaMax for ip in book.intensityAsk)
            n_steps = int(np.ceil(horizon * total / stability))
        return cls(
            nuNodes=np.linspace(nu_min, nu_max, n_nu),
            vegaNodes=np.linspace(-span, span, n_vega),
            tNodes=np.linspace(0.0, horizon, n_steps + 1),
            frozenVegas=vegas,
            tradeSize=z,
        )


@dataclass(frozen=True)
class BaselineFields:
    grid: VegaPortfolioGrid
    times: np.ndarray
    values: np.ndarray  # (K, n_nu, n_vega)
    gamma: float
    clamp_counter: dict = field(default_factory=lambda: {"count": 0}, compare=False)

    def interpolate(self, t: float, nu, V) -> np.ndarray:
        """Trilinear interpolation in (t, nu, V); out-of-hull points are clamped and counted."""
        nu = np.atleast_1d(np.asarray(nu, float))
        V = np.atleast_1d(np.asarray(V, float))
        nu, V = np.broadcast_arrays(nu, V)
        idx, wts = [], []
        clamped = np.zeros(nu.shape, dtype=bool)
        for c, ax in ((np.full(nu.shape, float(t)), self.times), (nu, self.grid.nuNodes), (V, self.grid.vegaNodes)):
            cc = np.clip(c, ax[0], ax[-1])
            clamped |= cc != c
            i = np.clip(np.searchsorted(ax, cc, side="right") - 1, 0, ax.size - 2)
            idx.append(i)
            wts.append((cc - ax[i]) / (ax[i + 1] - ax[i]))
        if clamped.any():
            self.clamp_counter["count"] += int(clamped.sum())
            log.warning("%d point(s) outside the baseline grid hull were clamped", int(clamped.sum()))
        out = np.zeros(nu.shape)
        for corner in range(8):
            ix, w = [], np.ones(nu.shape)
            for b in range(3):
                if corner >> b & 1:
                    ix.append(idx[b] + 1)
                    w = w * wts[b]
                else:
                    ix.append(idx[b])
                    w = w * (1 - wts[b])
            out += w * self.values[tuple(ix)]
        return out


def _shifted(u: np.ndarray, axis_v: np.ndarray, shift: float) -> np.ndarray:
    """u(V + shift) along the last axis, linear interpolation and extrapolation."""
    x = axis_v + shift
    i = np.clip(np.searchsorted(axis_v, x, side="right") - 1, 0, axis_v.size - 2)
    w = (x - axis_v[i]) / (axis_v[i + 1] - axis_v[i])
    return u[..., i] * (1 - w) + u[..., i + 1] * w


def _intensity_arrays(book: BookSpec, side: str):
    ip = book.intensity(side)
    return (np.array([x.lambdaMax for x in ip]), np.array([x.alpha for x in ip]), np.array([x.beta for x in ip]))


def increments(u: np.ndarray, grid: VegaPortfolioGrid):
    """(p_bid, p_ask), each shaped u.shape + (N,)."""
    zV = grid.tradeSize * grid.frozenVegas
    z = grid.tradeSize
    pb = np.stack([(u - _shifted(u, grid.vegaNodes, s)) / zj for s, zj in zip(zV, z)], axis=-1)
    pa = np.stack([(u - _shifted(u, grid.vegaNodes, -s)) / zj for s, zj in zip(zV, z)], axis=-1)
    return pb, pa


def solve_baseline(
    grid: VegaPortfolioGrid,
    params: HestonJumpParams,
    book: BookSpec,
    gamma: float,
    save_every: int | None = None,
) -> BaselineFields:
    """Backward march: implicit in nu, explicit in the Hamiltonian and penalty terms."""
    nu, V = grid.nuNodes, grid.vegaNodes
    tn = grid.tNodes
    M = tn.size - 1
    dt = tn[1] - tn[0]
    if save_every is None:
        save_every = max(1, M // 200)
    sg = SpatialGrid((np.array([params.s0]), nu), horizon=float(tn[-1]), n_steps=M)
    gen = Generator(sg, [params], CorrelationStructure.identity(1))
    aP = params.kappaP * (params.thetaP - nu)
    aQ = params.kappaQ * (params.thetaQ - nu)
    drift = ((aP - aQ) / (2 * np.sqrt(nu)))[:, None] * V[None, :]
    penalty = gamma * params.xi**2 / 8.0 * V[None, :] ** 2
    lb, ab, bb = _intensity_arrays(book, "bid")
    la, aa, ba = _intensity_arrays(book, "ask")
    vega, z = grid.frozenVegas, grid.tradeSize
    u = np.zeros((1, nu.size, V.size))
    saved_t, saved = [tn[M]], [u[0].copy()]
    for n in range(M, 0, -1):
        pb, pa = increments(u[0], grid)
        hb = quote_arrays(lb, ab, bb, vega, pb).value
        ha = quote_arrays(la, aa, ba, vega, pa).value
        F = drift - penalty + ((hb + ha) * z).sum(-1)
        u = gen.douglas_step(u, F[None], dt)
        if not np.all(np.isfinite(u)):
            raise ArithmeticError(f"baseline march produced non-finite values at t={tn[n - 1]:.6g}")
        if (n - 1) % save_every == 0:
            saved_t.append(tn[n - 1])
            saved.append(u[0].copy())
    order = np.argsort(saved_t)
    return BaselineFields(grid, np.asarray(saved_t)[order], np.stack([saved[i] for i in order]), float(gamma))


def quote_increments(fields: BaselineFields, t: float, nu, vega_portfolio):
    """Vectorised (p_bid, p_ask) of shape (P, N) at states (nu, V)."""
    g = fields.grid
    nu = np.atleast_1d(np.asarray(nu, float))
    Vp = np.atleast_1d(np.asarray(vega_portfolio, float))
    zV, z = g.tradeSize * g.frozenVegas, g.tradeSize
    u0 = fields.interpolate(t, nu, Vp)
    up = np.stack([fields.interpolate(t, nu, Vp + s) for s in zV], axis=-1)
    um = np.stack([fields.interpolate(t, nu, Vp - s) for s in zV], axis=-1)
    return (u0[:, None] - up) / z, (u0[:, None] - um) / z


def baseline_quote(fields: BaselineFields, book: BookSpec, t: float, nu: float, vega_portfolio: float, j: int, side: str) -> float:
    """Spread for option ``j`` on ``side`` using the frozen Vega in the logit slope."""
    pb, pa = quote_increments(fields, t, nu, vega_portfolio)
    p_arg = (pa if side == "ask" else pb)[0, j]
    ip = book.intensity(side)[j]
    return float(quote_arrays(ip.lambdaMax, ip.alpha, ip.beta, fields.grid.frozenVegas[j], p_arg).argmax)
