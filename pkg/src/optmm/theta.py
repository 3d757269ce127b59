"""Quadratic-ansatz solver: theta0, theta1, theta2 on the (t, S, nu) grid.

The value function is approximated by ``u = theta0 + q.theta1 - q.theta2.q``
with ``q`` the inventory in contracts. Substituting into the second-order
expansion of the HJB equation and matching powers of ``q`` gives, with the
per-option weights

    h0 = z (Hb(0) + Ha(0)),   h1 = z (Ha'(0) - Hb'(0)),
    hs = z (Ha'(0) + Hb'(0)), h2 = z (Ha''(0) + Hb''(0)) / 2,

the backward system (P = R Sigma_nu R^T)

    d_t theta2 + L theta2 + (gamma/2) P - 4 theta2 diag(h2) theta2 = 0
    d_t theta1 + L theta1 + G - theta2 (2 h1 + 4 h2 * theta1) = 0
    d_t theta0 + L theta0 + sum_j [h0 + h1 theta1 + hs z theta2_jj + h2 theta1^2] = 0

with zero terminal data. ``residual_check`` evaluates the expanded HJB
directly from the ansatz, so it does not rely on this derivation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import pricing
from .grid import Generator, SpatialGrid, apply_generator
from .hamiltonian import quote_arrays
from .model import BookSpec, CorrelationStructure, HestonJumpParams

log = logging.getLogger(__name__)

PENALTY_FORMS = ("riccati_full", "eq6_scaled")
VEGA_FLOOR = 1e-10


class SolverError(ArithmeticError):
    """Backward march produced non-finite values or tripped the Riccati guard."""


@dataclass(frozen=True)
class SourceFields:
    """Greek-derived coefficients on the grid at a set of times.

    Arrays carry a leading time axis matching ``times`` and then the grid
    shape. The last axis of the Hamiltonian arrays is (bid, ask).
    """

    times: np.ndarray
    vega: np.ndarray  # (K, *grid, N)
    gVec: np.ndarray  # (K, *grid, N)
    rMat: np.ndarray  # (K, *grid, N, d)
    hZero: np.ndarray  # (K, *grid, N, 2)
    hPrimeZero: np.ndarray
    hDoublePrimeZero: np.ndarray
    tradeSize: np.ndarray  # (N,)

    @property
    def n(self) -> int:
        return self.tradeSize.size

    def _lerp(self, arr: np.ndarray, t: float) -> np.ndarray:
        ts = self.times
        if ts.size == 1 or t <= ts[0]:
            return arr[0]
        if t >= ts[-1]:
            return arr[-1]
        i = int(np.searchsorted(ts, t, side="right") - 1)
        w = (t - ts[i]) / (ts[i + 1] - ts[i])
        if w == 0.0:
            return arr[i]
        return (1 - w) * arr[i] + w * arr[i + 1]

    def at(self, t: float) -> dict[str, np.ndarray]:
        return {
            "vega": self._lerp(self.vega, t),
            "G": self._lerp(self.gVec, t),
            "R": self._lerp(self.rMat, t),
            "H": self._lerp(self.hZero, t),
            "H1": self._lerp(self.hPrimeZero, t),
            "H2": self._lerp(self.hDoublePrimeZero, t),
        }

    def weights(self, t: float, sigma_nu: np.ndarray, penalty_factor: float = 1.0) -> dict[str, np.ndarray]:
        """The combined per-option weights h0, h1, hs, h2 plus G and the penalty matrix P."""
        s = self.at(t)
        z = self.tradeSize
        R = s["R"]
        P = np.einsum("...ni,ij,...mj->...nm", R, np.asarray(sigma_nu, float), R) * penalty_factor
        return {
            "h0": z * (s["H"][..., 0] + s["H"][..., 1]),
            "h1": z * (s["H1"][..., 1] - s["H1"][..., 0]),
            "hs": z * (s["H1"][..., 0] + s["H1"][..., 1]),
            "h2": 0.5 * z * (s["H2"][..., 0] + s["H2"][..., 1]),
            "G": s["G"],
            "P": P,
        }


def build_sources(
    grid: SpatialGrid,
    book: BookSpec,
    params: Sequence[HestonJumpParams],
    corr: CorrelationStructure,
    times: Sequence[float] | None = None,
) -> SourceFields:
    """Evaluate Vega, G, R and the Hamiltonian derivatives at every node and time in ``times``.

    ``times`` defaults to every grid time step. Each option only depends on
    its own underlying's (S, nu) axes; values are broadcast over the rest.
    """
    times = np.asarray(grid.tNodes if times is None else times, dtype=float)
    shape, N, d = grid.shape, book.n, grid.d
    K = times.size
    vega = np.empty((K, *shape, N))
    gvec = np.empty_like(vega)
    rmat = np.zeros((K, *shape, N, d))
    und = book.underlying_index()
    mesh = grid.mesh()
    for j, opt in enumerate(book.options):
        i = und[j]
        p = params[i]
        S2, nu2 = np.meshgrid(grid.axes[2 * i], grid.axes[2 * i + 1], indexing="ij")
        n_nodes = pricing.node_count(p, opt.maturity - times[-1], opt.strike, S2, nu2)
        nu_full = mesh[2 * i + 1]
        drift_diff = (p.kappaP * (p.thetaP - nu_full) - p.kappaQ * (p.thetaQ - nu_full)) / (2 * np.sqrt(nu_full))
        vp = p.xi * np.sqrt(nu_full)
        for k, t in enumerate(times):
            v2 = np.maximum(
                pricing.greeks_mesh(p, t, grid.axes[2 * i], grid.axes[2 * i + 1], opt.strike, opt.maturity, n_nodes).vega,
                VEGA_FLOOR,
            )
            expand = [None] * len(shape)
            expand[2 * i], expand[2 * i + 1] = slice(None), slice(None)
            v = np.broadcast_to(v2[tuple(expand)], shape)
            vega[k, ..., j] = v
            gvec[k, ..., j] = v * drift_diff
            rmat[k, ..., j, i] = vp / (2 * np.sqrt(nu_full)) * v
    hz = np.empty((K, *shape, N, 2))
    h1 = np.empty_like(hz)
    h2 = np.empty_like(hz)
    for s, side in enumerate(("bid", "ask")):
        ip = book.intensity(side)
        lam = np.array([x.lambdaMax for x in ip])
        al = np.array([x.alpha for x in ip])
        be = np.array([x.beta for x in ip])
        ev = quote_arrays(lam, al, be, vega, 0.0)
        hz[..., s], h1[..., s], h2[..., s] = ev.value, ev.firstDeriv, ev.secondDeriv
    return SourceFields(times, vega, gvec, rmat, hz, h1, h2, np.asarray(book.tradeSize, dtype=float))


def frozen_sources(
    grid: SpatialGrid,
    tradeSize,
    vega,
    g,
    r,
    h,
    h_prime,
    h_second,
    d: int = 1,
) -> SourceFields:
    """Spatially and temporally constant sources (one value per option, same on both sides)."""
    z = np.atleast_1d(np.asarray(tradeSize, float))
    N, shape = z.size, grid.shape

    def fill(x, extra=()):
        return np.broadcast_to(np.asarray(x, float), (1, *shape, N, *extra)).copy()

    R = np.zeros((1, *shape, N, d))
    R[..., 0] = np.asarray(r, float)
    two = lambda x: np.repeat(fill(x)[..., None], 2, axis=-1)  # noqa: E731
    return SourceFields(np.array([0.0]), fill(vega), fill(g), R, two(h), two(h_prime), two(h_second), z)


@dataclass(frozen=True)
class ThetaFields:
    """Stored time slices of the packed components ``[theta0, theta1 (N), theta2 (N*N)]``."""

    axes: tuple[np.ndarray, ...]
    times: np.ndarray
    data: np.ndarray  # (K, *grid, 1 + N + N*N)
    n: int
    gamma: float
    penalty_form: str = "riccati_full"
    clamp_counter: dict = field(default_factory=lambda: {"count": 0}, compare=False)

    @property
    def theta0(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def theta1(self) -> np.ndarray:
        return self.data[..., 1 : 1 + self.n]

    @property
    def theta2(self) -> np.ndarray:
        return self.data[..., 1 + self.n :].reshape(*self.data.shape[:-1], self.n, self.n)

    def slice_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        return i

    def interpolate(self, t: float, x: np.ndarray):
        """Multilinear interpolation in (t, *axes). ``x`` has shape (P, n_axes).

        Points outside the hull are clamped and counted in ``clamp_counter``.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        P = x.shape[0]
        coords = [np.full(P, float(t))] + [x[:, k] for k in range(x.shape[1])]
        axes = [self.times] + list(self.axes)
        idx, wts = [], []
        clamped = np.zeros(P, dtype=bool)
        for c, ax in zip(coords, axes):
            if ax.size == 1:
                idx.append(np.zeros(P, dtype=int))
                wts.append(None)
                continue
            cc = np.clip(c, ax[0], ax[-1])
            clamped |= cc != c
            i = np.clip(np.searchsorted(ax, cc, side="right") - 1, 0, ax.size - 2)
            idx.append(i)
            wts.append((cc - ax[i]) / (ax[i + 1] - ax[i]))
        n_clamped = int(clamped.sum())
        if n_clamped:
            self.clamp_counter["count"] += n_clamped
            log.warning("%d point(s) outside the theta grid hull were clamped", n_clamped)
        out = np.zeros((P, self.data.shape[-1]))
        live = [k for k, w in enumerate(wts) if w is not None]
        for corner in range(1 << len(live)):
            ix = list(idx)
            w = np.ones(P)
            for b, k in enumerate(live):
                if corner >> b & 1:
                    ix[k] = idx[k] + 1
                    w = w * wts[k]
                else:
                    w = w * (1 - wts[k])
            if not np.any(w):
                continue
            out += w[:, None] * self.data[tuple(ix)]
        N = self.n
        return out[:, 0], out[:, 1 : 1 + N], out[:, 1 + N :].reshape(P, N, N)


def _state_matrix(S, nu) -> np.ndarray:
    S = np.atleast_1d(np.asarray(S, float))
    nu = np.atleast_1d(np.asarray(nu, float))
    if S.ndim == 1 and nu.ndim == 1 and S.size == nu.size and S.size > 0:
        S, nu = S[None, :], nu[None, :]
    S, nu = np.atleast_2d(S), np.atleast_2d(nu)
    x = np.empty((S.shape[0], 2 * S.shape[1]))
    x[:, 0::2], x[:, 1::2] = S, nu
    return x


def value(fields: ThetaFields, t: float, S, nu, q):
    """``theta0 + q.theta1 - q.theta2.q`` at one state (``S``, ``nu`` of length d) or many (shape (P, d))."""
    th0, th1, th2 = fields.interpolate(t, _state_matrix(S, nu))
    q = np.atleast_2d(np.asarray(q, float))
    v = th0 + np.einsum("pn,pn->p", q, th1) - np.einsum("pn,pnm,pm->p", q, th2, q)
    return float(v[0]) if v.size == 1 else v


def quote_increments(fields: ThetaFields, book: BookSpec, t: float, x: np.ndarray, q: np.ndarray):
    """Hamiltonian arguments (p_bid, p_ask), each of shape (P, N), from the ansatz."""
    _, th1, th2 = fields.interpolate(t, x)
    q = np.atleast_2d(np.asarray(q, float))
    z = np.asarray(book.tradeSize, float)
    lin = th1 - 2 * np.einsum("pnm,pm->pn", th2, q)
    curv = z * np.diagonal(th2, axis1=1, axis2=2)
    return -lin + curv, lin + curv


def quote(
    fields: ThetaFields,
    book: BookSpec,
    params: Sequence[HestonJumpParams],
    t: float,
    S,
    nu,
    q,
    j: int,
    side: str,
):
    """Optimal spread and absolute quote for option ``j`` on ``side`` at a single state."""
    x = _state_matrix(S, nu)
    pb, pa = quote_increments(fields, book, t, x, q)
    p_arg = (pa if side == "ask" else pb)[0, j]
    opt = book.options[j]
    u = opt.underlying
    g = pricing.greeks(params[u], t, x[0, 2 * u], x[0, 2 * u + 1], opt.strike, opt.maturity)
    ip = book.intensity(side)[j]
    ev = quote_arrays(ip.lambdaMax, ip.alpha, ip.beta, float(g.vega), p_arg)
    delta = float(ev.argmax)
    price = float(g.price) + (delta if side == "ask" else -delta)
    return delta, price


def _rhs(U: np.ndarray, w: dict, N: int, z: np.ndarray, gamma: float, sigma_nu, fixed: dict):
    """Explicit (non-generator) right-hand side of the packed system."""
    shape = U.shape[:-1]
    th1 = fixed.get("theta1", U[..., 1 : 1 + N])
    th2 = fixed.get("theta2", U[..., 1 + N :].reshape(*shape, N, N))
    h0, h1, hs, h2 = w["h0"], w["h1"], w["hs"], w["h2"]
    out = np.empty_like(U)
    t2h2 = th2 * h2[..., None, :]
    out[..., 1 + N :] = (0.5 * gamma * w["P"] - 4.0 * np.einsum("...ij,...jk->...ik", t2h2, th2)).reshape(*shape, N * N)
    out[..., 1 : 1 + N] = w["G"] - np.einsum("...ij,...j->...i", th2, 2 * h1 + 4 * h2 * th1)
    diag = np.diagonal(th2, axis1=-2, axis2=-1)
    out[..., 0] = (h0 + h1 * th1 + hs * z * diag + h2 * th1 * th1).sum(-1)
    return out


def solve_theta(
    grid: SpatialGrid,
    sources: SourceFields,
    params: Sequence[HestonJumpParams],
    corr: CorrelationStructure,
    gamma: float,
    penalty_form: str = "riccati_full",
    save_every: int = 1,
    theta2_bound: float = 1e6,
    generator: bool = True,
    fixed_theta2: np.ndarray | None = None,
    fixed_theta1: np.ndarray | None = None,
) -> ThetaFields:
    """March all three components backward from the zero terminal slice.

    Douglas splitting: the full explicit update is followed by one implicit
    correction per axis; the Riccati and source terms stay explicit.
    ``fixed_theta2`` / ``fixed_theta1`` (full-resolution slices, ascending in
    time) replace the marched components inside the right-hand side.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if penalty_form not in PENALTY_FORMS:
        raise ValueError(f"penalty_form must be one of {PENALTY_FORMS}")
    if save_every < 1:
        raise ValueError("save_every must be >= 1")
    N = sources.n
    pf = 1.0 / N if penalty_form == "eq6_scaled" else 1.0
    gen = Generator(grid, params, corr) if generator else None
    sigma_nu = np.asarray(corr.sigmaNu, float)
    z = sources.tradeSize
    M, dt, tn = grid.n_steps, grid.dt, grid.tNodes
    U = np.zeros((*grid.shape, 1 + N + N * N))
    saved_t, saved = [tn[M]], [U.copy()]
    for n in range(M, 0, -1):
        t = tn[n]
        fixed = {}
        if fixed_theta2 is not None:
            fixed["theta2"] = fixed_theta2[n]
        if fixed_theta1 is not None:
            fixed["theta1"] = fixed_theta1[n]
        F = _rhs(U, sources.weights(t, sigma_nu, pf), N, z, gamma, sigma_nu, fixed)
        U = gen.douglas_step(U, F, dt) if gen is not None else U + dt * F
        th2 = U[..., 1 + N :].reshape(*grid.shape, N, N)
        th2 = 0.5 * (th2 + np.swapaxes(th2, -1, -2))
        U[..., 1 + N :] = th2.reshape(*grid.shape, N * N)
        if not np.all(np.isfinite(U)):
            raise SolverError(f"non-finite value at t={tn[n - 1]:.6g}")
        big = np.abs(th2).max()
        if big > theta2_bound:
            raise SolverError(f"theta2 reached {big:.3e} > bound {theta2_bound:.3e} at t={tn[n - 1]:.6g}; reduce the time step")
        if (n - 1) % save_every == 0:
            saved_t.append(tn[n - 1])
            saved.append(U.copy())
    order = np.argsort(saved_t)
    return ThetaFields(
        axes=grid.axes,
        times=np.asarray(saved_t)[order],
        data=np.stack([saved[i] for i in order]),
        n=N,
        gamma=float(gamma),
        penalty_form=penalty_form,
    )


def solve_theta2(grid, sources, gamma, corr, params, **kw) -> np.ndarray:
    """theta2 at every time step, shape (n_steps + 1, *grid, N, N)."""
    return solve_theta(grid, sources, params, corr, gamma, save_every=1, **kw).theta2


def solve_theta1(grid, sources, theta2, corr, params, **kw) -> np.ndarray:
    """theta1 given full-resolution theta2 slices."""
    return solve_theta(grid, sources, params, corr, 0.0, save_every=1, fixed_theta2=theta2, **kw).theta1


def solve_theta0(grid, sources, theta1, theta2, corr, params, **kw) -> np.ndarray:
    """theta0 given full-resolution theta1 and theta2 slices."""
    return solve_theta(
        grid, sources, params, corr, 0.0, save_every=1, fixed_theta2=theta2, fixed_theta1=theta1, **kw
    ).theta0


def _hjb_defect(
    grid: SpatialGrid,
    params,
    corr,
    packed: np.ndarray,
    w: dict,
    z: np.ndarray,
    gamma: float,
    qs: np.ndarray,
    generator: bool,
):
    """Everything but the time derivative of the expanded HJB, per sampled q: shape (Q, *grid)."""
    N = z.size
    Lp = apply_generator(grid, params, corr, packed, order=4) if generator else np.zeros_like(packed)
    th1 = packed[..., 1 : 1 + N]
    th2 = packed[..., 1 + N :].reshape(*packed.shape[:-1], N, N)
    L2 = Lp[..., 1 + N :].reshape(th2.shape)
    out = []
    for q in qs:
        Lu = Lp[..., 0] + Lp[..., 1 : 1 + N] @ q - np.einsum("i,...ij,j->...", q, L2, q)
        du = th1 - 2 * th2 @ q
        duu = -2 * np.diagonal(th2, axis1=-2, axis2=-1)
        ham = (w["h0"] + w["h1"] * du + w["hs"] * (-0.5 * z * duu) + w["h2"] * du * du).sum(-1)
        out.append(Lu + w["G"] @ q - 0.5 * gamma * np.einsum("i,...ij,j->...", q, w["P"], q) + ham)
    return np.stack(out)


def _ansatz(packed: np.ndarray, q: np.ndarray, N: int) -> np.ndarray:
    th2 = packed[..., 1 + N :].reshape(*packed.shape[:-1], N, N)
    return packed[..., 0] + packed[..., 1 : 1 + N] @ q - np.einsum("i,...ij,j->...", q, th2, q)


def probe_mask(grid: SpatialGrid, params, box: dict | None = None) -> np.ndarray:
    """Nodes at least two steps from every boundary and inside the probe box."""
    box = box or {"s_rel": (0.9, 1.1), "nu": (0.02, 0.08)}
    m = np.ones(grid.shape, dtype=bool)
    mesh = grid.mesh()
    for k, ax in enumerate(grid.axes):
        if ax.size == 1:
            continue
        idx = np.arange(ax.size)
        inner = (idx >= 2) & (idx <= ax.size - 3)
        shape = [1] * len(grid.shape)
        shape[k] = ax.size
        m &= inner.reshape(shape)
        i = k // 2
        if k % 2 == 0:
            lo, hi = box["s_rel"][0] * params[i].s0, box["s_rel"][1] * params[i].s0
        else:
            lo, hi = box["nu"]
        m &= (mesh[k] >= lo - 1e-12) & (mesh[k] <= hi + 1e-12)
    return m


def residual_check(
    fields: ThetaFields,
    grid: SpatialGrid,
    sources: SourceFields,
    gamma: float,
    params,
    corr,
    q_samples,
    box: dict | None = None,
    generator: bool = True,
    relative: bool = False,
) -> float:
    """Max defect of the expanded HJB with the ansatz plugged in.

    Evaluated at the midpoint of every pair of consecutive stored slices: the
    time derivative is the slice difference, all other terms are the average
    of their values on the two slices. Spatial derivatives use fourth-order
    stencils on the probe nodes. With ``relative`` the defect is divided by
    the largest magnitude of the time-derivative term.
    """
    N = fields.n
    pf = 1.0 / N if fields.penalty_form == "eq6_scaled" else 1.0
    qs = np.atleast_2d(np.asarray(q_samples, float))
    z = sources.tradeSize
    sigma_nu = np.asarray(corr.sigmaNu, float)
    mask = probe_mask(grid, params, box)
    worst, scale = 0.0, 0.0
    prev = None
    for k in range(fields.times.size - 1):
        t0, t1 = fields.times[k], fields.times[k + 1]
        if prev is None:
            prev = _hjb_defect(grid, params, corr, fields.data[k], sources.weights(t0, sigma_nu, pf), z, gamma, qs, generator)
        cur = _hjb_defect(grid, params, corr, fields.data[k + 1], sources.weights(t1, sigma_nu, pf), z, gamma, qs, generator)
        dudt = np.stack([(_ansatz(fields.data[k + 1], q, N) - _ansatz(fields.data[k], q, N)) / (t1 - t0) for q in qs])
        res = dudt + 0.5 * (prev + cur)
        worst = max(worst, float(np.abs(res[:, mask]).max()))
        scale = max(scale, float(np.abs(dudt[:, mask]).max()))
        prev = cur
    if relative:
        return worst / scale if scale > 0 else worst
    return worst
