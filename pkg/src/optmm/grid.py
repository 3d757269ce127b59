"""Tensor-product (S, nu) grids, the diffusion generator on them, and the implicit line solves.

Axes are ordered ``(S_1, nu_1, S_2, nu_2, ...)``. A spot axis with a single
node is *frozen*: every spot derivative and the jump term vanish on it.
Fields carry arbitrary trailing component dimensions, flattened to one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import CorrelationStructure, HestonJumpParams


@dataclass(frozen=True)
class SpatialGrid:
    axes: tuple[np.ndarray, ...]
    horizon: float
    n_steps: int

    def __post_init__(self):
        if len(self.axes) % 2 or not self.axes:
            raise ValueError("axes must come in (S, nu) pairs")
        for k, ax in enumerate(self.axes):
            ax = np.asarray(ax, dtype=float)
            frozen_s = k % 2 == 0 and ax.size == 1
            if ax.ndim != 1 or (ax.size < 3 and not frozen_s):
                raise ValueError(f"axis {k} needs at least 3 nodes")
            if np.any(np.diff(ax) <= 0):
                raise ValueError(f"axis {k} must be strictly increasing")
            if k % 2 == 1 and ax[0] <= 0:
                raise ValueError("variance nodes must be strictly positive")
        if self.n_steps < 1 or not self.horizon > 0:
            raise ValueError("need a positive horizon and at least one time step")

    @classmethod
    def build(
        cls,
        params: Sequence[HestonJumpParams],
        horizon: float,
        n_s: int = 60,
        n_nu: int = 40,
        n_steps: int = 200,
        s_width: float = 0.2,
        nu_min: float = 0.005,
        nu_max: float = 0.15,
        freeze_spot: bool = False,
    ) -> "SpatialGrid":
        axes = []
        for p in params:
            if freeze_spot:
                axes.append(np.array([p.s0]))
            else:
                axes.append(np.linspace((1 - s_width) * p.s0, (1 + s_width) * p.s0, n_s))
            axes.append(np.linspace(nu_min, nu_max, n_nu))
        g = cls(tuple(axes), float(horizon), int(n_steps))
        g.check_contains(params)
        return g

    def check_contains(self, params: Sequence[HestonJumpParams]) -> None:
        for i, p in enumerate(params):
            s_ax, n_ax = self.axes[2 * i], self.axes[2 * i + 1]
            if s_ax.size > 1 and not (s_ax[0] < p.s0 < s_ax[-1]):
                raise ValueError(f"s0 of underlying {i} outside the spot axis")
            if not (n_ax[0] < p.nu0 < n_ax[-1]):
                raise ValueError(f"nu0 of underlying {i} outside the variance axis")

    @property
    def d(self) -> int:
        return len(self.axes) // 2

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.size for a in self.axes)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def tNodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def sNodes(self, i: int = 0) -> np.ndarray:
        return self.axes[2 * i]

    def nuNodes(self, i: int = 0) -> np.ndarray:
        return self.axes[2 * i + 1]

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes, indexing="ij")

    def refined(self) -> "SpatialGrid":
        """Halve every spacing (coarse nodes are kept) and the time step."""
        axes = []
        for ax in self.axes:
            if ax.size == 1:
                axes.append(ax)
                continue
            fine = np.empty(2 * ax.size - 1)
            fine[::2] = ax
            fine[1::2] = 0.5 * (ax[:-1] + ax[1:])
            axes.append(fine)
        return SpatialGrid(tuple(axes), self.horizon, 2 * self.n_steps)


def _three_point(x: np.ndarray):
    """Weights (lower, centre, upper) of first and second derivatives on a 1-d axis.

    Interior nodes use central three-point formulas (valid on non-uniform
    axes). Boundary nodes use a one-sided first difference and a zero second
    derivative.
    """
    n = x.size
    d1 = np.zeros((3, n))
    d2 = np.zeros((3, n))
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    d1[0, 1:-1] = -hp / (hm * (hm + hp))
    d1[1, 1:-1] = (hp - hm) / (hm * hp)
    d1[2, 1:-1] = hm / (hp * (hm + hp))
    d2[0, 1:-1] = 2.0 / (hm * (hm + hp))
    d2[1, 1:-1] = -2.0 / (hm * hp)
    d2[2, 1:-1] = 2.0 / (hp * (hm + hp))
    h0, h1 = x[1] - x[0], x[-1] - x[-2]
    d1[1, 0], d1[2, 0] = -1.0 / h0, 1.0 / h0
    d1[0, -1], d1[1, -1] = -1.0 / h1, 1.0 / h1
    return d1, d2


def _expand(a: np.ndarray, axis: int, ndim: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = a.size
    return a.reshape(shape)


def _shift(f: np.ndarray, axis: int, k: int) -> np.ndarray:
    """f[i + k] along ``axis`` with zero padding (padding never carries weight)."""
    out = np.zeros_like(f)
    src = [slice(None)] * f.ndim
    dst = [slice(None)] * f.ndim
    if k > 0:
        src[axis], dst[axis] = slice(k, None), slice(None, -k)
    else:
        src[axis], dst[axis] = slice(None, k), slice(-k, None)
    out[tuple(dst)] = f[tuple(src)]
    return out


def apply_tridiag(w: np.ndarray, f: np.ndarray, axis: int) -> np.ndarray:
    """Apply a three-point stencil ``w`` (shape (3, *grid)) along ``axis`` of ``f`` (shape (*grid, F))."""
    w = w[..., None]
    return w[0] * _shift(f, axis, -1) + w[1] * f + w[2] * _shift(f, axis, 1)


class Generator:
    """Diffusion-plus-jump generator under P, discretised on a :class:`SpatialGrid`.

    The operator is split into one tridiagonal part per non-frozen axis
    (drift and diffusion along that axis, treated implicitly) and an explicit
    remainder (mixed derivatives and jumps).
    """

    def __init__(self, grid: SpatialGrid, params: Sequence[HestonJumpParams], corr: CorrelationStructure):
        if len(params) != grid.d:
            raise ValueError("one parameter set per underlying is required")
        self.grid, self.params, self.corr = grid, list(params), corr
        shape, nd = grid.shape, len(grid.shape)
        co = generator_coefficients(grid, params, corr)
        self.axis_ops: dict[int, np.ndarray] = {}
        self.d1: dict[int, np.ndarray] = {}
        for k, (drift, diff) in co["axes"].items():
            d1, d2 = _three_point(grid.axes[k])
            d1e = np.stack([np.broadcast_to(_expand(d1[m], k, nd), shape) for m in range(3)])
            d2e = np.stack([np.broadcast_to(_expand(d2[m], k, nd), shape) for m in range(3)])
            self.d1[k] = d1e
            self.axis_ops[k] = drift * d1e + diff * d2e
        self.mixed: list[tuple[int, int, np.ndarray]] = co["mixed"]
        self._jumps = [(k, rate, _shift_weights(grid.axes[k], size)) for k, rate, size in co["jumps"]]
        self._factor_cache: dict[float, dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]] = {}

    # explicit pieces --------------------------------------------------------
    def apply_axis(self, k: int, f: np.ndarray) -> np.ndarray:
        return apply_tridiag(self.axis_ops[k], f, k)

    def apply_explicit(self, f: np.ndarray) -> np.ndarray:
        out = np.zeros_like(f)
        for a, b, c in self.mixed:
            g = apply_tridiag(self.d1[a], f, a)
            g = apply_tridiag(self.d1[b], g, b)
            # zero at boundary nodes of either axis
            g = _zero_boundary(g, a)
            g = _zero_boundary(g, b)
            out += c[..., None] * g
        for k, rate, (idx, w) in self._jumps:
            shifted = np.take(f, idx, axis=k) * _expand(1 - w, k, f.ndim) + np.take(f, idx + 1, axis=k) * _expand(w, k, f.ndim)
            out += rate * (shifted - f)
        return out

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Full generator applied to ``f`` of shape ``(*grid.shape, F)``."""
        out = self.apply_explicit(f)
        for k in self.axis_ops:
            out += self.apply_axis(k, f)
        return out

    # implicit line solves ---------------------------------------------------
    def _factors(self, dt: float):
        if dt not in self._factor_cache:
            fac = {}
            for k, op in self.axis_ops.items():
                a = -dt * np.moveaxis(op[0], k, 0)
                b = 1.0 - dt * np.moveaxis(op[1], k, 0)
                c = -dt * np.moveaxis(op[2], k, 0)
                n = b.shape[0]
                cp = np.empty_like(b)
                den = np.empty_like(b)
                den[0] = b[0]
                cp[0] = c[0] / den[0]
                for i in range(1, n):
                    den[i] = b[i] - a[i] * cp[i - 1]
                    cp[i] = c[i] / den[i]
                fac[k] = (a, cp, den)
            self._factor_cache[dt] = fac
        return self._factor_cache[dt]

    def solve_axis(self, k: int, rhs: np.ndarray, dt: float) -> np.ndarray:
        """Solve ``(I - dt * A_k) y = rhs`` along axis ``k`` (Thomas algorithm over all lines)."""
        a, cp, den = self._factors(dt)[k]
        r = np.moveaxis(rhs, k, 0)
        y = np.empty_like(r)
        a, cp, den = a[..., None], cp[..., None], den[..., None]
        y[0] = r[0] / den[0]
        for i in range(1, r.shape[0]):
            y[i] = (r[i] - a[i] * y[i - 1]) / den[i]
        for i in range(r.shape[0] - 2, -1, -1):
            y[i] -= cp[i] * y[i + 1]
        return np.moveaxis(y, 0, k)

    def douglas_step(self, u: np.ndarray, explicit_rhs: np.ndarray, dt: float) -> np.ndarray:
        """One backward step: explicit in the mixed/jump/source terms, implicit per axis."""
        y = u + dt * (self.apply(u) + explicit_rhs)
        for k in self.axis_ops:
            y = self.solve_axis(k, y - dt * self.apply_axis(k, u), dt)
        return y


def generator_coefficients(grid: SpatialGrid, params: Sequence[HestonJumpParams], corr: CorrelationStructure) -> dict:
    """Node-wise generator coefficients.

    Returns ``axes`` (axis -> (drift, half squared vol)) for non-frozen axes,
    ``mixed`` (a, b, coefficient of the cross derivative) and ``jumps``
    (spot axis, rate * probability, mark size).
    """
    if len(params) != grid.d:
        raise ValueError("one parameter set per underlying is required")
    mesh = grid.mesh()
    axes, vol = {}, {}
    for i, p in enumerate(params):
        ks, kn = 2 * i, 2 * i + 1
        S, nu = mesh[ks], np.maximum(mesh[kn], 0.0)
        comp = p.jump.rate * p.jump.mean_size if p.jump.compensated else 0.0
        vol[ks] = S * np.sqrt(nu)
        vol[kn] = p.xi * np.sqrt(nu)
        if grid.axes[ks].size > 1:
            axes[ks] = (p.mu * S - comp, 0.5 * S * S * nu)
        axes[kn] = (p.kappaP * (p.thetaP - nu), 0.5 * p.xi**2 * nu)
    mixed = []
    for i, p in enumerate(params):
        if 2 * i in axes and p.rho != 0.0:
            mixed.append((2 * i, 2 * i + 1, p.rho * vol[2 * i] * vol[2 * i + 1]))
    for i in range(grid.d):
        for k in range(i + 1, grid.d):
            for off, m in ((0, corr.sigmaS), (1, corr.sigmaNu)):
                a, b = 2 * i + off, 2 * k + off
                c = float(np.asarray(m)[i, k])
                if c != 0.0 and a in axes and b in axes:
                    mixed.append((a, b, c * vol[a] * vol[b]))
    jumps = []
    for i, p in enumerate(params):
        if p.jump.rate > 0 and grid.axes[2 * i].size > 1:
            for size, prob in p.jump.marks:
                if prob > 0 and size != 0:
                    jumps.append((2 * i, p.jump.rate * prob, float(size)))
    return {"axes": axes, "mixed": mixed, "jumps": jumps}


def _d4(f: np.ndarray, axis: int, h: float, order: int) -> np.ndarray:
    """Fourth-order central first/second derivative; the two outermost nodes are left at zero."""
    m2, m1, p1, p2 = (_shift(f, axis, k) for k in (-2, -1, 1, 2))
    if order == 1:
        out = (m2 - 8 * m1 + 8 * p1 - p2) / (12 * h)
    else:
        out = (-m2 + 16 * m1 - 30 * f + 16 * p1 - p2) / (12 * h * h)
    for k in (0, 1, -2, -1):
        idx = [slice(None)] * f.ndim
        idx[axis] = k
        out[tuple(idx)] = 0.0
    return out


def apply_generator(
    grid: SpatialGrid,
    params: Sequence[HestonJumpParams],
    corr: CorrelationStructure,
    field: np.ndarray,
    order: int = 2,
) -> np.ndarray:
    """Apply the P-generator to ``field`` (shape ``grid.shape`` or ``grid.shape + (F,)``).

    ``order=2`` is the solver's stencil, including boundary rows.
    ``order=4`` needs uniform axes and is only meaningful two nodes away
    from every boundary; it is used to probe residuals.
    """
    f = np.asarray(field, dtype=float)
    scalar = f.shape == grid.shape
    if scalar:
        f = f[..., None]
    if order == 2:
        out = Generator(grid, params, corr).apply(f)
    elif order == 4:
        co = generator_coefficients(grid, params, corr)
        h = {}
        for k in co["axes"]:
            dx = np.diff(grid.axes[k])
            if not np.allclose(dx, dx[0], rtol=1e-9, atol=0):
                raise ValueError("fourth-order stencils need uniform axes")
            h[k] = dx[0]
        out = np.zeros_like(f)
        for k, (drift, diff) in co["axes"].items():
            out += drift[..., None] * _d4(f, k, h[k], 1) + diff[..., None] * _d4(f, k, h[k], 2)
        for a, b, c in co["mixed"]:
            out += c[..., None] * _d4(_d4(f, a, h[a], 1), b, h[b], 1)
        for k, rate, size in co["jumps"]:
            idx, w = _shift_weights(grid.axes[k], size)
            shifted = np.take(f, idx, axis=k) * _expand(1 - w, k, f.ndim) + np.take(f, idx + 1, axis=k) * _expand(w, k, f.ndim)
            out += rate * (shifted - f)
    else:
        raise ValueError("order must be 2 or 4")
    return out[..., 0] if scalar else out


def _zero_boundary(g: np.ndarray, axis: int) -> np.ndarray:
    idx = [slice(None)] * g.ndim
    idx[axis] = 0
    g[tuple(idx)] = 0.0
    idx[axis] = -1
    g[tuple(idx)] = 0.0
    return g


def _shift_weights(ax: np.ndarray, size: float):
    """Left index and weight for linear interpolation/extrapolation of f(x + size) on ``ax``."""
    x = ax + size
    idx = np.clip(np.searchsorted(ax, x, side="right") - 1, 0, ax.size - 2)
    w = (x - ax[idx]) / (ax[idx + 1] - ax[idx])
    return idx, w
