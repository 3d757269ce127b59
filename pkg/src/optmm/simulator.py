"""Monte Carlo market-making experiment with common random numbers.

All strategies run in lockstep on the same market path: the spot/variance
shocks, the RFQ arrival uniforms and the acceptance uniforms are shared, so
any PnL difference comes from the quotes alone. Every path owns independent
random streams derived from the root seed and its own index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import baseline as bl
from . import pricing
from . import theta as th
from .hamiltonian import HamiltonianError, quote_arrays
from .model import BookSpec, CorrelationStructure, HestonJumpParams, full_correlation

VEGA_FLOOR = 1e-8
THINNING_GUARD = 0.05
_STREAMS = ("diffusion", "rfq_arrival", "rfq_accept", "jumps")


@dataclass(frozen=True)
class SimConfig:
    nPaths: int = 100
    stepsPerDay: int = 2000
    horizon: float = 0.004
    seed: int = 12345
    strategy: str = "both"
    n_buckets: int = 20
    vega_paths: int = 2
    vega_every: int = 20
    chunk: int = 250
    gamma: float = 2e-5

    def __post_init__(self):
        if self.nPaths < 1 or self.stepsPerDay < 1:
            raise ValueError("nPaths and stepsPerDay must be positive")
        if self.strategy not in ("both", "theta", "baseline"):
            raise ValueError("strategy must be 'both', 'theta' or 'baseline'")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.stepsPerDay


@dataclass
class PathState:
    q: np.ndarray  # (P, N) contracts
    cash: np.ndarray  # (P,)
    hedge: np.ndarray  # (P, d) shares

    @classmethod
    def flat(cls, P: int, N: int, d: int) -> "PathState":
        return cls(np.zeros((P, N)), np.zeros(P), np.zeros((P, d)))

    def mtm(self, S: np.ndarray, prices: np.ndarray) -> np.ndarray:
        return self.cash + (self.hedge * S).sum(-1) + (self.q * prices).sum(-1)


@dataclass
class SimReport:
    strategy: str
    perRequestPnl: list  # rows (bucket_start, bucket_end, mean, stderr, n_requests)
    pnlCdf: np.ndarray  # (P, 2): sorted terminal PnL, empirical cdf
    vegaTrajectories: list  # rows (path, option, t, vega)
    tradeCount: np.ndarray  # (N, 2): bid fills, ask fills
    objectiveEstimate: float
    terminalPnl: np.ndarray
    requestCount: np.ndarray  # (N, 2): bid / ask candidates
    trades: list = field(default_factory=list)  # rows (path, t, option, side, size, delta_quote)


class QuotingStrategy:
    """Base class; subclasses return Hamiltonian arguments and the logit Vega."""

    name = "strategy"
    trades = True

    def increments(self, t, S, nu, q):
        raise NotImplementedError

    def logit_vega(self, vega_now):
        return vega_now


class ThetaStrategy(QuotingStrategy):
    name = "theta"

    def __init__(self, fields: th.ThetaFields, book: BookSpec):
        self.fields, self.book = fields, book

    def increments(self, t, S, nu, q):
        x = np.empty((S.shape[0], 2 * S.shape[1]))
        x[:, 0::2], x[:, 1::2] = S, nu
        return th.quote_increments(self.fields, self.book, t, x, q)


class BaselineStrategy(QuotingStrategy):
    """Constant-Vega strategy; it tracks only the portfolio Vega built from day-start Vegas."""

    name = "baseline"

    def __init__(self, fields: bl.BaselineFields, underlying: int = 0):
        self.fields, self.underlying = fields, underlying

    def increments(self, t, S, nu, q):
        V = q @ self.fields.grid.frozenVegas
        return bl.quote_increments(self.fields, t, nu[:, self.underlying], V)

    def logit_vega(self, vega_now):
        return np.broadcast_to(self.fields.grid.frozenVegas, vega_now.shape)


class IdleStrategy(QuotingStrategy):
    """Never fills; used to check that a flat book earns exactly nothing."""

    name = "idle"
    trades = False

    def increments(self, t, S, nu, q):
        return np.zeros_like(q), np.zeros_like(q)


def path_streams(seed: int, n_paths: int) -> list[dict[str, np.random.Generator]]:
    """Independent generators per path and purpose, a pure function of (seed, path index)."""
    out = []
    for i in range(n_paths):
        ss = np.random.SeedSequence(seed, spawn_key=(i,))
        out.append({name: np.random.Generator(np.random.PCG64(c)) for name, c in zip(_STREAMS, ss.spawn(len(_STREAMS)))})
    return out


def simulate_underlying(
    params: Sequence[HestonJumpParams],
    chol: np.ndarray,
    S: np.ndarray,
    nu: np.ndarray,
    dt: float,
    normals: np.ndarray,
    jumps: np.ndarray | None = None,
):
    """One Euler step under P with full truncation. ``normals`` is (P, 2d), independent.

    ``chol`` is the Cholesky factor of the joint correlation ordered
    (spots, variances). ``jumps`` holds summed jump sizes (P, d).
    """
    d = S.shape[1]
    w = normals @ chol.T * np.sqrt(dt)
    Sn, nun = np.empty_like(S), np.empty_like(nu)
    for i, p in enumerate(params):
        vp = np.maximum(nu[:, i], 0.0)
        sq = np.sqrt(vp)
        comp = p.jump.rate * p.jump.mean_size if p.jump.compensated else 0.0
        Sn[:, i] = S[:, i] + (p.mu * S[:, i] - comp) * dt + S[:, i] * sq * w[:, i]
        nun[:, i] = nu[:, i] + p.kappaP * (p.thetaP - vp) * dt + p.xi * sq * w[:, d + i]
    if jumps is not None:
        Sn += jumps
    return Sn, nun


def jump_draws(rng: np.random.Generator, params: Sequence[HestonJumpParams], dt: float, n_steps: int):
    """Per-step jump counts and summed jump sizes, both shaped (n_steps, d)."""
    d = len(params)
    counts = np.zeros((n_steps, d), dtype=np.int64)
    sums = np.zeros((n_steps, d))
    for i, p in enumerate(params):
        if p.jump.rate > 0:
            counts[:, i] = rng.poisson(p.jump.rate * dt, size=n_steps)
            for step in np.nonzero(counts[:, i])[0]:
                sums[step, i] = rng.choice(p.jump.sizes, size=counts[step, i], p=p.jump.probs).sum()
    return counts, sums


def rfq_step(u_arrival, u_accept, lam_bid_dt, lam_ask_dt, fill_bid, fill_ask):
    """Candidate requests and fills for one step.

    A single uniform per option decides between a bid request (``u <
    lam_bid_dt``), an ask request (next ``lam_ask_dt`` of mass) or nothing.
    A second uniform accepts the request with the quoted fill probability.
    """
    cand_bid = u_arrival < lam_bid_dt
    cand_ask = (u_arrival >= lam_bid_dt) & (u_arrival < lam_bid_dt + lam_ask_dt)
    return cand_bid, cand_ask, cand_bid & (u_accept < fill_bid), cand_ask & (u_accept < fill_ask)


def accounting_step(state: PathState, book: BookSpec, filled_bid, filled_ask, delta_bid, delta_ask, prices, deltas, S):
    """Apply fills at mid -/+ spread, then rebalance the spot hedge to minus the book delta."""
    z = np.asarray(book.tradeSize, float)
    q = state.q + z * filled_bid - z * filled_ask
    cash = state.cash - (z * filled_bid * (prices - delta_bid)).sum(-1) + (z * filled_ask * (prices + delta_ask)).sum(-1)
    und = book.underlying_index()
    d = state.hedge.shape[1]
    target = np.zeros_like(state.hedge)
    for i in range(d):
        target[:, i] = -(q[:, und == i] * deltas[:, und == i]).sum(-1)
    cash = cash - ((target - state.hedge) * S).sum(-1)
    return PathState(q, cash, target)


def _book_greeks(params, book, n_nodes, t, S, nu):
    P, N = S.shape[0], book.n
    price, delta, vega = np.empty((P, N)), np.empty((P, N)), np.empty((P, N))
    for j, o in enumerate(book.options):
        u = o.underlying
        g = pricing.greeks(params[u], t, S[:, u], nu[:, u], o.strike, o.maturity, n_nodes=n_nodes[j])
        price[:, j], delta[:, j], vega[:, j] = g.price, g.delta, g.vega
    return price, delta, vega


def _bucket_rows(mtm_pre: np.ndarray, requests: np.ndarray, edges: np.ndarray, tn: np.ndarray):
    """Ratio estimator of PnL per request per bucket with a delta-method standard error."""
    rows = []
    P = mtm_pre.shape[1]
    for a, b in zip(edges[:-1], edges[1:]):
        X = mtm_pre[b] - mtm_pre[a]
        Y = requests[a:b].sum(0).astype(float)
        ybar = Y.mean()
        if ybar == 0:
            rows.append((tn[a], tn[b], float("nan"), float("nan"), 0))
            continue
        r = X.sum() / Y.sum()
        se = np.sqrt(((X - r * Y) ** 2).sum() / max(P * (P - 1), 1)) / ybar
        rows.append((tn[a], tn[b], float(r), float(se), int(Y.sum())))
    return rows


def run_experiment(
    params: Sequence[HestonJumpParams],
    corr: CorrelationStructure,
    book: BookSpec,
    strategies: Sequence[QuotingStrategy],
    cfg: SimConfig,
    record_trades: bool = True,
) -> dict[str, SimReport]:
    params = list(params)
    d, N, P, M, dt = len(params), book.n, cfg.nPaths, cfg.stepsPerDay, cfg.dt
    names = [s.name for s in strategies]
    if len(set(names)) != len(names):
        raise ValueError("strategy names must be unique")
    if any(o.maturity <= cfg.horizon for o in book.options):
        raise ValueError("every option must mature after the simulation horizon")
    lam_b = np.array([ip.lambdaMax for ip in book.intensityBid])
    lam_a = np.array([ip.lambdaMax for ip in book.intensityAsk])
    if max(lam_b.max(), lam_a.max()) * dt > THINNING_GUARD:
        raise ValueError(f"stepsPerDay too small: max lambda*dt exceeds {THINNING_GUARD}")
    al_b = np.array([ip.alpha for ip in book.intensityBid])
    al_a = np.array([ip.alpha for ip in book.intensityAsk])
    be_b = np.array([ip.beta for ip in book.intensityBid])
    be_a = np.array([ip.beta for ip in book.intensityAsk])
    chol = np.linalg.cholesky(full_correlation(params, corr) + 1e-14 * np.eye(2 * d))
    und = book.underlying_index()
    n_nodes = []
    for o in book.options:
        p = params[o.underlying]
        Sr = np.array([0.7 * p.s0, 1.3 * p.s0])
        n_nodes.append(pricing.node_count(p, o.maturity - cfg.horizon, o.strike, Sr, np.array([0.0, 0.3])))
    streams = path_streams(cfg.seed, P)
    tn = np.linspace(0.0, cfg.horizon, M + 1)

    S = np.tile([p.s0 for p in params], (P, 1)).astype(float)
    nu = np.tile([p.nu0 for p in params], (P, 1)).astype(float)
    states = {s.name: PathState.flat(P, N, d) for s in strategies}
    mtm_pre = {s.name: np.zeros((M + 1, P)) for s in strategies}
    penalty = {s.name: np.zeros(P) for s in strategies}
    fills = {s.name: np.zeros((N, 2), dtype=np.int64) for s in strategies}
    trades = {s.name: [] for s in strategies}
    requests = np.zeros((M, P), dtype=np.int64)
    req_count = np.zeros((N, 2), dtype=np.int64)
    vega_rows = []
    sigma_nu = np.asarray(corr.sigmaNu, float)
    xi = np.array([p.xi for p in params])

    for c0 in range(0, M, cfg.chunk):
        c1 = min(M, c0 + cfg.chunk)
        C = c1 - c0
        Z = np.stack([s["diffusion"].standard_normal((C, 2 * d)) for s in streams], axis=1)
        UA = np.stack([s["rfq_arrival"].random((C, N)) for s in streams], axis=1)
        UC = np.stack([s["rfq_accept"].random((C, N)) for s in streams], axis=1)
        J = None
        if any(p.jump.rate > 0 for p in params):
            J = np.stack([jump_draws(s["jumps"], params, dt, C)[1] for s in streams], axis=1)
        for m in range(C):
            n = c0 + m
            t = tn[n]
            price, delta, vega = _book_greeks(params, book, n_nodes, t, S, nu)
            vega = np.maximum(vega, VEGA_FLOOR)
            if n % cfg.vega_every == 0:
                for path in range(min(cfg.vega_paths, P)):
                    vega_rows.extend((path, j, t, float(vega[path, j])) for j in range(N))
            cand_b, cand_a, _, _ = rfq_step(UA[m], UC[m], lam_b * dt, lam_a * dt, 0.0, 0.0)
            requests[n] = cand_b.sum(-1) + cand_a.sum(-1)
            req_count[:, 0] += cand_b.sum(0)
            req_count[:, 1] += cand_a.sum(0)
            for strat in strategies:
                st = states[strat.name]
                mtm_pre[strat.name][n] = st.mtm(S, price)
                if strat.trades:
                    pb, pa = strat.increments(t, S, nu, st.q)
                    lv = strat.logit_vega(vega)
                    try:
                        db = quote_arrays(lam_b, al_b, be_b, lv, pb).argmax
                        da = quote_arrays(lam_a, al_a, be_a, lv, pa).argmax
                    except (HamiltonianError, ValueError) as exc:
                        bad = ~np.isfinite(pb).all(-1) | ~np.isfinite(pa).all(-1)
                        where = f"paths {np.nonzero(bad)[0].tolist()}" if bad.any() else "see cause"
                        raise HamiltonianError(f"{strat.name} quote failed at t={t:.6g} ({where}): {exc}") from exc
                    fb_prob = expit(-(al_b + be_b * db / vega))
                    fa_prob = expit(-(al_a + be_a * da / vega))
                    _, _, fb, fa = rfq_step(UA[m], UC[m], lam_b * dt, lam_a * dt, fb_prob, fa_prob)
                    assert not np.any(fb & fa), "simultaneous bid and ask fill"
                else:
                    db = da = np.zeros((P, N))
                    fb = fa = np.zeros((P, N), dtype=bool)
                st = accounting_step(st, book, fb, fa, db, da, price, delta, S)
                states[strat.name] = st
                fills[strat.name][:, 0] += fb.sum(0)
                fills[strat.name][:, 1] += fa.sum(0)
                if record_trades and (fb.any() or fa.any()):
                    for side, f, dq in (("bid", fb, db), ("ask", fa, da)):
                        for path, j in zip(*np.nonzero(f)):
                            trades[strat.name].append((int(path), t, int(j), side, float(book.tradeSize[j]), float(dq[path, j])))
                gam = np.zeros((P, d))
                for i in range(d):
                    gam[:, i] = 0.5 * xi[i] * (st.q[:, und == i] * vega[:, und == i]).sum(-1)
                penalty[strat.name] += 0.5 * cfg.gamma * np.einsum("pi,ij,pj->p", gam, sigma_nu, gam) * dt
            S, nu = simulate_underlying(params, chol, S, nu, dt, Z[m], None if J is None else J[m])

    price, _, vega = _book_greeks(params, book, n_nodes, tn[M], S, nu)
    if cfg.vega_every and M % cfg.vega_every == 0:
        for path in range(min(cfg.vega_paths, P)):
            vega_rows.extend((path, j, tn[M], float(vega[path, j])) for j in range(N))
    edges = np.linspace(0, M, cfg.n_buckets + 1).round().astype(int)
    reports = {}
    for strat in strategies:
        name = strat.name
        mtm_pre[name][M] = states[name].mtm(S, price)
        final = mtm_pre[name][M]
        srt = np.sort(final)
        reports[name] = SimReport(
            strategy=name,
            perRequestPnl=_bucket_rows(mtm_pre[name], requests, edges, tn),
            pnlCdf=np.column_stack([srt, np.arange(1, P + 1) / P]),
            vegaTrajectories=vega_rows,
            tradeCount=fills[name],
            objectiveEstimate=float(final.mean() - penalty[name].mean()),
            terminalPnl=final,
            requestCount=req_count,
            trades=trades[name],
        )
    return reports
