"""Market model: Heston-with-jumps coefficients, correlation structure and the option book."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hamiltonian import IntensityParams


@dataclass(frozen=True)
class JumpSpec:
    """Compound Poisson jumps in the spot with a finite set of marks.

    ``marks`` holds ``(size, probability)`` pairs; ``rate`` is the total
    arrival intensity per year.
    """

    rate: float = 0.0
    marks: tuple[tuple[float, float], ...] = ((0.0, 1.0),)
    compensated: bool = False

    @property
    def sizes(self) -> np.ndarray:
        return np.array([m[0] for m in self.marks], dtype=float)

    @property
    def probs(self) -> np.ndarray:
        return np.array([m[1] for m in self.marks], dtype=float)

    @property
    def mean_size(self) -> float:
        return float(np.dot(self.sizes, self.probs))


@dataclass(frozen=True)
class HestonJumpParams:
    """Per-underlying coefficients under the historical (P) and pricing (Q) measures."""

    s0: float = 100.0
    nu0: float = 0.04
    mu: float = 0.0
    kappaP: float = 2.0
    thetaP: float = 0.04
    kappaQ: float = 2.0
    thetaQ: float = 0.04
    xi: float = 0.7
    rho: float = -0.7
    jump: JumpSpec = field(default_factory=JumpSpec)

    @property
    def feller_satisfied(self) -> bool:
        return 2.0 * self.kappaP * self.thetaP >= self.xi**2


@dataclass(frozen=True)
class CorrelationStructure:
    sigmaS: np.ndarray
    sigmaNu: np.ndarray

    @classmethod
    def identity(cls, d: int = 1) -> "CorrelationStructure":
        return cls(np.eye(d), np.eye(d))

    @property
    def d(self) -> int:
        return int(np.asarray(self.sigmaS).shape[0])


@dataclass(frozen=True)
class OptionSpec:
    underlying: int
    strike: float
    maturity: float
    payoff: str = "call"


@dataclass(frozen=True)
class BookSpec:
    """Options (ordered by underlying), trade sizes and bid/ask intensity parameters."""

    options: tuple[OptionSpec, ...]
    tradeSize: np.ndarray
    intensityBid: tuple[IntensityParams, ...]
    intensityAsk: tuple[IntensityParams, ...]

    @property
    def n(self) -> int:
        return len(self.options)

    def underlying_index(self) -> np.ndarray:
        return np.array([o.underlying for o in self.options], dtype=int)

    def intensity(self, side: str) -> tuple[IntensityParams, ...]:
        if side == "bid":
            return self.intensityBid
        if side == "ask":
            return self.intensityAsk
        raise ValueError(f"unknown side {side!r}")

    def subset(self, idx: Sequence[int]) -> "BookSpec":
        idx = list(idx)
        return BookSpec(
            options=tuple(self.options[i] for i in idx),
            tradeSize=np.asarray(self.tradeSize, dtype=float)[idx],
            intensityBid=tuple(self.intensityBid[i] for i in idx),
            intensityAsk=tuple(self.intensityAsk[i] for i in idx),
        )


@dataclass
class ValidationReport:
    checks: dict[str, bool] = field(default_factory=dict)
    messages: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def add(self, name: str, passed: bool, message: str = "") -> None:
        self.checks[name] = bool(passed)
        if not passed:
            self.messages[name] = message or name

    def failures(self) -> list[str]:
        return [f"{k}: {self.messages[k]}" for k, v in self.checks.items() if not v]

    def raise_if_failed(self) -> None:
        if not self.ok:
            raise ValueError("invalid model inputs: " + "; ".join(self.failures()))


def is_correlation_matrix(m: np.ndarray, tol: float = 1e-10) -> tuple[bool, str]:
    """Symmetric, unit diagonal and PSD up to an eigenvalue floor of ``-tol``."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False, "not square"
    if not np.allclose(m, m.T, atol=tol):
        return False, "not symmetric"
    if not np.allclose(np.diag(m), 1.0, atol=tol):
        return False, "diagonal is not 1"
    lo = float(np.linalg.eigvalsh(m).min())
    if lo < -tol:
        return False, f"not positive semidefinite (min eigenvalue {lo:.3g})"
    return True, ""


def full_correlation(params: Sequence[HestonJumpParams], corr: CorrelationStructure) -> np.ndarray:
    """Joint correlation of (W^{1,S},...,W^{d,S}, W^{1,nu},...,W^{d,nu}).

    Spot/variance cross-correlation only between an asset and its own variance.
    """
    d = len(params)
    c = np.zeros((2 * d, 2 * d))
    c[:d, :d] = corr.sigmaS
    c[d:, d:] = corr.sigmaNu
    for i, p in enumerate(params):
        c[i, d + i] = c[d + i, i] = p.rho
    return c


def validate(
    params: Sequence[HestonJumpParams],
    corr: CorrelationStructure,
    book: BookSpec,
    horizon: float | None = None,
) -> ValidationReport:
    """Check every invariant the solvers and simulator rely on. Never raises."""
    rep = ValidationReport()
    d = len(params)
    rep.add("d>=1", d >= 1, "no underlyings")
    for i, p in enumerate(params):
        tag = f"underlying[{i}]"
        rep.add(f"{tag}.s0>0", p.s0 > 0)
        rep.add(f"{tag}.nu0>0", p.nu0 > 0)
        rep.add(f"{tag}.kappaP>0", p.kappaP > 0)
        rep.add(f"{tag}.kappaQ>0", p.kappaQ > 0)
        rep.add(f"{tag}.thetaP>0", p.thetaP > 0)
        rep.add(f"{tag}.thetaQ>0", p.thetaQ > 0)
        rep.add(f"{tag}.xi>=0", p.xi >= 0)
        rep.add(f"{tag}.|rho|<1", abs(p.rho) < 1, f"rho={p.rho} outside (-1, 1)")
        j = p.jump
        rep.add(f"{tag}.jump.rate>=0", j.rate >= 0)
        rep.add(
            f"{tag}.jump.probs",
            len(j.marks) > 0 and abs(j.probs.sum() - 1.0) <= 1e-12 and bool(np.all(j.probs >= 0)),
            "jump mark probabilities must be nonnegative and sum to 1",
        )
        if not p.feller_satisfied:
            rep.warnings.append(
                f"{tag}: Feller condition fails (2*kappaP*thetaP={2 * p.kappaP * p.thetaP:.4g}"
                f" < xi^2={p.xi**2:.4g}); variance uses full truncation"
            )

    sS, sN = np.asarray(corr.sigmaS, float), np.asarray(corr.sigmaNu, float)
    for name, m in (("sigmaS", sS), ("sigmaNu", sN)):
        shape_ok = m.shape == (d, d)
        rep.add(f"corr.{name}.shape", shape_ok, f"expected {(d, d)}, got {m.shape}")
        if shape_ok:
            ok, msg = is_correlation_matrix(m)
            rep.add(f"corr.{name}.psd", ok, msg)
    if rep.ok:
        ok, msg = is_correlation_matrix(full_correlation(params, corr))
        rep.add("corr.joint.psd", ok, "joint spot/variance correlation " + msg)

    n = book.n
    rep.add("book.nonempty", n > 0, "no options")
    ts = np.asarray(book.tradeSize, dtype=float)
    rep.add("book.lengths", ts.shape == (n,) and len(book.intensityBid) == n and len(book.intensityAsk) == n,
            "tradeSize / intensity lengths differ from the number of options")
    rep.add("book.tradeSize>0", bool(np.all(ts > 0)))
    und = [o.underlying for o in book.options]
    rep.add("book.underlying", all(0 <= u < d for u in und), "underlying index out of range")
    rep.add("book.grouped", und == sorted(und), "options must be grouped by underlying")
    for k, o in enumerate(book.options):
        rep.add(f"option[{k}].strike>0", o.strike > 0)
        rep.add(f"option[{k}].payoff", o.payoff == "call", "only European calls are supported")
        if horizon is not None:
            rep.add(f"option[{k}].maturity>T", o.maturity > horizon, "maturity must exceed the horizon")
    for side in ("bid", "ask"):
        for k, ip in enumerate(book.intensity(side) if rep.checks.get("book.lengths") else ()):
            rep.add(f"intensity[{k}].{side}.lambdaMax>0", ip.lambdaMax > 0)
    return rep


def coeff_eval(p: HestonJumpParams, measure: str, t, S, nu):
    """Drift/vol of spot and variance under ``measure`` ('P' or 'Q').

    Variance enters through ``max(nu, 0)`` (full truncation). Jump
    compensation, when enabled, is subtracted from the spot drift.
    """
    S = np.asarray(S, dtype=float)
    nup = np.maximum(np.asarray(nu, dtype=float), 0.0)
    sq = np.sqrt(nup)
    comp = p.jump.rate * p.jump.mean_size if p.jump.compensated else 0.0
    if measure == "P":
        drift_S = p.mu * S - comp
        drift_nu = p.kappaP * (p.thetaP - nup)
    elif measure == "Q":
        drift_S = np.zeros_like(S) - comp
        drift_nu = p.kappaQ * (p.thetaQ - nup)
    else:
        raise ValueError(f"measure must be 'P' or 'Q', got {measure!r}")
    return drift_S, S * sq, drift_nu, p.xi * sq
