"""Run configuration: one JSON document, validated with pydantic (unknown keys rejected)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import pricing
from .hamiltonian import IntensityParams
from .model import BookSpec, CorrelationStructure, HestonJumpParams, JumpSpec, OptionSpec, validate
from .simulator import SimConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class JumpModel(_Strict):
    rate: float = Field(0.0, ge=0)
    marks: list[tuple[float, float]] = [(0.0, 1.0)]
    compensated: bool = False


class UnderlyingModel(_Strict):
    s0: float = Field(100.0, gt=0)
    nu0: float = Field(0.04, gt=0)
    mu: float = 0.0
    kappaP: float = Field(2.0, gt=0)
    thetaP: float = Field(0.04, gt=0)
    kappaQ: float = Field(2.0, gt=0)
    thetaQ: float = Field(0.04, gt=0)
    xi: float = Field(0.7, ge=0)
    rho: float = Field(-0.7, gt=-1, lt=1)
    jump: JumpModel = JumpModel()

    def params(self) -> HestonJumpParams:
        d = self.model_dump()
        j = d.pop("jump")
        return HestonJumpParams(**d, jump=JumpSpec(j["rate"], tuple(tuple(m) for m in j["marks"]), j["compensated"]))


class CorrModel(_Strict):
    sigmaS: list[list[float]] | None = None
    sigmaNu: list[list[float]] | None = None


class BookGroup(_Strict):
    underlying: int = Field(0, ge=0)
    strikes: list[float] = [97.0, 98.0, 99.0, 100.0]
    maturities: list[float] = [0.3, 0.4, 0.5, 0.6, 0.7]


class BookModel(_Strict):
    groups: list[BookGroup] = [BookGroup()]
    lambdaBase: float = Field(252.0 * 50.0, gt=0)
    lambdaDecay: float = Field(0.7, ge=0)
    alpha: float = -0.7
    beta: float = Field(10.0, gt=0)
    notional: float = Field(5e5, gt=0)


class SolverModel(_Strict):
    nS: int = Field(60, ge=3)
    nNu: int = Field(40, ge=3)
    sWidth: float = Field(0.2, gt=0, lt=1)
    nuMin: float = Field(0.005, gt=0)
    nuMax: float = Field(0.15, gt=0)
    nSteps: int = Field(200, ge=1)
    saveEvery: int = Field(10, ge=1)
    greeksEvery: int = Field(10, ge=1)
    gamma: float = Field(2e-5, ge=0)
    penaltyForm: Literal["riccati_full", "eq6_scaled"] = "riccati_full"
    theta2Bound: float = Field(1e6, gt=0)
    baseline: bool = True
    baselineVegaNodes: int = Field(81, ge=3)
    baselineTrades: float = Field(40.0, gt=0)
    baselineSteps: int | None = Field(None, ge=1)
    refinementProbe: bool = True
    exportTimes: list[float] = [0.0]

    @model_validator(mode="after")
    def _nu_range(self):
        if self.nuMax <= self.nuMin:
            raise ValueError("nuMax must exceed nuMin")
        return self


class SimModel(_Strict):
    nPaths: int = Field(100, ge=1)
    stepsPerDay: int = Field(2000, ge=1)
    seed: int = Field(12345, ge=0, lt=2**64)
    strategy: Literal["both", "theta", "baseline"] = "both"
    horizon: float = Field(0.004, gt=0)
    nBuckets: int = Field(20, ge=1)
    vegaPaths: int = Field(2, ge=0)
    vegaEvery: int = Field(20, ge=1)


class OutputModel(_Strict):
    directory: str = "out"


class RunConfig(_Strict):
    model: list[UnderlyingModel] = [UnderlyingModel()]
    corr: CorrModel = CorrModel()
    book: BookModel = BookModel()
    solver: SolverModel = SolverModel()
    sim: SimModel = SimModel()
    output: OutputModel = OutputModel()

    @model_validator(mode="after")
    def _consistent(self):
        d = len(self.model)
        if d < 1:
            raise ValueError("model needs at least one underlying")
        for g in self.book.groups:
            if g.underlying >= d:
                raise ValueError(f"book group refers to underlying {g.underlying} but only {d} defined")
            if not g.strikes or not g.maturities:
                raise ValueError("book groups need at least one strike and one maturity")
        for name in ("sigmaS", "sigmaNu"):
            m = getattr(self.corr, name)
            if m is not None and np.asarray(m).shape != (d, d):
                raise ValueError(f"corr.{name} must be {d}x{d}")
        return self

    # derived objects ------------------------------------------------------
    def params(self) -> list[HestonJumpParams]:
        return [m.params() for m in self.model]

    def correlation(self) -> CorrelationStructure:
        d = len(self.model)
        s = np.eye(d) if self.corr.sigmaS is None else np.asarray(self.corr.sigmaS, float)
        n = np.eye(d) if self.corr.sigmaNu is None else np.asarray(self.corr.sigmaNu, float)
        return CorrelationStructure(s, n)

    def build_book(self) -> BookSpec:
        """lambda_j = base / (1 + decay |S0 - K_j|) and z_j = notional / O_j at (t=0, s0, nu0)."""
        params = self.params()
        b = self.book
        opts, lam, z = [], [], []
        for g in sorted(b.groups, key=lambda g: g.underlying):
            p = params[g.underlying]
            for T in g.maturities:
                for K in g.strikes:
                    opts.append(OptionSpec(g.underlying, float(K), float(T)))
                    lam.append(b.lambdaBase / (1.0 + b.lambdaDecay * abs(p.s0 - K)))
                    z.append(b.notional / float(pricing.call_price(p, 0.0, p.s0, p.nu0, K, T)))
        return BookSpec(
            options=tuple(opts),
            tradeSize=np.asarray(z),
            intensityBid=tuple(IntensityParams(l, b.alpha, b.beta, "bid") for l in lam),
            intensityAsk=tuple(IntensityParams(l, b.alpha, b.beta, "ask") for l in lam),
        )

    def sim_config(self) -> SimConfig:
        s = self.sim
        return SimConfig(
            nPaths=s.nPaths,
            stepsPerDay=s.stepsPerDay,
            horizon=s.horizon,
            seed=s.seed,
            strategy=s.strategy,
            n_buckets=s.nBuckets,
            vega_paths=s.vegaPaths,
            vega_every=s.vegaEvery,
            gamma=self.solver.gamma,
        )

    def validate_model(self):
        """Run the model-level invariant checks; raises ValueError listing every failure."""
        rep = validate(self.params(), self.correlation(), self.build_book(), horizon=self.sim.horizon)
        rep.raise_if_failed()
        return rep

    def solver_digest(self) -> str:
        """Checksum of everything the solved fields depend on."""
        payload = {k: getattr(self, k).model_dump() if k != "model" else [m.model_dump() for m in self.model]
                   for k in ("model", "corr", "book", "solver")}
        payload["horizon"] = self.sim.horizon
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.model_validate_json(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    return cfg.model_dump_json(indent=2)


def config_schema() -> dict:
    return RunConfig.model_json_schema()
