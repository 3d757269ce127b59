"""Command line entry point: ``optmm {surface,solve,quotes,compare}``.

Exit status 0 on success, 2 for configuration errors, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
import zipfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import baseline as bl
from . import pricing
from . import simulator as sim
from . import theta as th
from .config import RunConfig, load_config
from .grid import SpatialGrid
from .hamiltonian import HamiltonianError, quote_arrays

log = logging.getLogger("optmm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if x is None else repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# solving and caching -------------------------------------------------------

def theta_grid(cfg: RunConfig) -> SpatialGrid:
    s = cfg.solver
    return SpatialGrid.build(cfg.params(), cfg.sim.horizon, s.nS, s.nNu, s.nSteps, s.sWidth, s.nuMin, s.nuMax)


def solve_theta_fields(cfg: RunConfig, book) -> th.ThetaFields:
    s = cfg.solver
    grid = theta_grid(cfg)
    times = grid.tNodes[:: s.greeksEvery]
    if times[-1] != grid.tNodes[-1]:
        times = np.append(times, grid.tNodes[-1])
    src = th.build_sources(grid, book, cfg.params(), cfg.correlation(), times=times)
    return th.solve_theta(grid, src, cfg.params(), cfg.correlation(), s.gamma, s.penaltyForm, s.saveEvery, s.theta2Bound)


def solve_baseline_fields(cfg: RunConfig, book) -> bl.BaselineFields:
    s = cfg.solver
    und = {o.underlying for o in book.options}
    if len(und) != 1:
        raise ConfigError("the constant-Vega baseline supports a single underlying")
    p = cfg.params()[und.pop()]
    grid = bl.VegaPortfolioGrid.build(
        p, book, cfg.sim.horizon, s.nNu, s.nuMin, s.nuMax, s.baselineVegaNodes, s.baselineTrades, s.baselineSteps
    )
    return bl.solve_baseline(grid, p, book, s.gamma)


def refinement_probe(cfg: RunConfig, book, max_options: int = 4) -> dict:
    """Residual of the ansatz on a half-resolution mesh and on its refinement, for up to four options."""
    n = book.n
    idx = sorted({0, n - 1, min(n - 1, 3), max(0, n - 4)})[:max_options]
    sub = book.subset(idx)
    s = cfg.solver
    params, corr = cfg.params(), cfg.correlation()
    coarse = SpatialGrid.build(params, cfg.sim.horizon, (s.nS + 1) // 2, (s.nNu + 1) // 2,
                               max(1, s.nSteps // 2), s.sWidth, s.nuMin, s.nuMax)
    z = sub.tradeSize
    qs = [np.zeros(sub.n), np.eye(sub.n)[0] * z[0], -np.eye(sub.n)[-1] * z[-1], np.resize([-2.0, 1.0, 3.0, -1.0], sub.n) * z]
    out = {"options": idx}
    for name, g in (("coarse", coarse), ("fine", coarse.refined())):
        src = th.build_sources(g, sub, params, corr)
        f = th.solve_theta(g, src, params, corr, s.gamma, s.penaltyForm, 1, s.theta2Bound)
        out[name] = th.residual_check(f, g, src, s.gamma, params, corr, qs)
        out[name + "_mesh"] = [int(a.size) for a in g.axes] + [g.n_steps]
    out["ratio"] = out["coarse"] / out["fine"] if out["fine"] > 0 else float("inf")
    out["decreasing"] = bool(out["fine"] < out["coarse"])
    return out


def _savez(path: Path, **arrays) -> None:
    """np.savez with a fixed member timestamp, so identical arrays give identical bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, a in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(a), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def _save_theta(path: Path, f: th.ThetaFields) -> None:
    arrays = {f"axis{k}": a for k, a in enumerate(f.axes)}
    _savez(path, times=f.times, data=f.data, n=f.n, gamma=f.gamma, penalty_form=f.penalty_form, **arrays)


def _load_theta(path: Path) -> th.ThetaFields:
    z = np.load(path)
    axes = tuple(z[f"axis{k}"] for k in range(sum(1 for key in z.files if key.startswith("axis"))))
    return th.ThetaFields(axes, z["times"], z["data"], int(z["n"]), float(z["gamma"]), str(z["penalty_form"]))


def _save_baseline(path: Path, f: bl.BaselineFields) -> None:
    g = f.grid
    _savez(path, times=f.times, values=f.values, gamma=f.gamma, nuNodes=g.nuNodes, vegaNodes=g.vegaNodes,
             tNodes=g.tNodes, frozenVegas=g.frozenVegas, tradeSize=g.tradeSize)


def _load_baseline(path: Path) -> bl.BaselineFields:
    z = np.load(path)
    g = bl.VegaPortfolioGrid(z["nuNodes"], z["vegaNodes"], z["tNodes"], z["frozenVegas"], z["tradeSize"])
    return bl.BaselineFields(g, z["times"], z["values"], float(z["gamma"]))


def ensure_fields(cfg: RunConfig, book, out: Path, need_baseline: bool, probe: bool = False):
    """Solve, or reuse cached fields whose manifest matches the config digest and file checksums."""
    manifest_path = out / "manifest.json"
    digest = cfg.solver_digest()
    theta_path, base_path = out / "theta_fields.npz", out / "baseline_fields.npz"
    manifest = {}
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError:
            manifest = {}
    files = manifest.get("files", {})

    def cached(path: Path) -> bool:
        return (manifest.get("config_digest") == digest and path.exists()
                and files.get(path.name) == _sha256(path))

    t0 = time.perf_counter()
    resumed = {}
    if cached(theta_path):
        fields = _load_theta(theta_path)
        resumed["theta"] = True
    else:
        fields = solve_theta_fields(cfg, book)
        _save_theta(theta_path, fields)
        resumed["theta"] = False
    files[theta_path.name] = _sha256(theta_path)
    bfields = None
    if need_baseline:
        if cached(base_path):
            bfields = _load_baseline(base_path)
            resumed["baseline"] = True
        else:
            bfields = solve_baseline_fields(cfg, book)
            _save_baseline(base_path, bfields)
            resumed["baseline"] = False
        files[base_path.name] = _sha256(base_path)
    wall = time.perf_counter() - t0
    s = cfg.solver
    new = {
        "config_digest": digest,
        "files": files,
        "grid": {"nS": s.nS, "nNu": s.nNu, "sWidth": s.sWidth, "nuMin": s.nuMin, "nuMax": s.nuMax,
                 "nSteps": s.nSteps, "dt": cfg.sim.horizon / s.nSteps, "saveEvery": s.saveEvery,
                 "greeksEvery": s.greeksEvery},
        "tolerances": {"hamiltonian_newton": 1e-12, "pricing_quadrature": 1e-8, "theta2_bound": s.theta2Bound},
        "penalty_form": s.penaltyForm,
        "gamma": s.gamma,
        "residual_check": manifest.get("residual_check") if manifest.get("config_digest") == digest else None,
        "resumed": resumed,
        "wall_time_s": wall,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    if probe and s.refinementProbe and new["residual_check"] is None:
        new["residual_check"] = refinement_probe(cfg, book)
    manifest_path.write_text(json.dumps(new, indent=2, sort_keys=True))
    return fields, bfields, new


def export_theta_slices(out: Path, fields: th.ThetaFields, times) -> list[Path]:
    paths = []
    N = fields.n
    mesh = np.meshgrid(*fields.axes, indexing="ij")
    S = mesh[0].ravel()
    nu = mesh[1].ravel()
    iu = np.triu_indices(N)
    for t in times:
        k = fields.slice_index(t)
        tk = float(fields.times[k])
        th0 = fields.theta0[k].reshape(-1)
        th1 = fields.theta1[k].reshape(-1, N)
        th2 = fields.theta2[k].reshape(-1, N, N)
        rows = []
        for m in range(S.size):
            rows.append((tk, S[m], nu[m], "theta0", None, None, th0[m]))
            rows.extend((tk, S[m], nu[m], "theta1", i, None, th1[m, i]) for i in range(N))
            rows.extend((tk, S[m], nu[m], "theta2", i, j, th2[m, i, j]) for i, j in zip(*iu))
        p = out / f"theta_fields_t{tk:.6f}.csv"
        _write_csv(p, ["t", "S", "nu", "component", "i", "j", "value"], rows)
        paths.append(p)
    return paths


def export_baseline_slices(out: Path, f: bl.BaselineFields, times) -> list[Path]:
    """Same schema; ``i`` carries the portfolio-Vega coordinate and ``S`` is empty."""
    paths = []
    for t in times:
        k = int(np.argmin(np.abs(f.times - t)))
        tk = float(f.times[k])
        rows = [(tk, None, nu, "baseline", V, None, f.values[k, a, b])
                for a, nu in enumerate(f.grid.nuNodes) for b, V in enumerate(f.grid.vegaNodes)]
        p = out / f"baseline_fields_t{tk:.6f}.csv"
        _write_csv(p, ["t", "S", "nu", "component", "i", "j", "value"], rows)
        paths.append(p)
    return paths


# commands ------------------------------------------------------------------

def cmd_surface(cfg: RunConfig, out: Path) -> Path:
    params = cfg.params()
    rows = []
    for g in cfg.book.groups:
        rows.extend(pricing.surface(params[g.underlying], g.strikes, g.maturities))
    path = out / "surface.csv"
    _write_csv(path, ["strike", "maturity", "implied_vol"], rows)
    return path


def cmd_solve(cfg: RunConfig, out: Path) -> dict:
    book = cfg.build_book()
    fields, bfields, manifest = ensure_fields(cfg, book, out, cfg.solver.baseline, probe=True)
    export_theta_slices(out, fields, cfg.solver.exportTimes)
    if bfields is not None:
        export_baseline_slices(out, bfields, cfg.solver.exportTimes)
    return manifest


def quote_sweep(cfg: RunConfig, fields: th.ThetaFields, book, axis: str, values=None, sides=("bid", "ask")):
    """Rows (option, axis_value, side, delta_quote) at t=0, q=0 across the S or nu grid nodes (or ``values``)."""
    params = cfg.params()
    rows = []
    q = np.zeros((1, book.n))
    for j, o in enumerate(book.options):
        u = o.underlying
        p = params[u]
        nodes = fields.axes[2 * u + (1 if axis == "nu" else 0)] if values is None else values
        for v in nodes:
            S = np.array([pp.s0 for pp in params], float)
            nu = np.array([pp.nu0 for pp in params], float)
            if axis == "nu":
                nu[u] = v
            else:
                S[u] = v
            x = np.empty((1, 2 * len(params)))
            x[0, 0::2], x[0, 1::2] = S, nu
            pb, pa = th.quote_increments(fields, book, 0.0, x, q)
            vega = float(pricing.greeks(p, 0.0, S[u], nu[u], o.strike, o.maturity).vega)
            for side, parg in (("bid", pb[0, j]), ("ask", pa[0, j])):
                if side not in sides:
                    continue
                ip = book.intensity(side)[j]
                rows.append((j, float(v), side, float(quote_arrays(ip.lambdaMax, ip.alpha, ip.beta, vega, parg).argmax)))
    return rows


def cmd_quotes(cfg: RunConfig, out: Path, axis: str = "nu", values=None, side: str = "both") -> Path:
    book = cfg.build_book()
    fields, _, _ = ensure_fields(cfg, book, out, need_baseline=False)
    path = out / "quote_sweep.csv"
    sides = ("bid", "ask") if side == "both" else (side,)
    _write_csv(path, ["option", "axis_value", "side", "delta_quote"], quote_sweep(cfg, fields, book, axis, values, sides))
    return path


def _summary(reports: dict, cfg: RunConfig) -> str:
    lines = [f"paths={cfg.sim.nPaths} stepsPerDay={cfg.sim.stepsPerDay} seed={cfg.sim.seed} horizon={cfg.sim.horizon}", ""]
    for name, r in reports.items():
        P = r.terminalPnl.size
        se = r.terminalPnl.std(ddof=1) / np.sqrt(P) if P > 1 else float("nan")
        q = np.quantile(r.terminalPnl, [0.05, 0.25, 0.5, 0.75, 0.95])
        lines += [
            f"[{name}]",
            f"  terminal PnL mean {r.terminalPnl.mean():.6g} (stderr {se:.3g})",
            f"  objective estimate {r.objectiveEstimate:.6g}",
            f"  fills bid/ask {int(r.tradeCount[:, 0].sum())}/{int(r.tradeCount[:, 1].sum())}"
            f" of requests {int(r.requestCount[:, 0].sum())}/{int(r.requestCount[:, 1].sum())}",
            "  PnL quantiles 5/25/50/75/95%: " + " ".join(f"{v:.6g}" for v in q),
            "",
        ]
    names = list(reports)
    lines.append("bucket_start  bucket_end  " + "  ".join(f"{n + ' mean':>14} {n + ' se':>12}" for n in names))
    first = reports[names[0]].perRequestPnl
    for b in range(len(first)):
        row = f"{first[b][0]:12.6f} {first[b][1]:11.6f}  "
        row += "  ".join(f"{reports[n].perRequestPnl[b][2]:14.6g} {reports[n].perRequestPnl[b][3]:12.4g}" for n in names)
        lines.append(row)
    return "\n".join(lines) + "\n"


def cmd_compare(cfg: RunConfig, out: Path) -> dict:
    book = cfg.build_book()
    which = cfg.sim.strategy
    need_base = which in ("both", "baseline")
    fields, bfields, _ = ensure_fields(cfg, book, out, need_base)
    strategies = []
    if which in ("both", "theta"):
        strategies.append(sim.ThetaStrategy(fields, book))
    if need_base:
        strategies.append(sim.BaselineStrategy(bfields, book.options[0].underlying))
    reports = sim.run_experiment(cfg.params(), cfg.correlation(), book, strategies, cfg.sim_config())
    _write_csv(out / "per_request_pnl.csv", ["bucket_start", "bucket_end", "strategy", "mean", "stderr", "n_requests"],
               [(a, b, name, m, s, n) for name, r in reports.items() for a, b, m, s, n in r.perRequestPnl])
    _write_csv(out / "pnl_cdf.csv", ["strategy", "pnl", "cdf"],
               [(name, x, c) for name, r in reports.items() for x, c in r.pnlCdf])
    first = next(iter(reports.values()))
    _write_csv(out / "vega_paths.csv", ["path", "option", "t", "vega"], first.vegaTrajectories)
    # first strategy in trades.csv, any other in trades_<name>.csv, same header
    for k, (name, r) in enumerate(reports.items()):
        fname = "trades.csv" if k == 0 else f"trades_{name}.csv"
        _write_csv(out / fname, ["path", "t", "option", "side", "size", "delta_quote"], sorted(r.trades))
    (out / "summary.txt").write_text(_summary(reports, cfg))
    return reports


# entry point ---------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="optmm", description="Option market making under Heston dynamics.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("surface", "solve", "quotes", "compare"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None, help="JSON run configuration (defaults reproduce the reference setup)")
        sp.add_argument("--out", type=str, default=None, help="output directory (overrides output.directory)")
        sp.add_argument("--seed", type=int, default=None, help="root RNG seed override")
        sp.add_argument("--paths", type=int, default=None, help="number of simulated paths override")
        if name == "quotes":
            sp.add_argument("--axis", choices=("nu", "S"), default="nu", help="sweep axis")
            sp.add_argument("--values", type=str, default=None, help="comma-separated axis values (default: grid nodes)")
            sp.add_argument("--side", choices=("both", "bid", "ask"), default="both")
    return ap


def _configure(args) -> tuple[RunConfig, Path]:
    try:
        cfg = load_config(args.config)
        data = cfg.model_dump()
        if args.seed is not None:
            data["sim"]["seed"] = args.seed
        if args.paths is not None:
            data["sim"]["nPaths"] = args.paths
        cfg = RunConfig.model_validate(data)
        cfg.validate_model()
    except ValidationError as exc:
        msgs = "; ".join(f"{'.'.join(str(x) for x in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors())
        raise ConfigError(msgs) from exc
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out if args.out is not None else cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg, out = _configure(args)
        values = None
        if getattr(args, "values", None):
            try:
                values = [float(v) for v in args.values.split(",")]
            except ValueError as exc:
                raise ConfigError(f"--values: {exc}") from exc
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "surface":
            print(cmd_surface(cfg, out))
        elif args.command == "solve":
            m = cmd_solve(cfg, out)
            print(json.dumps({k: m[k] for k in ("residual_check", "resumed", "wall_time_s")}, default=str))
        elif args.command == "quotes":
            print(cmd_quotes(cfg, out, args.axis, values, args.side))
        else:
            cmd_compare(cfg, out)
            print((out / "summary.txt").read_text())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, HamiltonianError, pricing.PricingError, ValueError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
