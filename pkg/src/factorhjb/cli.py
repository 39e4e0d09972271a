"""Command line entry point: ``factor-hjb {solve,verify,simulate,sweep,residual}``.

Every run writes deterministic artifacts (CSV, JSON) plus ``manifest.json``
into ``--out``.  Wall-clock timings go to ``timing.json`` so that the other
files stay byte-identical between repeated runs.
"""

from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .certify import BoxFixedPointError, CertificateReport, auto_box
from .config import ConfigError, RunConfig, load_config
from .expr import ExprError
from .hamiltonian import HamiltonianError
from .io import IOFormatError, dumps_json, file_digest, read_field_csv, write_field_csv, write_json, write_paths_csv, write_rows_csv, write_strategy_csv
from .mc_oracle import OracleError, VerifyConfig, lipschitz_suite, verify_solution
from .model import AlphaRegime, FactorPDE, ModelError, pde_hash, validate
from .portfolio import PortfolioError, extract_strategy, standard_perturbations, utility_compare
from .sde import FieldPolicy, MCConfig, SimulationError, simulate
from .solver import ControlField, Grid, SolutionField, SolverConfig, SolverError, solve
from .transform import TransformRecord, apply_power, reduce_regime, residual

__all__ = ["main", "run", "SolveResult", "solve_model", "EXIT_OK", "EXIT_CONFIG", "EXIT_SOLVER", "EXIT_CERT", "EXIT_VERIFY"]

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CERT, EXIT_VERIFY = 0, 2, 3, 4, 5

log = logging.getLogger("factorhjb")


class CertificationFailure(RuntimeError):
    pass


class VerificationFailure(RuntimeError):
    pass


@dataclass
class SolveResult:
    pde: FactorPDE  # as configured
    solved_pde: FactorPDE  # after regime reduction
    record: TransformRecord
    grid: Grid
    solver_cfg: SolverConfig
    solved: SolutionField  # field of solved_pde
    controls: ControlField
    certificate: CertificateReport
    field: SolutionField  # mapped back to the configured equation
    box_trace: list

    @property
    def regime(self) -> AlphaRegime | None:
        return None if self.solved_pde.theta_is_zero else self.solved_pde.regime


def _solver_cfg(cfg: RunConfig) -> SolverConfig:
    s = cfg.section("solver")
    try:
        return SolverConfig(
            tol=float(s["tol"]),
            max_policy_iters=int(s["max_policy_iters"]),
            boundary=str(s["boundary"]),
            theta_scheme=float(s["theta_scheme"]),
            rannacher_steps=int(s["rannacher_steps"]),
        )
    except SolverError as exc:
        raise ConfigError(f"[solver]: {exc}") from exc


def _grid(cfg: RunConfig, p: FactorPDE) -> Grid:
    g = cfg.section("grid")
    region = cfg.region(p)
    if len(region) != p.n:
        raise ConfigError(f"[grid] region has {len(region)} axes, the model has n = {p.n}")
    try:
        return Grid.uniform(region, g["nodes"], int(g["nt"]), p.T)
    except (SolverError, TypeError) as exc:
        raise ConfigError(f"[grid]: {exc}") from exc


def solve_model(cfg: RunConfig, p: FactorPDE | None = None) -> SolveResult:
    """Configured model -> regime reduction -> box fixed point -> original variables."""
    p = p if p is not None else cfg.pde()
    validate(p, strict=True)
    mu = cfg.section("transform").get("mu")
    q, rec = reduce_regime(p, mu=mu)
    if not rec.identity:
        log.info("solving the power-transformed equation (psi=%r, mu=%r, k=%r)", rec.psi, rec.mu, rec.k_solved)
    grid = _grid(cfg, q)
    scfg = _solver_cfg(cfg)
    s = cfg.section("solver")
    box, sol, ctl, cert, trace = auto_box(q, grid, scfg, R0=float(s["R0"]), max_rounds=int(s["max_box_rounds"]))
    fld = apply_power(sol, rec) if not rec.identity else sol
    return SolveResult(p, q, rec, grid, scfg.with_box(box), sol, ctl, cert, fld, trace)


def _default_points(grid: Grid) -> list[tuple[list[float], float]]:
    out = []
    for i in range(5):
        s = (i - 2) / 4.0  # -0.5 .. 0.5 of the half width
        x = [0.5 * (lo + hi) + s * 0.5 * (hi - lo) * (1 if a == 0 else -1) for a, (lo, hi, _) in enumerate(grid.axes)]
        out.append((x, 0.0))
    return out


def _points(cfg: RunConfig, grid: Grid):
    rows = cfg.section("mc").get("points")
    if not rows:
        return _default_points(grid)
    pts = []
    for row in rows:
        if len(row) != grid.n + 1:
            raise ConfigError(f"[mc] points rows need {grid.n} coordinates and a time, got {row}")
        pts.append(([float(v) for v in row[:-1]], float(row[-1])))
    return pts


def _mc_cfg(cfg: RunConfig, threads, *, store=False) -> MCConfig:
    mc = cfg.section("mc")
    return MCConfig(steps=int(mc["steps"]), paths=int(mc["paths"]), seed=int(mc["seed"]), block=int(mc["block"]), threads=threads, store_paths=store)


def _field_error(res: SolveResult, pts) -> np.ndarray:
    """Half-resolution re-solve with the final box; second-order Richardson estimate."""
    axes = []
    for lo, hi, m in res.grid.axes:
        if (m - 1) % 2:
            return np.zeros(len(pts))
        axes.append((lo, hi, (m - 1) // 2 + 1))
    if (res.grid.nt - 1) % 2:
        return np.zeros(len(pts))
    try:
        coarse_grid = Grid(tuple(axes), (res.grid.nt - 1) // 2 + 1, res.grid.T)
        coarse, _ = solve(res.solved_pde, coarse_grid, res.solver_cfg)
    except SolverError:
        return np.zeros(len(pts))
    return np.array([abs(res.solved.value_at(x, t) - coarse.value_at(x, t)) / 3.0 for x, t in pts])


# --------------------------------------------------------------------------
# artifacts


class _Run:
    def __init__(self, out: Path, cfg: RunConfig | None, command: str):
        self.out = out
        self.cfg = cfg
        self.command = command
        self.files: list[str] = []
        self.timing: dict[str, float] = {}
        self.summary: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    @property
    def config_hash(self) -> str:
        return self.cfg.hash if self.cfg is not None else ""

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def json(self, name: str, obj: dict) -> None:
        write_json(self.path(name), dict(obj, config_hash=self.config_hash))

    def manifest(self, status: str, exit_code: int) -> None:
        arts = {name: {"sha256": file_digest(self.out / name), "config_hash": self.config_hash} for name in sorted(set(self.files)) if (self.out / name).exists()}
        mc = self.cfg.section("mc") if self.cfg is not None else {}
        man = {
            "command": self.command,
            "status": status,
            "exit_code": exit_code,
            "config_hash": self.config_hash,
            "config": self.cfg.data if self.cfg is not None else None,
            "seeds": {"mc": mc.get("seed")},
            "versions": {
                "factorhjb": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "artifacts": arts,
            "timing_file": "timing.json",
        }
        man.update(self.summary)
        write_json(self.out / "manifest.json", man)
        write_json(self.out / "timing.json", {"wall_seconds": self.timing, "config_hash": self.config_hash})

    def fail(self, code: int, exc: BaseException) -> None:
        kept = []
        for name in sorted(set(self.files)):
            src = self.out / name
            if src.exists():
                src.replace(self.out / (name + ".failed"))
                kept.append(name + ".failed")
        err = {"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": code, "command": self.command, "config_hash": self.config_hash}}
        trace = getattr(exc, "trace", None)
        if trace:
            err["error"]["trace"] = trace
        write_json(self.out / "error.json", err)
        self.files = kept + ["error.json"]
        self.manifest("failed", code)
        sys.stderr.write(dumps_json(err))


def _export_solve(run: _Run, res: SolveResult) -> dict:
    write_field_csv(run.path("field.csv"), res.field, res.controls)
    cert = res.certificate.to_dict()
    rr = residual(res.pde, res.field)
    summary = {
        "pde_hash": pde_hash(res.pde),
        "solved_pde_hash": pde_hash(res.solved_pde),
        "solver_config_hash": res.solver_cfg.hash(),
        "transform": res.record.to_dict(),
        "grid": res.grid.to_dict(),
        "box": res.solver_cfg.box.to_dict(),
        "box_rounds": res.box_trace,
        "policy_iterations": {"total": int(sum(res.solved.iterations)), "max": int(max(res.solved.iterations, default=0))},
        "residual": rr.to_dict(),
        "certificate": cert,
    }
    run.json("certificate.json", cert)
    return summary


def _cmd_solve(run: _Run, cfg: RunConfig, args) -> int:
    t = time.perf_counter()
    res = solve_model(cfg)
    run.timing["solve"] = time.perf_counter() - t
    summary = _export_solve(run, res)
    run.json("summary.json", summary)
    run.summary = {"certificate": {"pass": res.certificate.passed}}
    if not res.certificate.passed:
        raise CertificationFailure("certificate failed: " + ", ".join(f"{k}={summary['certificate'][k]}" for k in ("lower_ok", "upper_ok", "clips_inactive")))
    return EXIT_OK


def _cmd_verify(run: _Run, cfg: RunConfig, args) -> int:
    t = time.perf_counter()
    res = solve_model(cfg)
    run.timing["solve"] = time.perf_counter() - t
    summary = _export_solve(run, res)
    if not res.certificate.passed:
        run.json("summary.json", summary)
        raise CertificationFailure("certificate failed before verification")
    mc = cfg.section("mc")
    pts = _points(cfg, res.grid)
    t = time.perf_counter()
    ferr = _field_error(res, pts) if mc["field_error"] == "richardson" else None
    run.timing["field_error"] = time.perf_counter() - t
    vcfg = VerifyConfig(mc=_mc_cfg(cfg, args.threads), rel_tol=float(mc["rel_tol"]), z_max=float(mc["z_max"]), bias_paths=int(mc["bias_paths"]))
    t = time.perf_counter()
    rep = verify_solution(res.solved, res.controls, res.solved_pde, pts, vcfg, field_error=ferr)
    run.timing["verify"] = time.perf_counter() - t
    summary["verification"] = rep.to_dict()
    ok = rep.passed

    lip = cfg.section("lipschitz")
    if lip.get("enabled"):
        q = res.solved_pde
        lcfg = replace(vcfg.mc, paths=int(lip["paths"]), steps=int(lip["steps"]))
        x0 = lip.get("x0") or [pts[0][0][i] for i in range(q.n)]
        xb = lip.get("xbar0") or [v + 0.1 for v in x0]
        L_b = validate(q, strict=False).lipschitz["b"]
        t = time.perf_counter()
        lr = lipschitz_suite(q, x0, xb, lcfg, L_b=L_b, radii=tuple(lip["radii"]))
        run.timing["lipschitz"] = time.perf_counter() - t
        summary["lipschitz"] = lr.to_dict()
        ok = ok and lr.passed

    if args.dump_paths:
        n = min(int(mc["dump_paths"]), vcfg.mc.paths)
        x, t0 = pts[0]
        b = simulate(res.solved_pde, FieldPolicy(res.controls), np.asarray(x), t0, replace(vcfg.mc, paths=n, store_paths=True))
        write_paths_csv(run.path("paths.csv"), b)

    run.json("summary.json", summary)
    run.summary = {"certificate": {"pass": True}, "verification": {"pass": ok, "z": [pt.z for pt in rep.points], "max_abs_z": rep.max_abs_z}}
    if not ok:
        raise VerificationFailure(f"Monte Carlo verification failed (max |z| = {rep.max_abs_z:.3g})")
    return EXIT_OK


def _cmd_simulate(run: _Run, cfg: RunConfig, args) -> int:
    if cfg.kind != "market":
        raise ConfigError("simulate needs a [market] config")
    m = cfg.market()
    t = time.perf_counter()
    res = solve_model(cfg)
    run.timing["solve"] = time.perf_counter() - t
    summary = _export_solve(run, res)
    strat = extract_strategy(res.field, m)
    write_strategy_csv(run.path("strategy.csv"), strat)
    pf = cfg.section("portfolio")
    x0 = float(pf.get("x0", 0.5 * (res.grid.axes[0][0] + res.grid.axes[0][1])))
    t = time.perf_counter()
    dom = utility_compare(m, strat, standard_perturbations(strat), _mc_cfg(cfg, args.threads), v0=float(pf["v0"]), x0=x0, t0=float(pf["t0"]))
    run.timing["simulate"] = time.perf_counter() - t
    summary["dominance"] = dom.to_dict()
    summary["value_from_field"] = float(pf["v0"]) ** m.gamma / m.gamma * res.field.value_at([x0], float(pf["t0"]))
    run.json("summary.json", summary)
    run.summary = {"certificate": {"pass": res.certificate.passed}, "dominance": {"pass": dom.passed}}
    if not res.certificate.passed:
        raise CertificationFailure("certificate failed")
    if not dom.passed:
        raise VerificationFailure("a perturbed strategy beats the extracted one by more than 3 paired standard errors")
    return EXIT_OK


def _monotone(vals) -> str:
    d = np.diff(np.asarray(vals, float))
    if d.size == 0:
        return "constant"
    if np.all(d > 0):
        return "increasing"
    if np.all(d < 0):
        return "decreasing"
    if np.all(d == 0):
        return "constant"
    return "non-monotone"


def _cmd_sweep(run: _Run, cfg: RunConfig, args) -> int:
    sw = cfg.section("sweep")
    key, values = sw.get("key"), sw.get("values")
    if not key or not values or key.count(".") != 1:
        raise ConfigError("[sweep] needs key = 'section.key' and a non-empty values list")
    sec, name = key.split(".")
    rows = []
    failed = 0
    t = time.perf_counter()
    for v in values:
        c = cfg.with_override(sec, name, v)
        res = solve_model(c)
        grid = res.grid
        x0 = sw.get("x0") or [0.5 * (lo + hi) for lo, hi, _ in grid.axes]
        cert = res.certificate
        failed += not cert.passed
        rows.append([float(v), res.field.value_at(x0, 0.0), float(res.field.G.min()), float(res.field.G.max()), cert.R_hat, cert.m1_hat, cert.m2_hat, len(res.box_trace), str(cert.passed).lower()])
    run.timing["sweep"] = time.perf_counter() - t
    header = [name, "G_x0_t0", "G_min", "G_max", "R_hat", "m1_hat", "m2_hat", "box_rounds", "certificate_pass"]
    write_rows_csv(run.path("sweep.csv"), header, rows)
    summary = {"key": key, "values": list(values), "rows": len(rows), "G_x0_t0_trend": _monotone([r[1] for r in rows]), "certificates_failed": failed}
    run.json("summary.json", summary)
    run.summary = {"sweep": summary}
    if failed:
        raise CertificationFailure(f"{failed} sweep point(s) failed certification")
    return EXIT_OK


def _cmd_residual(run: _Run, cfg: RunConfig, args) -> int:
    if not args.field:
        raise ConfigError("residual needs --field PATH (a field.csv from solve)")
    p = cfg.pde()
    fld = read_field_csv(args.field, pde_hash(p))
    rr = residual(p, fld)
    rows = []
    for j in range(rr.field.shape[0]):
        rows.append([float(fld.grid.times[j + 1]), float(np.nanmax(np.abs(rr.field[j])))])
    write_rows_csv(run.path("residual.csv"), ["t", "sup_abs_residual"], rows)
    run.json("summary.json", {"residual": rr.to_dict(), "pde_hash": pde_hash(p), "field_sha256": file_digest(args.field)})
    run.summary = {"residual": rr.to_dict()}
    return EXIT_OK


COMMANDS = {"solve": _cmd_solve, "verify": _cmd_verify, "simulate": _cmd_simulate, "sweep": _cmd_sweep, "residual": _cmd_residual}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, ExprError, ModelError, IOFormatError)):
        return EXIT_CONFIG
    if isinstance(exc, BoxFixedPointError):
        return EXIT_SOLVER if isinstance(exc.__cause__, SolverError) else EXIT_CERT
    if isinstance(exc, CertificationFailure):
        return EXIT_CERT
    if isinstance(exc, VerificationFailure):
        return EXIT_VERIFY
    if isinstance(exc, (SolverError, HamiltonianError, SimulationError, OracleError, PortfolioError, FloatingPointError)):
        return EXIT_SOLVER
    return EXIT_SOLVER


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="factor-hjb", description="Solve, certify and verify factor HJB equations.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="TOML run config")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="Monte Carlo seed (unsigned 64-bit)")
    ap.add_argument("--threads", type=int, default=None, help="worker cap for path simulation")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V", help="override section.key=value")
    ap.add_argument("--dump-paths", action="store_true", help="verify: write the first mc.dump_paths paths")
    ap.add_argument("--field", default=None, help="residual: field CSV to evaluate")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def _setup_logging() -> None:
    level = os.environ.get("FACTOR_HJB_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def run(command: str, config_path, overrides=(), out_dir="out", *, seed=None, threads=None, dump_paths=False, field=None) -> int:
    args = argparse.Namespace(command=command, config=config_path, out=out_dir, seed=seed, threads=threads, overrides=list(overrides), dump_paths=dump_paths, field=field)
    return _run(args)


def _run(args) -> int:
    out = Path(args.out)
    cfg = None
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"mc.seed={int(args.seed)}")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
        cfg = load_config(args.config, overrides)
    except Exception as exc:  # noqa: BLE001
        code = _exit_code(exc)
        _Run(out, None, args.command).fail(code, exc)
        return code
    r = _Run(out, cfg, args.command)
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](r, cfg, args)
    except Exception as exc:  # noqa: BLE001
        code = _exit_code(exc)
        log.debug("run failed", exc_info=True)
        r.timing["total"] = time.perf_counter() - t0
        r.fail(code, exc)
        return code
    r.timing["total"] = time.perf_counter() - t0
    r.manifest("ok", code)
    return code


def main(argv=None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    return _run(args)


if __name__ == "__main__":
    sys.exit(main())
