"""Explicit bounds on G and the box fixed-point search.

The bounds are stated for the Hamiltonian weight theta / (1 - alpha)^2
(see :meth:`AlphaRegime.hjb_weight`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import ControlBox
from .model import AlphaRegime, FactorPDE
from .solver import ControlField, Grid, SolutionField, SolverConfig, SolverError, solve

__all__ = [
    "BoundStats",
    "CertificateReport",
    "BoxFixedPointError",
    "bound_constants",
    "grid_stats",
    "certify",
    "auto_box",
    "initial_box",
]

SLACK = 1e-6
MAX_LISTED = 20


@dataclass(frozen=True)
class BoundStats:
    sup_abs_h: float
    theta_max: float
    theta_min: float
    inf_beta: float
    sup_beta: float


def bound_constants(stats: BoundStats, regime: AlphaRegime | None, T: float, m2: float | None = None) -> tuple[float, float]:
    """(D1, D2) for K_NEG, (D1, D(m2)) for K_GT1.  Theta entries are Hamiltonian weights."""
    H = stats.sup_abs_h
    th_max, th_min = stats.theta_max, stats.theta_min
    if regime is None or th_max == 0.0:
        return math.exp(H * T) * stats.sup_beta, stats.inf_beta * math.exp(-H * T)
    a = regime.alpha
    if regime.regime == "K_NEG":
        if th_min <= 0.0:
            D1 = math.inf
        else:
            D1 = math.exp(H * T) * (stats.sup_beta + th_max * (T + 1.0 / (th_min * a)))
        D2 = stats.inf_beta * math.exp(-(H + th_max * a) * T)
        return D1, D2
    D1 = math.exp(H * T) * (stats.sup_beta + th_max * T)
    if m2 is None:
        raise ValueError("regime K_GT1 needs m2 for the lower bound")
    D2 = stats.inf_beta * math.exp(-(H + th_max * a * m2) * T)
    return D1, D2


def grid_stats(p: FactorPDE, grid: Grid, regime: AlphaRegime | None) -> BoundStats:
    X = grid.points()
    etas = [None] if p.robust is None else list(p.robust.array())
    H = max(float(np.max(np.abs(p.h_at(X, e)))) for e in etas)
    beta = np.broadcast_to(p.beta_at(X), grid.shape)
    if regime is None or p.theta_is_zero:
        tmax = tmin = 0.0
    else:
        th = np.broadcast_to(regime.hjb_weight(p.theta_at(X)), grid.shape)
        tmax, tmin = float(np.max(th)), float(np.min(th))
    return BoundStats(H, tmax, tmin, float(np.min(beta)), float(np.max(beta)))


@dataclass
class CertificateReport:
    D1_bound: float
    D2_bound: float
    observed_max: float
    observed_min: float
    R_hat: float
    m1_hat: float
    m2_hat: float
    box: ControlBox
    lower_ok: bool
    upper_ok: bool
    clips_inactive: bool
    lipschitz_ratio_max: float
    pass_: bool
    cpow_min: float = math.nan  # range of G^{1/(1-alpha)}
    cpow_max: float = math.nan
    offending: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.pass_

    def to_dict(self) -> dict:
        def num(v):
            return v if math.isfinite(v) else repr(v)

        return {
            "D1_bound": num(self.D1_bound),
            "D2_bound": num(self.D2_bound),
            "observed_max": self.observed_max,
            "observed_min": self.observed_min,
            "R_hat": self.R_hat,
            "m1_hat": num(self.m1_hat),
            "m2_hat": num(self.m2_hat),
            "cpow_min": num(self.cpow_min),
            "cpow_max": num(self.cpow_max),
            "box": self.box.to_dict(),
            "lower_ok": self.lower_ok,
            "upper_ok": self.upper_ok,
            "clips_inactive": self.clips_inactive,
            "lipschitz_ratio_max": self.lipschitz_ratio_max,
            "pass": self.pass_,
            "offending": self.offending,
        }


def _node(grid: Grid, j: int, idx: tuple, kind: str) -> dict:
    return {"kind": kind, "t": float(grid.times[j]), "x": [float(grid.coords(i)[k]) for i, k in enumerate(idx)]}


def certify(
    sol: SolutionField,
    controls: ControlField,
    p: FactorPDE,
    regime: AlphaRegime | None,
    box: ControlBox,
    *,
    slack: float = SLACK,
    frac: float = 0.1,
) -> CertificateReport:
    """Compare a solved field with the explicit bounds and the control box.

    Bounds are checked inside the certificate region (outer ``frac`` of the
    nodes per axis dropped, all time levels).  Clip activity and the box
    quantities use every node.
    """
    grid = sol.grid
    G = sol.G
    mask = grid.certificate_mask(frac)
    inside = G[:, mask]
    stats = grid_stats(p, grid, regime)
    D1, D2 = bound_constants(stats, regime, p.T, box.m2)
    obs_max, obs_min = float(inside.max()), float(inside.min())
    lower_ok = D2 - slack <= obs_min
    upper_ok = obs_max <= D1 + slack

    V = controls.V
    dG = sol.dG
    logdg = dG / G[..., None]
    qvec = np.einsum("...ij,...j->...i", V[None], logdg)
    qn = np.sqrt(np.sum(qvec**2, axis=-1))
    R_hat = float(qn.max())
    lip = float(np.sqrt(np.sum(logdg**2, axis=-1))[:, mask].max())

    offending: list[dict] = []
    interior = R_hat < box.R
    if regime is not None and not p.theta_is_zero:
        c0 = G ** (1.0 / (regime.alpha - 1.0))
        m1_hat, m2_hat = float(c0.min()), float(c0.max())
        cp = G ** (1.0 / (1.0 - regime.alpha))
        cpow_min, cpow_max = float(cp.min()), float(cp.max())
        lo = box.m1 if regime.regime == "K_NEG" else 0.0
        interior = interior and m2_hat < box.m2 and (lo == 0.0 or m1_hat > lo)
    else:
        m1_hat = m2_hat = cpow_min = cpow_max = math.nan

    clip_any = bool(controls.q_clip.any() or controls.c_clip.any())
    clips_inactive = (not clip_any) and interior

    for kind, bitmap in (("q_clip", controls.q_clip), ("c_clip", controls.c_clip)):
        for pos in np.argwhere(bitmap)[: MAX_LISTED - len(offending)]:
            offending.append(_node(grid, int(pos[0]), tuple(int(v) for v in pos[1:]), kind))
    if not lower_ok:
        j, *idx = np.unravel_index(int(np.argmin(np.where(mask[None], G, np.inf))), G.shape)
        offending.append(_node(grid, int(j), tuple(int(v) for v in idx), "below_D2"))
    if not upper_ok:
        j, *idx = np.unravel_index(int(np.argmax(np.where(mask[None], G, -np.inf))), G.shape)
        offending.append(_node(grid, int(j), tuple(int(v) for v in idx), "above_D1"))

    return CertificateReport(
        D1_bound=D1,
        D2_bound=D2,
        observed_max=obs_max,
        observed_min=obs_min,
        R_hat=R_hat,
        m1_hat=m1_hat,
        m2_hat=m2_hat,
        box=box,
        lower_ok=bool(lower_ok),
        upper_ok=bool(upper_ok),
        clips_inactive=bool(clips_inactive),
        lipschitz_ratio_max=lip,
        pass_=bool(lower_ok and upper_ok and clips_inactive),
        cpow_min=cpow_min,
        cpow_max=cpow_max,
        offending=offending,
    )


class BoxFixedPointError(RuntimeError):
    """auto_box gave up; ``trace`` lists the boxes tried and what failed."""

    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


def initial_box(p: FactorPDE, grid: Grid, regime: AlphaRegime | None, R: float = 1.0, margin: float = 2.0) -> ControlBox:
    """Start box: q radius ``R`` and an m-box covering the powers of D1 and D2."""
    if regime is None or p.theta_is_zero:
        return ControlBox(R, 0.5, 2.0)
    stats = grid_stats(p, grid, regime)
    a = regime.alpha
    if regime.regime == "K_GT1":
        D1, _ = bound_constants(stats, regime, p.T, 1.0)
        vals = [D1 ** (1.0 / (a - 1.0)), D1 ** (1.0 / (1.0 - a)), stats.sup_beta ** (1.0 / (a - 1.0))]
        vals = [v for v in vals if math.isfinite(v)]
        return ControlBox(R, 0.0, margin * max(vals + [1.0]))
    D1, D2 = bound_constants(stats, regime, p.T)
    vals = []
    for D in (D1, D2):
        for e in (1.0 / (a - 1.0), 1.0 / (1.0 - a)):
            v = D**e if D > 0 else math.nan
            if math.isfinite(v) and v > 0:
                vals.append(v)
    return ControlBox(R, min(vals + [1.0]) / margin, margin * max(vals + [1.0]))


def auto_box(
    p: FactorPDE,
    grid: Grid,
    cfg: SolverConfig | None = None,
    *,
    R0: float | None = None,
    max_rounds: int = 12,
    factor: float = 2.0,
) -> tuple[ControlBox, SolutionField, ControlField, CertificateReport, list[dict]]:
    """Enlarge the control box until the solved controls never touch it."""
    cfg = cfg or SolverConfig()
    regime = None if p.theta_is_zero else p.regime
    box = initial_box(p, grid, regime, R=R0 if R0 is not None else cfg.box.R)
    trace: list[dict] = []
    for rnd in range(1, max_rounds + 1):
        try:
            sol, ctl = solve(p, grid, cfg.with_box(box))
        except SolverError as exc:
            trace.append({"round": rnd, "box": box.to_dict(), "error": str(exc)})
            raise BoxFixedPointError(f"box fixed point not reached: solver failed in round {rnd}: {exc}", trace) from exc
        rep = certify(sol, ctl, p, regime, box)
        trace.append({"round": rnd, "box": box.to_dict(), "R_hat": rep.R_hat, "m1_hat": rep.m1_hat, "m2_hat": rep.m2_hat, "pass": rep.pass_})
        if rep.pass_:
            return box, sol, ctl, rep, trace
        R, m1, m2 = box.R, box.m1, box.m2
        if ctl.q_clip.any() or rep.R_hat >= R:
            R *= factor
        if regime is not None and not p.theta_is_zero:
            if rep.m2_hat >= m2:
                m2 *= factor
            if regime.regime == "K_NEG" and rep.m1_hat <= m1:
                m1 /= factor
        new = ControlBox(R, m1, m2)
        if new == box:
            raise BoxFixedPointError(
                f"box fixed point not reached: certificate fails with inactive clips (lower_ok={rep.lower_ok}, upper_ok={rep.upper_ok})",
                trace,
            )
        box = new
    raise BoxFixedPointError(f"box fixed point not reached after {max_rounds} rounds", trace)
