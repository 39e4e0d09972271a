"""Investment and consumption fractions from a solved market field, and their
utility under simulated wealth.

For CRRA utility the value function is (v^gamma / gamma) F(x, t) and the
candidate controls are linear in wealth:

    pi / V = a1 / ((1 - gamma) sigma) * F_x / F + lambda / ((1 - gamma) sigma),
    c / V  = F^(1 / (gamma - 1)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import MarketSpec, build_pde_from_market, pde_hash
from .sde import MCConfig, _blocks, _map_blocks, block_rng
from .solver import Grid, SolutionField

__all__ = [
    "PortfolioError",
    "StrategyField",
    "WealthResult",
    "DominanceReport",
    "market_hash",
    "extract_strategy",
    "perturb",
    "standard_perturbations",
    "simulate_wealth",
    "utility_compare",
]


class PortfolioError(ValueError):
    pass


def market_hash(m: MarketSpec) -> str:
    """Hash of the factor equation the market reduces to."""
    return pde_hash(build_pde_from_market(m))


@dataclass
class StrategyField:
    grid: Grid
    pi_frac: np.ndarray  # (nt, nx)
    c_frac: np.ndarray  # (nt, nx)
    field_hash: str
    market_hash: str
    label: str = "candidate"

    def __post_init__(self):
        if not (np.all(np.isfinite(self.pi_frac)) and np.all(np.isfinite(self.c_frac))):
            raise PortfolioError("strategy fractions must be finite")
        if np.any(self.c_frac <= 0):
            raise PortfolioError("consumption fraction must be positive")

    def lookup(self, t: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = self.grid
        j = int(min(max(math.floor(t / g.dt + 1e-9), 0), g.nt - 1))
        lo, hi, m = g.axes[0]
        u = (np.clip(x, lo, hi) - lo) * (1.0 / g.dx[0])
        k = np.minimum(u.astype(np.int64), m - 2)
        w = u - k
        p, c = self.pi_frac[j], self.c_frac[j]
        p0, c0 = p.take(k), c.take(k)
        return p0 + w * (p.take(k + 1) - p0), c0 + w * (c.take(k + 1) - c0)

    def rows(self):
        xs = self.grid.coords(0)
        for j, t in enumerate(self.grid.times):
            for i, x in enumerate(xs):
                yield float(t), float(x), float(self.pi_frac[j, i]), float(self.c_frac[j, i])


def extract_strategy(sol: SolutionField, m: MarketSpec) -> StrategyField:
    """Candidate fractions from the field F solving the market's equation."""
    expected = market_hash(m)
    if sol.pde_hash != expected:
        raise PortfolioError(f"field hash {sol.pde_hash} does not match the market ({expected})")
    if sol.grid.n != 1:
        raise PortfolioError("market strategies need a one-dimensional factor")
    g = m.gamma
    X = sol.grid.points()
    sig = m.sigma_stock(X)
    lam = m.market_price_of_risk(X)
    a1 = m.a1(X)
    F = sol.G
    dF = sol.dG[..., 0]
    pi = a1 / ((1.0 - g) * sig) * dF / F + lam / ((1.0 - g) * sig)
    pi = np.broadcast_to(pi, F.shape).copy()
    c = F ** (1.0 / (g - 1.0))
    return StrategyField(sol.grid, pi, c, sol.pde_hash, expected)


def perturb(s: StrategyField, *, pi_scale: float = 1.0, pi_shift: float = 0.0, c_scale: float = 1.0, label: str = "") -> StrategyField:
    return StrategyField(
        s.grid,
        s.pi_frac * pi_scale + pi_shift,
        s.c_frac * c_scale,
        s.field_hash,
        s.market_hash,
        label or f"pi*{pi_scale}+{pi_shift}, c*{c_scale}",
    )


def standard_perturbations(s: StrategyField) -> list[StrategyField]:
    return [
        perturb(s, pi_scale=0.5, label="pi*0.5"),
        perturb(s, pi_scale=1.5, label="pi*1.5"),
        perturb(s, c_scale=0.5, label="c*0.5"),
        perturb(s, c_scale=2.0, label="c*2"),
        perturb(s, pi_shift=0.1, label="pi+0.1"),
    ]


@dataclass
class WealthResult:
    V_T: np.ndarray
    objective: np.ndarray  # per path
    mean: float
    std_error: float
    paths: np.ndarray | None = None


def simulate_wealth(
    m: MarketSpec,
    s: StrategyField,
    v0: float,
    x0: float,
    t0: float,
    cfg: MCConfig,
) -> WealthResult:
    """Joint Euler simulation of factor and log-wealth under fixed fractions."""
    if not v0 > 0:
        raise PortfolioError("initial wealth must be positive")
    if not 0 <= t0 < m.T:
        raise PortfolioError("t0 must lie in [0, T)")
    g = m.gamma
    K = cfg.steps
    dt = (m.T - t0) / K
    sq = math.sqrt(dt)
    B = cfg.block
    store = cfg.store_paths
    lv0 = math.log(v0)

    def run(block, start, count):
        rng = block_rng(cfg.seed, block)
        X = np.full(B, float(x0))
        LV = np.full(B, lv0)
        util = np.zeros(B)
        traj = np.empty((B, K + 1)) if store else None
        if store:
            traj[:, 0] = np.exp(LV)
        for k in range(K):
            t = t0 + k * dt
            xs = X[:, None]
            r = np.broadcast_to(m.r(xs), (B,))
            bs = np.broadcast_to(m.b_stock(xs), (B,))
            sig = np.broadcast_to(m.sigma_stock(xs), (B,))
            pf, cf = s.lookup(t, X)
            # consumption utility at the left endpoint
            util += math.exp(-m.w * (t - t0)) * np.exp(g * LV) * cf**g * dt
            dW = rng.standard_normal((B, 2)) * sq
            LV = LV + (r + pf * (bs - r) - cf - 0.5 * (pf * sig) ** 2) * dt + pf * sig * dW[:, 0]
            X = X + np.broadcast_to(m.g(xs), (B,)) * dt + np.broadcast_to(m.a1(xs), (B,)) * dW[:, 0] + np.broadcast_to(m.a2(xs), (B,)) * dW[:, 1]
            if store:
                traj[:, k + 1] = np.exp(LV)
        VT = np.exp(LV)
        obj = (util + math.exp(-m.w * (m.T - t0)) * VT**g) / g
        sl = slice(0, count)
        return VT[sl], obj[sl], traj[sl] if store else None

    parts = _map_blocks(run, _blocks(cfg.paths, B), cfg.threads)
    VT = np.concatenate([r[0] for r in parts])
    obj = np.concatenate([r[1] for r in parts])
    if not np.all(np.isfinite(obj)):
        raise PortfolioError("non-finite realized utility")
    se = float(np.std(obj, ddof=1) / math.sqrt(obj.size)) if obj.size > 1 else 0.0
    return WealthResult(VT, obj, float(obj.mean()), se, np.concatenate([r[2] for r in parts]) if store else None)


@dataclass
class DominanceReport:
    candidate_mean: float
    candidate_std_error: float
    rows: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "candidate_mean": self.candidate_mean,
            "candidate_std_error": self.candidate_std_error,
            "pass": self.passed,
            "rows": self.rows,
        }


def utility_compare(
    m: MarketSpec,
    s: StrategyField,
    perturbations,
    cfg: MCConfig,
    *,
    v0: float = 1.0,
    x0: float = 0.0,
    t0: float = 0.0,
    z_max: float = 3.0,
) -> DominanceReport:
    """Paired (common random numbers) utility differences candidate - perturbation."""
    base = simulate_wealth(m, s, v0, x0, t0, cfg)
    rep = DominanceReport(base.mean, base.std_error)
    for alt in perturbations:
        if alt.market_hash != s.market_hash:
            raise PortfolioError("perturbation belongs to a different market")
        other = simulate_wealth(m, alt, v0, x0, t0, cfg)
        d = base.objective - other.objective
        se = float(np.std(d, ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
        diff = float(d.mean())
        rep.rows.append(
            {
                "label": alt.label,
                "mean": other.mean,
                "difference": diff,
                "paired_std_error": se,
                "passed": bool(diff >= -z_max * se),
            }
        )
    return rep
