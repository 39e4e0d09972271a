"""Monte Carlo estimators that check solved fields without touching solver internals.

Only exported objects (SolutionField, ControlField) are read; the
simulation path shares no code with the finite-difference operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .certify import BoundStats, bound_constants
from .model import AlphaRegime, FactorPDE, validate
from .sde import AdversarialPolicy, FieldPolicy, MCConfig, PairedBundle, PathBundle, simulate, simulate_paired
from .solver import ControlField, SolutionField

__all__ = [
    "OracleError",
    "VerifyConfig",
    "PointCheck",
    "VerificationReport",
    "LipschitzReport",
    "feynman_kac_value",
    "verify_solution",
    "estimate_lipschitz",
    "bound_estimates",
    "lipschitz_suite",
]


class OracleError(ValueError):
    pass


def feynman_kac_value(bundle: PathBundle, p: FactorPDE | None = None, regime: AlphaRegime | None = None) -> tuple[float, float]:
    """Mean and standard error of the per-path representation samples.

    The bundle already carries the running payoff weighted by the model's
    consumption weight; ``p`` and ``regime`` are accepted for symmetry.
    """
    if bundle.M == 0:
        raise OracleError("empty bundle")
    v = bundle.values()
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(np.mean(v)), se


@dataclass(frozen=True)
class VerifyConfig:
    mc: MCConfig = MCConfig()
    rel_tol: float = 5e-3
    z_max: float = 3.0
    bias_paths: int = 16384

    def __post_init__(self):
        if self.bias_paths < 2:
            raise OracleError("bias_paths must be at least 2")
        if self.mc.steps < 2 or self.mc.steps % 2:
            raise OracleError("the bias estimate needs an even step count")


@dataclass
class PointCheck:
    x: list[float]
    t: float
    pde: float
    mc: float  # plain K-step estimate
    std_error: float
    bias: float  # mean of K-step minus K/2-step samples on common noise
    bias_std_error: float
    mc_extrapolated: float
    std_error_extrapolated: float
    field_error: float  # grid-error estimate of the PDE value
    gap: float  # pde - mc_extrapolated
    z: float  # gap over the combined sampling and grid uncertainty
    z_stat: float  # gap over the sampling error alone
    z_plain: float  # un-extrapolated estimate over its sampling error
    clamped_fraction: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class VerificationReport:
    points: list[PointCheck] = field(default_factory=list)
    paths: int = 0
    steps: int = 0
    seed: int = 0

    @property
    def passed(self) -> bool:
        return all(pt.passed for pt in self.points)

    @property
    def max_abs_z(self) -> float:
        return max((abs(pt.z) for pt in self.points), default=0.0)

    def to_dict(self) -> dict:
        return {
            "paths": self.paths,
            "steps": self.steps,
            "seed": self.seed,
            "pass": self.passed,
            "max_abs_z": self.max_abs_z,
            "points": [pt.to_dict() for pt in self.points],
        }


def verify_solution(
    sol: SolutionField,
    controls: ControlField,
    p: FactorPDE,
    points,
    cfg: VerifyConfig | None = None,
    *,
    field_error: float | np.ndarray | None = None,
) -> VerificationReport:
    """Simulate under the field's own argmax policy and compare with the field.

    The Euler estimate is Richardson-extrapolated in the step size: the
    first ``bias_paths`` paths are re-run with K/2 steps on the same noise and
    the mean difference is added back, which removes the first-order weak
    error.  ``z_stat`` is the gap over the standard error of that estimator;
    ``z`` also folds in ``field_error``, the grid error of the PDE value.
    """
    cfg = cfg or VerifyConfig()
    if not points:
        raise OracleError("need at least one sample point")
    grid = sol.grid
    policy = FieldPolicy(controls)
    rep = VerificationReport(paths=cfg.mc.paths, steps=cfg.mc.steps, seed=cfg.mc.seed)
    ferr = np.zeros(len(points)) if field_error is None else np.broadcast_to(np.asarray(field_error, float), (len(points),))
    for i, (x, t) in enumerate(points):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        for a, (lo, hi, _) in enumerate(grid.axes):
            if not lo < x[a] < hi:
                raise OracleError(f"point {x.tolist()} outside the grid interior")
        if not 0 <= t < grid.T:
            raise OracleError(f"time {t} outside [0, T)")
        pde = sol.value_at(x, t)
        bundle = simulate(p, policy, x, t, cfg.mc)
        est, se = feynman_kac_value(bundle)
        M = bundle.M
        nb = min(cfg.bias_paths, M)
        coarse = simulate(p, policy, x, t, replace(cfg.mc, paths=nb, steps=cfg.mc.steps // 2, substeps=2 * cfg.mc.substeps, store_paths=False))
        v = bundle.values()
        diff = v[:nb] - coarse.values()
        bias = float(np.mean(diff))
        se_b = float(np.std(diff, ddof=1) / math.sqrt(nb))
        # per-path terms of est + bias are independent across paths
        head = v[:nb] / M + diff / nb
        var = float(np.var(head, ddof=1)) * nb
        if M > nb:
            var += float(np.var(v[nb:], ddof=1)) * (M - nb) / M**2 if M - nb > 1 else 0.0
        ext = est + bias
        se_x = math.sqrt(var)
        gap = pde - ext
        z = _ratio(gap, math.hypot(se_x, float(ferr[i])))
        ok = abs(z) <= cfg.z_max and abs(gap) <= cfg.rel_tol * abs(pde)
        rep.points.append(
            PointCheck(
                x=x.tolist(),
                t=float(t),
                pde=pde,
                mc=est,
                std_error=se,
                bias=bias,
                bias_std_error=se_b,
                mc_extrapolated=ext,
                std_error_extrapolated=se_x,
                field_error=float(ferr[i]),
                gap=gap,
                z=z,
                z_stat=_ratio(gap, se_x),
                z_plain=_ratio(pde - est, se),
                clamped_fraction=bundle.clamped_fraction,
                passed=bool(ok),
            )
        )
    return rep


def _ratio(gap: float, se: float) -> float:
    # deterministic functionals: agreement to rounding counts as z = 0
    if se > 1e-12 * max(1.0, abs(gap)):
        return gap / se
    return 0.0 if abs(gap) <= 1e-9 else math.copysign(math.inf, gap)


def estimate_lipschitz(paired: PairedBundle) -> tuple[float, float]:
    """Mean of sup_k e^{-1/2 int |q|^2} |dX_k| / |dx_0| and its standard error."""
    if not paired.dx0 > 0:
        raise OracleError("initial gap must be non-zero")
    r = paired.gap_sup / paired.dx0
    se = float(np.std(r, ddof=1) / math.sqrt(r.size)) if r.size > 1 else 0.0
    return float(np.mean(r)), se


def bound_estimates(
    p: FactorPDE,
    regime: AlphaRegime | None = None,
    *,
    region=None,
    samples: int = 1000,
    seed: int = 0,
    m2: float | None = None,
) -> tuple[float, float]:
    """Explicit bounds from sampled coefficient ranges (region plus margin)."""
    rep = validate(p, region, samples, seed, strict=False)
    if regime is None and not p.theta_is_zero:
        regime = p.regime
    if regime is None or p.theta_is_zero:
        stats = BoundStats(rep.sup_abs_h, 0.0, 0.0, rep.inf_beta, rep.sup_beta)
    else:
        w = float(regime.hjb_weight(1.0))
        stats = BoundStats(rep.sup_abs_h, w * rep.sup_theta, w * rep.inf_theta, rep.inf_beta, rep.sup_beta)
    return bound_constants(stats, regime, p.T, m2)


@dataclass
class LipschitzReport:
    radii: list[float]
    estimates: list[float]
    std_errors: list[float]
    pooled_std_error: float
    spread: float
    ceiling: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def lipschitz_suite(
    p: FactorPDE,
    x0,
    xbar0,
    cfg: MCConfig,
    *,
    L_b: float,
    radii=(1.0, 5.0, 25.0),
    t0: float = 0.0,
) -> LipschitzReport:
    """Adversarial |q| = R paired estimates for several radii."""
    est, ses = [], []
    for R in radii:
        pb = simulate_paired(p, AdversarialPolicy(R, p.n), x0, xbar0, t0, cfg)
        m, s = estimate_lipschitz(pb)
        est.append(m)
        ses.append(s)
    pooled = math.sqrt(sum(s * s for s in ses))
    spread = max(est) - min(est)
    ceiling = math.exp(L_b * (p.T - t0))
    ok = spread <= 3 * pooled and all(e <= ceiling + 3 * s for e, s in zip(est, ses))
    return LipschitzReport(list(map(float, radii)), est, ses, pooled, spread, ceiling, bool(ok))
