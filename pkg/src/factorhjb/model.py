"""Coefficient bundles for the factor PDE and the one-factor market.

A :class:`FactorPDE` holds the data of the terminal-value problem

    G_t + 1/2 Tr(Sigma D^2 G) + 1/(2G) DG' A DG + b'DG + theta (1-k) G^k + h G = 0,
    G(x, T) = beta(x),

with optional robust data (finite parameter set and sign) and a
state-dependent ``theta``.  All coefficients are :class:`~factorhjb.expr.Expr`
trees in the variables ``x1..xn`` (and ``eta1..etal`` in robust mode).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import qmc

from .expr import Expr, as_expr, const

__all__ = [
    "MU_GRID",
    "RobustSet",
    "FactorPDE",
    "MarketSpec",
    "AlphaRegime",
    "ValidationReport",
    "AssumptionError",
    "ModelError",
    "build_pde_from_market",
    "validate",
    "pde_hash",
    "sample_region",
]

MU_GRID: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(1, 20))
REGION_MARGIN = 0.2


class ModelError(ValueError):
    """Invalid or degenerate model specification."""


class AssumptionError(ModelError):
    """A sampled standing assumption failed; ``report`` holds the details."""

    def __init__(self, message: str, report: "ValidationReport | None" = None):
        super().__init__(message)
        self.report = report


Region = tuple[tuple[float, float], ...]


def _as_region(region) -> Region:
    out = tuple((float(lo), float(hi)) for lo, hi in region)
    for lo, hi in out:
        if not hi > lo:
            raise ModelError(f"degenerate region axis [{lo}, {hi}]")
    return out


def _expand(region: Region, margin: float = REGION_MARGIN) -> Region:
    return tuple(
        (0.5 * (lo + hi) - (1 + margin) * 0.5 * (hi - lo), 0.5 * (lo + hi) + (1 + margin) * 0.5 * (hi - lo))
        for lo, hi in region
    )


def sample_region(region: Region, samples: int, seed: int) -> np.ndarray:
    """Corners followed by a scrambled Halton sequence.

    The sequence is prefix-stable: the first ``m`` points of a request for
    ``m' > m`` samples coincide with a request for ``m`` samples.
    """
    region = _as_region(region)
    n = len(region)
    lo = np.array([r[0] for r in region])
    hi = np.array([r[1] for r in region])
    corners = np.array(np.meshgrid(*[[a, b] for a, b in region], indexing="ij")).reshape(n, -1).T
    engine = qmc.Halton(d=n, scramble=True, seed=seed)
    pts = lo + (hi - lo) * engine.random(samples)
    return np.vstack([corners, pts])


@dataclass(frozen=True)
class RobustSet:
    """Finite ambiguity set and the sign selecting min (+1) or max (-1)."""

    points: tuple[tuple[float, ...], ...]
    iota: int = 1

    def __post_init__(self):
        if len(self.points) == 0:
            raise ModelError("robust set is empty")
        if self.iota not in (-1, 1):
            raise ModelError("iota must be -1 or +1")
        dims = {len(p) for p in self.points}
        if len(dims) != 1:
            raise ModelError("robust points have inconsistent dimension")

    @property
    def dim(self) -> int:
        return len(self.points[0])

    def array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)


def _scalar_expr(v) -> Expr:
    return as_expr(v)


def _vector_expr(v, n: int) -> tuple[Expr, ...]:
    if isinstance(v, (str, int, float, Expr)):
        if n != 1:
            raise ModelError("vector coefficient needs n entries")
        return (as_expr(v),)
    out = tuple(as_expr(e) for e in v)
    if len(out) != n:
        raise ModelError(f"expected {n} entries, got {len(out)}")
    return out


def _matrix_expr(v, n: int) -> tuple[tuple[Expr, ...], ...]:
    if isinstance(v, (str, int, float, Expr)):
        if n == 1:
            return ((as_expr(v),),)
        # a scalar multiple of the identity
        e = as_expr(v)
        return tuple(tuple(e if i == j else const(0.0) for j in range(n)) for i in range(n))
    rows = tuple(tuple(as_expr(e) for e in row) for row in v)
    if len(rows) != n or any(len(r) != n for r in rows):
        raise ModelError(f"expected an {n}x{n} matrix")
    return rows


def _eval_matrix(M: tuple[tuple[Expr, ...], ...], x: np.ndarray) -> np.ndarray:
    n = len(M)
    out = np.empty(x.shape[:-1] + (n, n))
    for i in range(n):
        for j in range(n):
            out[..., i, j] = M[i][j](x)
    return out


@dataclass(frozen=True)
class FactorPDE:
    """Coefficients of the semilinear factor equation (immutable)."""

    n: int
    Sigma: tuple[tuple[Expr, ...], ...]
    A: tuple[tuple[Expr, ...], ...]
    b: tuple[Expr, ...]
    h: Expr
    theta: Expr
    k: float
    beta: Expr
    T: float
    ellipticity_eps: float = 1e-3
    a3_mode: str = "A3"
    mu: float | None = None
    robust: RobustSet | None = None
    region: Region | None = None
    name: str = ""

    def __post_init__(self):
        if self.n < 1:
            raise ModelError("n must be positive")
        if not self.T > 0:
            raise ModelError("horizon T must be positive")
        if self.a3_mode not in ("A3", "A3_PRIME"):
            raise ModelError(f"unknown a3_mode {self.a3_mode!r}")
        if self.a3_mode == "A3_PRIME" and self.mu is not None and not 0 < self.mu < 1:
            raise ModelError("A3_PRIME needs mu in (0, 1)")
        if not self.ellipticity_eps > 0:
            raise ModelError("ellipticity_eps must be positive")
        nvars = max(
            [e.max_index("x") for e in self.all_exprs()] + [0]
        )
        if nvars > self.n:
            raise ModelError(f"coefficient references x{nvars} but n = {self.n}")
        neta = max([e.max_index("eta") for e in self.all_exprs()] + [0])
        if neta and self.robust is None:
            raise ModelError("coefficients reference eta but no robust set is given")
        if self.robust is not None and neta > self.robust.dim:
            raise ModelError("coefficients reference more eta components than the robust set has")

    @classmethod
    def build(cls, *, n: int, Sigma, A, b, h, theta, k, beta, T, region=None, robust=None, **kw) -> "FactorPDE":
        """Construct from strings / numbers / nested lists."""
        if robust is not None and not isinstance(robust, RobustSet):
            pts, iota = robust
            robust = RobustSet(tuple(tuple(float(v) for v in np.atleast_1d(p)) for p in pts), int(iota))
        return cls(
            n=int(n),
            Sigma=_matrix_expr(Sigma, n),
            A=_matrix_expr(A, n),
            b=_vector_expr(b, n),
            h=_scalar_expr(h),
            theta=_scalar_expr(theta),
            k=float(k),
            beta=_scalar_expr(beta),
            T=float(T),
            region=_as_region(region) if region is not None else None,
            robust=robust,
            **kw,
        )

    def all_exprs(self) -> Iterable[Expr]:
        for row in self.Sigma:
            yield from row
        for row in self.A:
            yield from row
        yield from self.b
        yield self.h
        yield self.theta
        yield self.beta

    # -- evaluation -------------------------------------------------------
    def sigma_at(self, x) -> np.ndarray:
        return _eval_matrix(self.Sigma, np.asarray(x, float))

    def A_at(self, x) -> np.ndarray:
        return _eval_matrix(self.A, np.asarray(x, float))

    def b_at(self, x, eta=None) -> np.ndarray:
        x = np.asarray(x, float)
        return np.stack([e(x, eta) for e in self.b], axis=-1)

    def h_at(self, x, eta=None) -> np.ndarray:
        return self.h(np.asarray(x, float), eta)

    def theta_at(self, x) -> np.ndarray:
        return self.theta(np.asarray(x, float))

    def beta_at(self, x) -> np.ndarray:
        return self.beta(np.asarray(x, float))

    @property
    def theta_is_zero(self) -> bool:
        return self.theta.is_const and float(self.theta.value) == 0.0

    @property
    def regime(self) -> "AlphaRegime":
        return AlphaRegime.from_k(self.k)

    def to_dict(self) -> dict:
        d = {
            "n": self.n,
            "Sigma": [[str(e) for e in row] for row in self.Sigma],
            "A": [[str(e) for e in row] for row in self.A],
            "b": [str(e) for e in self.b],
            "h": str(self.h),
            "theta": str(self.theta),
            "k": self.k,
            "beta": str(self.beta),
            "T": self.T,
            "ellipticity_eps": self.ellipticity_eps,
            "a3_mode": self.a3_mode,
            "mu": self.mu,
        }
        if self.robust is not None:
            d["robust"] = {"points": [list(p) for p in self.robust.points], "iota": self.robust.iota}
        if self.region is not None:
            d["region"] = [list(r) for r in self.region]
        return d

    def replace(self, **changes) -> "FactorPDE":
        return replace(self, **changes)


def pde_hash(p: FactorPDE) -> str:
    blob = json.dumps(p.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class AlphaRegime:
    """Exponent of the consumption Hamiltonian, alpha/(alpha-1) = k."""

    alpha: float
    regime: str  # "K_NEG" or "K_GT1"

    @classmethod
    def from_k(cls, k: float) -> "AlphaRegime":
        k = float(k)
        if 0.0 <= k <= 1.0:
            raise ModelError(f"k = {k} lies in [0, 1]; reduce the regime first")
        alpha = k / (k - 1.0)
        return cls(alpha, "K_NEG" if k < 0 else "K_GT1")

    @property
    def k(self) -> float:
        return self.alpha / (self.alpha - 1.0)

    def hjb_weight(self, theta):
        """Weight in front of the restricted max: theta / (1 - alpha)^2."""
        return np.asarray(theta, dtype=float) / (1.0 - self.alpha) ** 2


@dataclass(frozen=True)
class MarketSpec:
    """One stock, one bank account and a scalar factor with two noise loadings."""

    r: Expr
    b_stock: Expr
    sigma_stock: Expr
    g: Expr
    a1: Expr
    a2: Expr
    gamma: float
    w: float = 0.0
    T: float = 1.0
    region: Region | None = None
    name: str = ""

    @classmethod
    def build(cls, *, r, b_stock, sigma_stock, g, a1, a2, gamma, w=0.0, T=1.0, region=None, name="") -> "MarketSpec":
        return cls(
            r=as_expr(r),
            b_stock=as_expr(b_stock),
            sigma_stock=as_expr(sigma_stock),
            g=as_expr(g),
            a1=as_expr(a1),
            a2=as_expr(a2),
            gamma=float(gamma),
            w=float(w),
            T=float(T),
            region=_as_region(region) if region is not None else None,
            name=name,
        )

    @property
    def market_price_of_risk(self) -> Expr:
        return (self.b_stock - self.r) / self.sigma_stock

    def to_dict(self) -> dict:
        d = {
            "r": str(self.r),
            "b_stock": str(self.b_stock),
            "sigma_stock": str(self.sigma_stock),
            "g": str(self.g),
            "a1": str(self.a1),
            "a2": str(self.a2),
            "gamma": self.gamma,
            "w": self.w,
            "T": self.T,
        }
        if self.region is not None:
            d["region"] = [list(r) for r in self.region]
        return d


def _min_eig(M: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, -1, -2)))[..., 0]


def build_pde_from_market(
    m: MarketSpec,
    region=None,
    *,
    eps: float = 1e-2,
    samples: int = 512,
    seed: int = 0,
) -> FactorPDE:
    """Reduce the CRRA factor market to the factor equation.

    ``theta`` is returned in the equation's own normalization, (1 - gamma)^2,
    so that theta (1 - k) = 1 - gamma.
    """
    g = m.gamma
    if g == 0.0 or g >= 1.0:
        raise ModelError(f"gamma = {g} is degenerate (need gamma < 1, gamma != 0)")
    region = region if region is not None else m.region
    if region is None:
        raise ModelError("market reduction needs a sampling region")
    region = _as_region(region)
    if len(region) != 1:
        raise ModelError("market reduction needs a one-dimensional sampling region")

    xs = sample_region(_expand(region), samples, seed)
    sig = m.sigma_stock(xs)
    if np.min(sig) <= 0:
        i = int(np.argmin(sig))
        raise ModelError(f"stock volatility not positive at x={xs[i].tolist()}")
    lam = m.market_price_of_risk
    if not np.all(np.isfinite(lam(xs))):
        raise ModelError("market price of risk is not finite on the sampling region")

    Sigma = m.a1**2 + m.a2**2
    A = (g / (1.0 - g)) * m.a1**2
    drift = m.g + (g / (1.0 - g)) * m.a1 * lam
    h = (g / (2.0 * (1.0 - g))) * lam**2 + g * m.r - m.w
    k = g / (g - 1.0)
    theta = (1.0 - g) ** 2

    sig_vals = Sigma(xs)
    if np.min(sig_vals) < eps:
        i = int(np.argmin(sig_vals))
        raise ModelError(f"ellipticity fails: a1^2 + a2^2 = {sig_vals[i]:.3g} < {eps} at x={xs[i].tolist()}")
    A_vals = A(xs)
    mode, mu = "A3", None
    if np.min(A_vals) < eps:
        mode = "A3_PRIME"
        for cand in MU_GRID:
            if np.min(cand * sig_vals + A_vals) >= eps:
                mu = cand
                break
        if mu is None:
            i = int(np.argmin(0.95 * sig_vals + A_vals))
            raise ModelError(f"no mu on the grid satisfies A3' (worst x={xs[i].tolist()})")

    return FactorPDE(
        n=1,
        Sigma=((Sigma,),),
        A=((A,),),
        b=(drift,),
        h=h,
        theta=const(theta),
        k=k,
        beta=const(1.0),
        T=m.T,
        ellipticity_eps=eps,
        a3_mode=mode,
        mu=mu,
        region=region,
        name=m.name,
    )


@dataclass
class ValidationReport:
    """Sampled spot-check of the standing assumptions."""

    samples: int
    seed: int
    region: Region
    lipschitz: dict[str, float] = field(default_factory=dict)
    sup_abs_h: float = math.nan
    sup_theta: float = math.nan
    inf_theta: float = math.nan
    inf_beta: float = math.nan
    sup_beta: float = math.nan
    min_eig_sigma: float = math.nan
    min_eig_A: float = math.nan
    min_eig_mu_sigma_A: float | None = None
    max_asymmetry: float = 0.0
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "seed": self.seed,
            "region": [list(r) for r in self.region],
            "lipschitz": dict(sorted(self.lipschitz.items())),
            "sup_abs_h": self.sup_abs_h,
            "sup_theta": self.sup_theta,
            "inf_theta": self.inf_theta,
            "inf_beta": self.inf_beta,
            "sup_beta": self.sup_beta,
            "min_eig_sigma": self.min_eig_sigma,
            "min_eig_A": self.min_eig_A,
            "min_eig_mu_sigma_A": self.min_eig_mu_sigma_A,
            "max_asymmetry": self.max_asymmetry,
            "violations": list(self.violations),
            "passed": self.passed,
        }


def _lip(f_x: np.ndarray, f_y: np.ndarray, dist: np.ndarray) -> float:
    diff = np.abs(f_x - f_y)
    if diff.ndim > 1:
        diff = np.sqrt(np.sum(diff.reshape(diff.shape[0], -1) ** 2, axis=1))
    return float(np.max(diff / dist))


def validate(
    p: FactorPDE,
    region=None,
    samples: int = 1000,
    seed: int = 0,
    *,
    margin: float = REGION_MARGIN,
    strict: bool = True,
) -> ValidationReport:
    """Spot-check A1-A4 (or A1', A3') on quasi-random samples.

    The region is enlarged by ``margin`` on every axis.  With ``strict`` the
    first violated assumption is raised as :class:`AssumptionError`.
    """
    region = region if region is not None else p.region
    if region is None:
        raise ModelError("validation needs a region")
    region = _as_region(region)
    if len(region) != p.n:
        raise ModelError("region dimension does not match n")
    box = _expand(region, margin)
    xs = sample_region(box, samples, seed)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(xs.shape)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    width = float(np.mean([hi - lo for lo, hi in box]))
    delta = 1e-4 * width
    ys = xs + delta * u
    dist = np.full(xs.shape[0], delta)

    rep = ValidationReport(samples=samples, seed=seed, region=region)
    eps = p.ellipticity_eps
    etas = [None] if p.robust is None else [np.asarray(e) for e in p.robust.points]

    def where(i):
        return [round(v, 6) for v in xs[i].tolist()]

    # A1 / A1'
    lb, lh = 0.0, 0.0
    hs = []
    for eta in etas:
        lb = max(lb, _lip(p.b_at(xs, eta), p.b_at(ys, eta), dist))
        hv = p.h_at(xs, eta)
        hs.append(hv)
        lh = max(lh, _lip(hv, p.h_at(ys, eta), dist))
    hs = np.stack(hs)
    rep.lipschitz["b"] = lb
    rep.lipschitz["h"] = lh
    rep.sup_abs_h = float(np.max(np.abs(hs)))
    if not (np.isfinite(lb) and np.isfinite(lh) and np.all(np.isfinite(hs))):
        rep.violations.append("A1: b or h is not finite/Lipschitz on the sampled region")

    # A2
    bx = p.beta_at(xs)
    rep.inf_beta = float(np.min(bx))
    rep.sup_beta = float(np.max(bx))
    rep.lipschitz["beta"] = _lip(bx, p.beta_at(ys), dist)
    if not np.all(np.isfinite(bx)):
        rep.violations.append("A2: beta is not finite on the sampled region")
    elif rep.inf_beta < eps:
        i = int(np.argmin(bx))
        rep.violations.append(
            f"A2: inf beta = {rep.inf_beta:.6g} at x={where(i)}; beta must be bounded away from zero (eps={eps})"
        )

    # A3 / A3'
    S = p.sigma_at(xs)
    A = p.A_at(xs)
    asym = 0.0
    for M in (S, A):
        scale = max(1.0, float(np.max(np.abs(M))))
        asym = max(asym, float(np.max(np.abs(M - np.swapaxes(M, -1, -2)))) / scale)
    rep.max_asymmetry = asym
    if asym > 1e-12:
        rep.violations.append(f"A3: Sigma or A is not symmetric (max asymmetry {asym:.3g})")
    eS, eA = _min_eig(S), _min_eig(A)
    rep.min_eig_sigma = float(np.min(eS))
    rep.min_eig_A = float(np.min(eA))
    rep.lipschitz["Sigma"] = _lip(S, p.sigma_at(ys), dist)
    rep.lipschitz["A"] = _lip(A, p.A_at(ys), dist)
    if rep.min_eig_sigma < eps:
        i = int(np.argmin(eS))
        rep.violations.append(f"A3: min eigenvalue of Sigma = {rep.min_eig_sigma:.6g} < eps at x={where(i)}")
    if p.a3_mode == "A3":
        if rep.min_eig_A < eps:
            i = int(np.argmin(eA))
            rep.violations.append(f"A3: min eigenvalue of A = {rep.min_eig_A:.6g} < eps at x={where(i)}")
    else:
        if p.mu is None:
            rep.violations.append("A3': mode A3_PRIME requires mu")
        else:
            eM = _min_eig(p.mu * S + A)
            rep.min_eig_mu_sigma_A = float(np.min(eM))
            if rep.min_eig_mu_sigma_A < eps:
                i = int(np.argmin(eM))
                rep.violations.append(
                    f"A3': min eigenvalue of mu*Sigma + A = {rep.min_eig_mu_sigma_A:.6g} < eps at x={where(i)}"
                )

    # A4
    th = p.theta_at(xs)
    rep.sup_theta = float(np.max(th))
    rep.inf_theta = float(np.min(th))
    rep.lipschitz["theta"] = _lip(th, p.theta_at(ys), dist)
    if not np.all(np.isfinite(th)):
        rep.violations.append("A4: theta is not finite on the sampled region")
    elif rep.inf_theta < 0:
        i = int(np.argmin(th))
        rep.violations.append(f"A4: theta = {rep.inf_theta:.6g} is negative at x={where(i)}")

    if strict and rep.violations:
        raise AssumptionError(rep.violations[0], rep)
    return rep
