"""Power substitutions G -> G^psi between equivalent factor equations.

If G solves the equation with data (Sigma, A, theta, k, h, beta) then
H = G^psi solves the one with

    A_H = (A - (psi - 1) Sigma) / psi,   theta_H = psi^2 theta,
    k_H = 1 + (k - 1) / psi,             h_H = psi h,   beta_H = beta^psi.

``reduce_regime`` uses this with exponent 1/psi, psi = 1/(1 - mu), to trade
an indefinite A for psi (A + mu Sigma), which is positive definite under A3'.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .expr import Expr, const
from .model import MU_GRID, FactorPDE, ModelError, _expand, _min_eig, pde_hash, sample_region
from .solver import SolutionField, gradient_values

__all__ = [
    "FORWARD",
    "INVERSE",
    "RECIPROCAL",
    "TransformRecord",
    "TransformError",
    "power_pde",
    "reduce_regime",
    "reciprocal_pde",
    "apply_power",
    "residual",
    "ResidualReport",
]

FORWARD = "FORWARD"
INVERSE = "INVERSE"
RECIPROCAL = "RECIPROCAL"


class TransformError(ModelError):
    pass


@dataclass(frozen=True)
class TransformRecord:
    """Bookkeeping of a reduction: original = solved ** psi.

    ``xi`` is the exponent of the original equation and ``k_solved`` the one
    of the equation actually solved, so ``xi = 1 + (k_solved - 1) / psi``.
    """

    psi: float
    mu: float
    xi: float
    k_solved: float
    direction: str = FORWARD
    source_hash: str = ""
    target_hash: str = ""
    theta_dropped: bool = False

    def __post_init__(self):
        if self.direction not in (FORWARD, INVERSE, RECIPROCAL):
            raise TransformError(f"unknown direction {self.direction!r}")
        if self.direction != RECIPROCAL and self.psi < 1:
            raise TransformError("psi must be at least 1")

    @property
    def identity(self) -> bool:
        return self.psi == 1.0 and self.direction != RECIPROCAL

    def to_dict(self) -> dict:
        return {
            "psi": self.psi,
            "mu": self.mu,
            "xi": self.xi,
            "k_solved": self.k_solved,
            "direction": self.direction,
            "source_hash": self.source_hash,
            "target_hash": self.target_hash,
            "theta_dropped": self.theta_dropped,
        }


def xi_of(k: float, psi: float) -> float:
    return 1.0 + (k - 1.0) / psi


def _scale_matrix(M, Sigma, a: float, s: float):
    # a * M + s * Sigma, entrywise
    return tuple(tuple(a * M[i][j] + s * Sigma[i][j] for j in range(len(M))) for i in range(len(M)))


def power_pde(p: FactorPDE, psi: float, *, a3_mode: str = "A3") -> FactorPDE:
    """Equation solved by G^psi when G solves ``p`` (psi != 0)."""
    if psi == 0:
        raise TransformError("psi must be non-zero")
    A = _scale_matrix(p.A, p.Sigma, 1.0 / psi, -(psi - 1.0) / psi)
    beta = p.beta if psi == 1 else p.beta ** const(psi)
    return replace(
        p,
        A=A,
        theta=psi * psi * p.theta,
        k=xi_of(p.k, psi),
        h=psi * p.h,
        beta=beta,
        a3_mode=a3_mode,
        mu=None,
    )


def _a3_prime_ok(p: FactorPDE, mu: float, xs: np.ndarray) -> bool:
    M = mu * p.sigma_at(xs) + p.A_at(xs)
    return float(np.min(_min_eig(M))) >= p.ellipticity_eps


def reduce_regime(p: FactorPDE, *, mu: float | None = None, samples: int = 512, seed: int = 0) -> tuple[FactorPDE, TransformRecord]:
    """Return an equation the grid solver accepts plus the map back.

    The original solution is ``solved ** rec.psi``.  Equations already in A3
    with k outside [0, 1] pass through with psi = 1.  Otherwise the smallest
    mu on the fixed grid is chosen such that psi (A + mu Sigma) is elliptic
    and the new exponent 1 + psi (k - 1) lies outside [0, 1].  ``mu`` forces
    a specific grid value instead.
    """
    src = pde_hash(p)
    k = p.k
    theta_zero = p.theta_is_zero
    k_ok = theta_zero or not (0.0 <= k <= 1.0)
    if mu is None and p.a3_mode == "A3" and k_ok:
        return p, TransformRecord(1.0, 0.0, k, k, FORWARD, src, src)

    if p.region is None:
        raise TransformError("regime reduction needs the model region to check A3'")
    xs = sample_region(_expand(p.region), samples, seed)

    drop_theta = False
    if k == 1.0 and not theta_zero:
        warnings.warn("exponent 1 makes the consumption term vanish; solving with theta = 0", stacklevel=2)
        drop_theta = True

    candidates = MU_GRID if mu is None else (float(mu),)
    chosen = None
    for m in candidates:
        if not 0.0 < m < 1.0:
            raise TransformError("mu must lie in (0, 1)")
        psi = 1.0 / (1.0 - m)
        k_new = 1.0 + psi * (k - 1.0)
        if not (theta_zero or drop_theta) and 0.0 <= k_new <= 1.0:
            continue
        if not _a3_prime_ok(p, m, xs):
            continue
        chosen = (m, psi, k_new)
        break
    if chosen is None:
        raise TransformError("no admissible mu on the grid (A3' or the exponent condition fails)")
    m, psi, k_new = chosen
    base = replace(p, theta=const(0.0), k=-1.0) if drop_theta else p
    q = power_pde(base, 1.0 / psi)
    if drop_theta:
        q = replace(q, k=-1.0)
    rec = TransformRecord(psi, m, k, q.k, FORWARD, src, pde_hash(q), drop_theta)
    return q, rec


def reciprocal_pde(p: FactorPDE) -> tuple[FactorPDE, TransformRecord]:
    """Equation solved by 1/G.  A_H = -(A + 2 Sigma) is typically indefinite."""
    q = power_pde(p, -1.0, a3_mode=p.a3_mode)
    q = replace(q, theta=p.theta, mu=p.mu)
    return q, TransformRecord(-1.0, 0.0, p.k, q.k, RECIPROCAL, pde_hash(p), pde_hash(q))


def apply_power(sol: SolutionField, rec: TransformRecord, direction: str | None = None) -> SolutionField:
    """Pointwise power map of a field and its gradient.

    FORWARD raises to ``psi`` (solved -> original), INVERSE to ``1/psi``,
    RECIPROCAL takes 1/G.
    """
    direction = direction or rec.direction
    G = sol.G
    if np.any(~(G > 0)):
        flat = int(np.argmin(np.where(np.isfinite(G), G, -np.inf)))
        idx = np.unravel_index(flat, G.shape)
        raise TransformError(f"non-positive field value {G[idx]:.6g} at grid index {tuple(int(i) for i in idx)}")
    if direction == FORWARD:
        e, new_hash = rec.psi, rec.source_hash
    elif direction == INVERSE:
        e, new_hash = 1.0 / rec.psi, rec.target_hash
    elif direction == RECIPROCAL:
        e, new_hash = -1.0, rec.target_hash
    else:
        raise TransformError(f"unknown direction {direction!r}")
    if e == 1.0:
        H = G.copy()
        dH = sol.dG.copy()
    else:
        H = G**e
        dH = (e * G ** (e - 1.0))[..., None] * sol.dG
    return SolutionField(
        grid=sol.grid,
        G=H,
        dG=dH,
        pde_hash=new_hash or sol.pde_hash,
        config_hash=sol.config_hash,
        iterations=list(sol.iterations),
    )


# --------------------------------------------------------------------------
# residual of the unrestricted equation


@dataclass
class ResidualReport:
    field: np.ndarray  # (nt - 1, *shape), NaN on boundary nodes
    sup: float
    l2: float
    boundary_sup: float

    def to_dict(self) -> dict:
        return {"sup": self.sup, "l2": self.l2, "boundary_sup": self.boundary_sup}


def _second(G: np.ndarray, a: int, h: float) -> np.ndarray:
    """Second derivative along axis ``a`` (of a spatial array); one-sided second order at the ends."""
    out = np.empty_like(G)
    G = np.moveaxis(G, a, 0)
    o = np.moveaxis(out, a, 0)
    o[1:-1] = (G[2:] - 2.0 * G[1:-1] + G[:-2]) / h**2
    o[0] = (2.0 * G[0] - 5.0 * G[1] + 4.0 * G[2] - G[3]) / h**2
    o[-1] = (2.0 * G[-1] - 5.0 * G[-2] + 4.0 * G[-3] - G[-4]) / h**2
    return out


def _operator_terms(p: FactorPDE, X: np.ndarray, G: np.ndarray, dx) -> np.ndarray:
    n = X.shape[-1]
    S = p.sigma_at(X)
    A = p.A_at(X)
    D = np.stack(np.gradient(G, *dx, edge_order=2), axis=-1) if n > 1 else np.gradient(G, dx[0], edge_order=2)[..., None]
    out = np.zeros(G.shape)
    for a in range(n):
        out += 0.5 * S[..., a, a] * _second(G, a, dx[a])
    if n == 2:
        Dxy = np.gradient(D[..., 0], dx[1], axis=1, edge_order=2)
        out += S[..., 0, 1] * Dxy
    out += 0.5 / G * np.einsum("...i,...ij,...j->...", D, A, D)
    if not p.theta_is_zero:
        out += p.theta_at(X) * (1.0 - p.k) * G**p.k
    if p.robust is None:
        out += np.sum(p.b_at(X) * D, axis=-1) + p.h_at(X) * G
    else:
        terms = np.stack([np.sum(p.b_at(X, e) * D, axis=-1) + p.h_at(X, e) * G for e in p.robust.array()])
        out += p.robust.iota * np.min(terms, axis=0)
    return out


def residual(p: FactorPDE, sol: SolutionField) -> ResidualReport:
    """Discrete left-hand side of the factor equation.

    Time levels j = 1..N use (G^j - G^{j-1}) / dt together with the spatial
    operator at level j.  Norms cover interior nodes only; the boundary
    layer is reported separately.
    """
    grid = sol.grid
    if any(m < 4 for m in grid.shape) or grid.nt < 2:
        raise TransformError("residual needs at least 4 nodes per axis and 2 time levels")
    G = sol.G
    if np.any(~(G > 0)):
        raise TransformError("residual needs a positive field")
    X = grid.points()
    dt = grid.dt
    R = np.empty((grid.nt - 1,) + grid.shape)
    for j in range(1, grid.nt):
        R[j - 1] = (G[j] - G[j - 1]) / dt + _operator_terms(p, X, G[j], grid.dx)
    inner = grid.interior_mask()
    vals = R[:, inner]
    cell = dt * math.prod(grid.dx)
    bnd = R[:, ~inner]
    out = np.where(inner[None], R, np.nan)
    return ResidualReport(
        field=out,
        sup=float(np.max(np.abs(vals))),
        l2=float(np.sqrt(np.sum(vals**2) * cell)),
        boundary_sup=float(np.max(np.abs(bnd))) if bnd.size else 0.0,
    )
