"""Backward policy-iteration solver for the restricted-control HJB equation.

Each time step freezes the controls at the current argmax, solves the
resulting linear implicit system and repeats until the iterates stop moving
(Howard's algorithm).  Diffusion uses a monotone stencil with upwinding of
the drift where central differences would break the M-matrix property, so
positivity of G is preserved for small enough steps.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve

from .hamiltonian import ControlBox, optimal_c, optimal_q
from .linalg import SPDError, batch_sqrt
from .model import AlphaRegime, FactorPDE, pde_hash

__all__ = [
    "Grid",
    "SolverConfig",
    "SolutionField",
    "ControlField",
    "SolverError",
    "PositivityError",
    "PolicyIterationStalled",
    "solve",
    "gradient",
]

log = logging.getLogger(__name__)

NEUMANN_ZERO = "NEUMANN_ZERO"
DIRICHLET_FROZEN = "DIRICHLET_FROZEN"
MIN_NODES = 16


class SolverError(RuntimeError):
    """Grid solve failed."""


class PositivityError(SolverError):
    pass


class PolicyIterationStalled(SolverError):
    def __init__(self, message: str, change: float, residual: float | None = None):
        super().__init__(message)
        self.change = change
        self.residual = residual


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on a box with ``nt`` time levels over [0, T]."""

    axes: tuple[tuple[float, float, int], ...]
    nt: int
    T: float

    def __post_init__(self):
        if len(self.axes) not in (1, 2):
            raise SolverError(f"n > 2 unsupported by the grid solver (n = {len(self.axes)}); use the Monte Carlo oracle")
        for lo, hi, m in self.axes:
            if not hi > lo:
                raise SolverError(f"degenerate axis [{lo}, {hi}]")
            if m < MIN_NODES:
                raise SolverError(f"need at least {MIN_NODES} nodes per axis, got {m}")
        if self.nt < MIN_NODES:
            raise SolverError(f"need at least {MIN_NODES} time levels, got {self.nt}")
        if not self.T > 0:
            raise SolverError("T must be positive")

    @classmethod
    def uniform(cls, region, nodes, nt: int, T: float) -> "Grid":
        if isinstance(nodes, int):
            nodes = [nodes] * len(region)
        return cls(tuple((float(lo), float(hi), int(m)) for (lo, hi), m in zip(region, nodes)), int(nt), float(T))

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(m for _, _, m in self.axes)

    @property
    def dx(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (m - 1) for lo, hi, m in self.axes)

    @property
    def dt(self) -> float:
        return self.T / (self.nt - 1)

    def coords(self, i: int) -> np.ndarray:
        lo, hi, m = self.axes[i]
        return np.linspace(lo, hi, m)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt)

    def points(self) -> np.ndarray:
        """Node coordinates, shape (*shape, n)."""
        mesh = np.meshgrid(*[self.coords(i) for i in range(self.n)], indexing="ij")
        return np.stack(mesh, axis=-1)

    def certificate_mask(self, frac: float = 0.1) -> np.ndarray:
        """Nodes outside the outer ``frac`` of every axis."""
        masks = []
        for m in self.shape:
            cut = int(np.ceil(frac * m))
            v = np.zeros(m, dtype=bool)
            v[cut : m - cut] = True
            masks.append(v)
        out = masks[0]
        for v in masks[1:]:
            out = out[:, None] & v[None, :]
        return out

    def interior_mask(self) -> np.ndarray:
        masks = []
        for m in self.shape:
            v = np.ones(m, dtype=bool)
            v[0] = v[-1] = False
            masks.append(v)
        out = masks[0]
        for v in masks[1:]:
            out = out[:, None] & v[None, :]
        return out

    def locate(self, x) -> tuple[int, ...]:
        """Nearest node multi-index of a point."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        idx = []
        for i, (lo, hi, m) in enumerate(self.axes):
            if x[i] < lo - 1e-12 or x[i] > hi + 1e-12:
                raise SolverError(f"point {x.tolist()} outside grid")
            idx.append(int(np.clip(np.rint((x[i] - lo) / self.dx[i]), 0, m - 1)))
        return tuple(idx)

    def to_dict(self) -> dict:
        return {"axes": [list(a) for a in self.axes], "nt": self.nt, "T": self.T}


@dataclass(frozen=True)
class SolverConfig:
    box: ControlBox = ControlBox(1.0, 0.05, 20.0)
    tol: float = 1e-9
    max_policy_iters: int = 50
    boundary: str = NEUMANN_ZERO
    theta_scheme: float = 1.0
    record_trace: bool = False
    rannacher_steps: int = 2

    def __post_init__(self):
        if self.boundary not in (NEUMANN_ZERO, DIRICHLET_FROZEN):
            raise SolverError(f"unknown boundary {self.boundary!r}")
        if not 0.5 <= self.theta_scheme <= 1.0:
            raise SolverError("theta_scheme must lie in [0.5, 1]")
        if self.rannacher_steps < 0:
            raise SolverError("rannacher_steps must be non-negative")
        if self.max_policy_iters < 1 or not self.tol > 0:
            raise SolverError("need tol > 0 and max_policy_iters >= 1")

    def with_box(self, box: ControlBox) -> "SolverConfig":
        return replace(self, box=box)

    def to_dict(self) -> dict:
        return {
            "box": self.box.to_dict(),
            "tol": self.tol,
            "max_policy_iters": self.max_policy_iters,
            "boundary": self.boundary,
            "theta_scheme": self.theta_scheme,
            "rannacher_steps": self.rannacher_steps,
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class SolutionField:
    grid: Grid
    G: np.ndarray  # (nt, *shape)
    dG: np.ndarray  # (nt, *shape, n)
    pde_hash: str = ""
    config_hash: str = ""
    iterations: list[int] = field(default_factory=list)
    residual: dict = field(default_factory=dict)
    trace: list[list[float]] = field(default_factory=list)

    def value_at(self, x, t: float) -> float:
        """Multilinear interpolation in x, linear between time levels."""
        g = self.grid
        s = min(max(t / g.dt, 0.0), g.nt - 1.0)
        j = min(int(np.floor(s)), g.nt - 2)
        w = s - j
        xq = np.atleast_1d(np.asarray(x, float))[None, :]
        v0 = float(_interp(g, self.G[j], xq)[0])
        if w < 1e-12:
            return v0
        return (1.0 - w) * v0 + w * float(_interp(g, self.G[j + 1], xq)[0])


@dataclass
class ControlField:
    grid: Grid
    q: np.ndarray  # (nt, *shape, n)
    c: np.ndarray  # (nt, *shape)
    q_clip: np.ndarray
    c_clip: np.ndarray
    box: ControlBox
    eta_index: np.ndarray | None = None
    eta_points: np.ndarray | None = None
    V: np.ndarray | None = None  # (*shape, n, n)

    @property
    def clips_active(self) -> bool:
        return bool(self.q_clip.any() or self.c_clip.any())


def _interp(grid: Grid, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of node values at points ``x`` (m, n), clamped."""
    from scipy.interpolate import RegularGridInterpolator

    pts = np.empty_like(x, dtype=float)
    for i, (lo, hi, _) in enumerate(grid.axes):
        pts[:, i] = np.clip(x[:, i], lo, hi)
    f = RegularGridInterpolator(tuple(grid.coords(i) for i in range(grid.n)), values, method="linear")
    return f(pts)


# --------------------------------------------------------------------------
# stencils


def _reflect(idx: np.ndarray, m: int) -> np.ndarray:
    idx = np.where(idx < 0, -idx, idx)
    return np.where(idx > m - 1, 2 * (m - 1) - idx, idx)


def _neighbour_index(shape, offset) -> np.ndarray:
    """Flat index of the (reflected) neighbour at ``offset`` for every node."""
    grids = np.meshgrid(*[np.arange(m) for m in shape], indexing="ij")
    moved = [_reflect(g + o, m) for g, o, m in zip(grids, offset, shape)]
    return np.ravel_multi_index(moved, shape).ravel()


def central_gradient(G: np.ndarray, dx: Sequence[float]) -> np.ndarray:
    """Central differences with mirror ghost nodes (zero normal slope at edges)."""
    out = np.empty(G.shape + (G.ndim,))
    for a in range(G.ndim):
        pad = [(0, 0)] * G.ndim
        pad[a] = (1, 1)
        Gp = np.pad(G, pad, mode="reflect")
        hi = [slice(None)] * G.ndim
        lo = [slice(None)] * G.ndim
        hi[a] = slice(2, None)
        lo[a] = slice(None, -2)
        out[..., a] = (Gp[tuple(hi)] - Gp[tuple(lo)]) / (2.0 * dx[a])
    return out


class _Operator:
    """Off-diagonal couplings of the frozen-policy generator."""

    def __init__(self, grid: Grid, sigma: np.ndarray):
        self.grid = grid
        self.shape = grid.shape
        self.size = int(np.prod(self.shape))
        dx = grid.dx
        n = grid.n
        self.axis_diff = []
        if n == 2:
            s12 = sigma[..., 0, 1]
            cross = np.abs(s12) / (2.0 * dx[0] * dx[1])
        else:
            s12 = None
            cross = 0.0
        for a in range(n):
            d = 0.5 * sigma[..., a, a] / dx[a] ** 2 - cross
            if np.any(d < 0):
                raise SolverError("cross-diffusion too strong for a monotone stencil on this grid; adjust spacing")
            self.axis_diff.append(d)
        self.cross = cross
        self.s12 = s12
        self.nbr = {}
        for a in range(n):
            for sgn in (1, -1):
                off = [0] * n
                off[a] = sgn
                self.nbr[("axis", a, sgn)] = _neighbour_index(self.shape, off)
        if n == 2:
            for off in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
                self.nbr[off] = _neighbour_index(self.shape, off)

    def couplings(self, mu: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """List of (neighbour flat index, non-negative coefficient)."""
        out = []
        dx = self.grid.dx
        for a in range(self.grid.n):
            d = self.axis_diff[a]
            m = mu[..., a]
            central = np.abs(m) / (2.0 * dx[a]) <= d
            plus = np.where(central, d + m / (2.0 * dx[a]), d + np.maximum(m, 0.0) / dx[a])
            minus = np.where(central, d - m / (2.0 * dx[a]), d + np.maximum(-m, 0.0) / dx[a])
            out.append((self.nbr[("axis", a, 1)], plus.ravel()))
            out.append((self.nbr[("axis", a, -1)], minus.ravel()))
        if self.grid.n == 2:
            pos = (self.s12 >= 0).ravel()
            cr = np.broadcast_to(self.cross, self.shape).ravel()
            zero = np.zeros_like(cr)
            out.append((self.nbr[(1, 1)], np.where(pos, cr, zero)))
            out.append((self.nbr[(-1, -1)], np.where(pos, cr, zero)))
            out.append((self.nbr[(1, -1)], np.where(pos, zero, cr)))
            out.append((self.nbr[(-1, 1)], np.where(pos, zero, cr)))
        return out

    def apply(self, coup, rho: np.ndarray, G: np.ndarray) -> np.ndarray:
        g = G.ravel()
        out = rho.ravel() * g
        for j, c in coup:
            out = out + c * (g[j] - g)
        return out.reshape(self.shape)

    def solve(self, coup, rho: np.ndarray, rhs: np.ndarray, wdt: float, fixed: np.ndarray | None) -> np.ndarray:
        """Solve (I - wdt * L) G = rhs; rows in ``fixed`` become identities."""
        N = self.size
        diag = 1.0 - wdt * rho.ravel()
        for _, c in coup:
            diag = diag + wdt * c
        b = rhs.ravel().copy()
        if self.grid.n == 1:
            upper = np.zeros(N)
            lower = np.zeros(N)
            rows = np.arange(N)
            for j, c in coup:
                up = j > rows
                np.add.at(upper, rows[up], -wdt * c[up])
                np.add.at(lower, rows[~up], -wdt * c[~up])
            if fixed is not None:
                fr = fixed.ravel()
                diag[fr] = 1.0
                upper[fr] = 0.0
                lower[fr] = 0.0
            ab = np.zeros((3, N))
            ab[0, 1:] = upper[:-1]
            ab[1] = diag
            ab[2, :-1] = lower[1:]
            return solve_banded((1, 1), ab, b, check_finite=False).reshape(self.shape)
        rows = [np.arange(N)]
        cols = [np.arange(N)]
        vals = [diag]
        keep = np.ones(N, dtype=bool) if fixed is None else ~fixed.ravel()
        if fixed is not None:
            vals[0] = np.where(keep, diag, 1.0)
        for j, c in coup:
            rows.append(np.arange(N)[keep])
            cols.append(j[keep])
            vals.append(-wdt * c[keep])
        M = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)).tocsc()
        return np.asarray(spsolve(M, b)).reshape(self.shape)


# --------------------------------------------------------------------------
# policy evaluation


class _Policy:
    """Argmax controls and the frozen linear coefficients they induce."""

    def __init__(self, p: FactorPDE, grid: Grid, box: ControlBox):
        self.p = p
        self.box = box
        self.grid = grid
        X = grid.points()
        self.X = X
        A = p.A_at(X)
        try:
            self.V = batch_sqrt(A)
        except SPDError as exc:
            raise SolverError(f"A is not positive definite on the grid ({exc}); reduce the regime first") from None
        self.sigma = p.sigma_at(X)
        self.regime = None if p.theta_is_zero else AlphaRegime.from_k(p.k)
        if self.regime is not None:
            box.check(self.regime)
            self.theta_h = np.broadcast_to(self.regime.hjb_weight(p.theta_at(X)), grid.shape)
            if np.any(self.theta_h < 0):
                raise SolverError("theta must be non-negative")
        if p.robust is not None:
            pts = p.robust.array()
            self.eta_points = pts
            self.b_eta = np.stack([np.broadcast_to(p.b_at(X, e), X.shape) for e in pts])
            self.h_eta = np.stack([np.broadcast_to(p.h_at(X, e), grid.shape) for e in pts])
            self.iota = p.robust.iota
        else:
            self.eta_points = None
            self.b = np.broadcast_to(p.b_at(X), X.shape)
            self.h = np.broadcast_to(p.h_at(X), grid.shape)

    def controls(self, G: np.ndarray):
        dG = central_gradient(G, self.grid.dx)
        pv = np.einsum("...ij,...j->...i", self.V, dG)
        q, _, qclip = optimal_q(pv, G, self.box.R)
        if self.regime is not None:
            c, _, cclip = optimal_c(G, self.regime, self.box)
        else:
            c = np.zeros(G.shape)
            cclip = np.zeros(G.shape, dtype=bool)
        eta = None
        if self.eta_points is not None:
            terms = np.einsum("e...i,...i->e...", self.b_eta, dG) + self.h_eta * G[None]
            eta = np.argmin(terms, axis=0)
        return q, c, eta, qclip, cclip

    def coefficients(self, q, c, eta):
        Vq = np.einsum("...ij,...j->...i", self.V, q)
        if eta is None:
            mu = self.b + Vq
            rho = self.h - 0.5 * np.sum(q * q, axis=-1)
        else:
            b = np.take_along_axis(self.b_eta, eta[None, ..., None], axis=0)[0]
            h = np.take_along_axis(self.h_eta, eta[None, ...], axis=0)[0]
            mu = self.iota * b + Vq
            rho = self.iota * h - 0.5 * np.sum(q * q, axis=-1)
        if self.regime is not None:
            rho = rho - self.theta_h * self.regime.alpha * c
            f = self.theta_h * c**self.regime.alpha
        else:
            f = np.zeros(c.shape)
        return mu, rho, f


def _where(grid: Grid, t_index: int, flat: int) -> str:
    idx = np.unravel_index(flat, grid.shape)
    x = [float(grid.coords(i)[k]) for i, k in enumerate(idx)]
    return f"(t={grid.times[t_index]:.6g}, x={x})"


def solve(p: FactorPDE, grid: Grid, cfg: SolverConfig | None = None) -> tuple[SolutionField, ControlField]:
    """Backward sweep with Howard iteration at every time level."""
    cfg = cfg or SolverConfig()
    if p.n != grid.n:
        raise SolverError(f"grid dimension {grid.n} does not match n = {p.n}")
    if p.n > 2:
        raise SolverError("n > 2 unsupported by the grid solver; use the Monte Carlo oracle")
    if abs(grid.T - p.T) > 1e-12 * max(1.0, p.T):
        raise SolverError("grid horizon differs from the model horizon")
    pol = _Policy(p, grid, cfg.box)
    op = _Operator(grid, pol.sigma)
    nt, shape, n = grid.nt, grid.shape, grid.n
    dt = grid.dt

    G = np.empty((nt,) + shape)
    Q = np.empty((nt,) + shape + (n,))
    C = np.empty((nt,) + shape)
    QC = np.zeros((nt,) + shape, dtype=bool)
    CC = np.zeros((nt,) + shape, dtype=bool)
    ETA = np.zeros((nt,) + shape, dtype=np.int64) if pol.eta_points is not None else None

    beta = np.broadcast_to(p.beta_at(pol.X), shape).astype(float)
    if np.any(~(beta > 0)):
        flat = int(np.argmin(beta))
        raise PositivityError(f"positivity lost at {_where(grid, nt - 1, flat)}: terminal value {beta.ravel()[flat]:.6g}")
    G[-1] = beta

    def store(j, Gj):
        q, c, eta, qc, cc = pol.controls(Gj)
        Q[j], C[j], QC[j], CC[j] = q, c, qc, cc
        if ETA is not None:
            ETA[j] = eta

    store(nt - 1, beta)
    fixed = None
    if cfg.boundary == DIRICHLET_FROZEN:
        fixed = ~grid.interior_mask()

    def step(G_next: np.ndarray, h: float, w: float, steps: list[float]) -> tuple[np.ndarray, int]:
        Gk = G_next.copy()
        solves = 0
        while True:
            blend = Gk if w == 1.0 else w * Gk + (1.0 - w) * G_next
            q, c, eta, _, _ = pol.controls(blend)
            mu, rho, f = pol.coefficients(q, c, eta)
            coup = op.couplings(mu)
            rhs = G_next + h * f
            if w < 1.0:
                rhs = rhs + (1.0 - w) * h * op.apply(coup, rho, G_next)
            if fixed is not None:
                rhs = np.where(fixed, beta, rhs)
            G_new = op.solve(coup, rho, rhs, w * h, fixed)
            solves += 1
            if not np.all(np.isfinite(G_new)) or np.min(G_new) <= 0:
                bad = np.where(np.isfinite(G_new), G_new, -np.inf)
                flat = int(np.argmin(bad))
                raise PositivityError(
                    f"positivity lost at {_where(grid, j, flat)} (value {G_new.ravel()[flat]:.6g}); refine the grid or enlarge the box"
                )
            if cfg.record_trace and solves > 1:
                steps.append(float(np.min(G_new - Gk)))
            change = float(np.max(np.abs(G_new - Gk)))
            Gk = G_new
            if change <= cfg.tol * max(1.0, float(np.max(np.abs(Gk)))):
                return Gk, solves
            if solves >= cfg.max_policy_iters:
                raise PolicyIterationStalled(
                    f"policy iteration stalled at t={grid.times[j]:.6g} after {solves} solves (last change {change:.3g})",
                    change,
                )

    iterations: list[int] = []
    trace: list[list[float]] = []
    w = cfg.theta_scheme
    for j in range(nt - 2, -1, -1):
        steps: list[float] = []
        if w < 1.0 and (nt - 2 - j) < cfg.rannacher_steps:
            # damp the Crank-Nicolson start with two implicit half steps
            half, s1 = step(G[j + 1], 0.5 * dt, 1.0, steps)
            Gj, s2 = step(half, 0.5 * dt, 1.0, steps)
            solves = s1 + s2 - 1
        else:
            Gj, solves = step(G[j + 1], dt, w, steps)
        G[j] = Gj
        store(j, Gj)
        iterations.append(solves - 1)
        if cfg.record_trace:
            trace.append(steps)
    iterations.reverse()
    trace.reverse()

    sol = SolutionField(
        grid=grid,
        G=G,
        dG=gradient_values(G, grid),
        pde_hash=pde_hash(p),
        config_hash=cfg.hash(),
        iterations=iterations,
        trace=trace,
    )
    ctl = ControlField(
        grid=grid,
        q=Q,
        c=C,
        q_clip=QC,
        c_clip=CC,
        box=cfg.box,
        eta_index=ETA,
        eta_points=pol.eta_points,
        V=pol.V,
    )
    log.debug("solved %s on %s: %d policy updates", p.name or "model", grid.shape, sum(iterations))
    return sol, ctl


def gradient_values(G: np.ndarray, grid: Grid) -> np.ndarray:
    """Spatial gradient of a (nt, *shape) array: central inside, one-sided second order at edges."""
    parts = np.gradient(G, *grid.dx, axis=tuple(range(1, grid.n + 1)), edge_order=2)
    if grid.n == 1:
        parts = [parts]
    return np.stack(parts, axis=-1)


def gradient(sol: SolutionField) -> np.ndarray:
    """Recompute and store the gradient field of ``sol``."""
    sol.dG = gradient_values(sol.G, sol.grid)
    return sol.dG
