"""Euler-Maruyama simulation of the controlled factor SDE

    dX = [b(X) - V(X) q] dk + sigma(X) dW,   V = sqrt(A),  sigma = sqrt(Sigma),

with the discount integrals of the Feynman-Kac functional accumulated as
left-endpoint Riemann sums.

Random numbers come from counter-based Philox streams, one per block of
``block`` paths keyed by (seed, block index).  Every block always draws a
full block of normals, so path ``i`` sees the same noise whatever the total
path count or thread count.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .linalg import batch_sqrt
from .model import AlphaRegime, FactorPDE
from .solver import ControlField, Grid

__all__ = [
    "MCConfig",
    "SimulationError",
    "PolicyEval",
    "ConstantPolicy",
    "FunctionPolicy",
    "FieldPolicy",
    "AdversarialPolicy",
    "PathBundle",
    "PairedBundle",
    "simulate",
    "simulate_paired",
    "block_rng",
]

CLAMP_FLAG = 0.01


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MCConfig:
    steps: int = 1000
    paths: int = 100_000
    seed: int = 0
    block: int = 8192
    threads: int | None = None
    substeps: int = 1
    store_paths: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise SimulationError("step count must be positive")
        if self.paths < 1:
            raise SimulationError("path count must be positive")
        if self.block < 1 or self.substeps < 1:
            raise SimulationError("block and substeps must be positive")


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


@dataclass
class PolicyEval:
    q: np.ndarray  # (B, n)
    c: np.ndarray  # (B,)
    eta: np.ndarray | None = None  # (B,) indices into the robust set
    clamped: int = 0


class ConstantPolicy:
    def __init__(self, q, c: float = 0.0, eta: int | None = None):
        self.q = np.atleast_1d(np.asarray(q, dtype=float))
        self.c = float(c)
        self.eta = eta

    def evaluate(self, t: float, X: np.ndarray) -> PolicyEval:
        B = X.shape[0]
        eta = None if self.eta is None else np.full(B, self.eta, dtype=np.int64)
        return PolicyEval(np.broadcast_to(self.q, X.shape), np.full(B, self.c), eta)


class FunctionPolicy:
    """Controls from ``fn(t, X) -> (q, c)`` (optionally a third eta entry)."""

    def __init__(self, fn: Callable):
        self.fn = fn

    def evaluate(self, t: float, X: np.ndarray) -> PolicyEval:
        out = self.fn(t, X)
        q = np.broadcast_to(np.asarray(out[0], dtype=float), X.shape)
        c = np.broadcast_to(np.asarray(out[1], dtype=float), X.shape[:1])
        eta = None if len(out) < 3 or out[2] is None else np.asarray(out[2])
        return PolicyEval(q, c, eta)


class FieldPolicy:
    """Controls read off a solved ControlField.

    Multilinear in x, left-constant in t, nearest node for the robust index.
    The solver stores the maximizer of the drift ``b + V q``; the SDE uses
    ``b - V q``, so the sign of q is flipped here.
    """

    def __init__(self, controls: ControlField):
        self.ctl = controls
        self.grid = controls.grid
        # q and c stacked so one gather serves both
        self.table = np.concatenate([-controls.q, controls.c[..., None]], axis=-1)
        if self.grid.n == 1:
            self.q1 = np.ascontiguousarray(-controls.q[..., 0])
            self.c1 = np.ascontiguousarray(controls.c)
        else:
            self.corners = self._corner_table()
            self.inv_dx = [1.0 / float(d) for d in self.grid.dx]
            self.strides = [int(np.prod(self.grid.shape[a + 1 :])) for a in range(self.grid.n)]

    def _corner_table(self) -> np.ndarray:
        # (nt, nodes, 2^n * (n+1)): values at every corner of the cell whose lower
        # node is the row, so one gather per step serves the whole interpolation
        g = self.grid
        n = g.n
        tab = self.table
        shape = g.shape
        out = np.empty((g.nt, int(np.prod(shape)), 2**n, n + 1))
        for corner in range(2**n):
            sl = [slice(None)]
            for a in range(n):
                bit = (corner >> a) & 1
                idx = np.minimum(np.arange(shape[a]) + bit, shape[a] - 1)
                sl.append(idx)
            v = tab[np.ix_(np.arange(g.nt), *sl[1:])]
            out[:, :, corner, :] = v.reshape(g.nt, -1, n + 1)
        return out.reshape(g.nt, out.shape[1], -1)

    def evaluate(self, t: float, X: np.ndarray) -> PolicyEval:
        g = self.grid
        n = g.n
        j = int(min(max(math.floor(t / g.dt + 1e-9), 0), g.nt - 1))
        eta = None
        if n == 1:
            lo, hi, m = g.axes[0]
            x = X[:, 0]
            clamped = int(np.count_nonzero((x < lo) | (x > hi)))
            u = (np.clip(x, lo, hi) - lo) * (1.0 / g.dx[0])
            k = np.minimum(u.astype(np.int64), m - 2)
            w = u - k
            k1 = k + 1
            qt, ct = self.q1[j], self.c1[j]
            q0, c0 = qt.take(k), ct.take(k)
            q = q0 + w * (qt.take(k1) - q0)
            c = c0 + w * (ct.take(k1) - c0)
            if self.ctl.eta_index is not None:
                eta = self.ctl.eta_index[j][np.where(w >= 0.5, k1, k)]
            return PolicyEval(q[:, None], c, eta, clamped)
        B = X.shape[0]
        flat = np.zeros(B, dtype=np.int64)
        ks, ws = [], []
        out = np.zeros(B, dtype=bool)
        # per-axis column arithmetic: broadcasting over a length-n axis is slow
        for a, (lo, hi, m) in enumerate(g.axes):
            u = (X[:, a] - lo) * self.inv_dx[a]
            out |= (u < 0.0) | (u > m - 1)
            np.clip(u, 0.0, float(m - 1), out=u)
            k = np.minimum(u.astype(np.int64), m - 2)
            ks.append(k)
            ws.append(u - k)
            flat += k * self.strides[a]
        vals = np.ascontiguousarray(self.corners[j].take(flat, axis=0).T).reshape((2,) * n + (n + 1, B))
        # leading axis of the gather is the highest corner bit
        for a in range(n - 1, -1, -1):
            vals = vals[0] + ws[a] * (vals[1] - vals[0])
        if self.ctl.eta_index is not None:
            near = sum(np.where(w >= 0.5, k + 1, k) * self.strides[a] for a, (k, w) in enumerate(zip(ks, ws)))
            eta = self.ctl.eta_index[j].reshape(-1).take(near)
        return PolicyEval(vals[:n].T, vals[n], eta, int(np.count_nonzero(out)))


class AdversarialPolicy:
    """|q| = R in the direction that widens the gap of a paired trajectory fastest.

    Only meaningful inside :func:`simulate_paired`; directions are a fixed
    8-point stencil in two dimensions and +-1 in one.  Ties go to the first
    direction.
    """

    def __init__(self, R: float, n: int):
        self.R = float(R)
        if n == 1:
            self.dirs = np.array([[1.0], [-1.0]])
        elif n == 2:
            ang = np.arange(8) * (np.pi / 4)
            self.dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        else:
            raise SimulationError("adversarial stencil defined for n <= 2")

    def choose(self, dX: np.ndarray, dV: np.ndarray) -> np.ndarray:
        # growth rate of |dX|^2 / 2 from the control part: dX' (V(xbar) - V(x)) q
        score = np.einsum("bi,bij,dj->bd", dX, dV, self.dirs)
        return self.R * self.dirs[np.argmax(score, axis=1)]


@dataclass
class PathBundle:
    X_T: np.ndarray
    I_h: np.ndarray
    I_q: np.ndarray
    I_c: np.ndarray
    payoff: np.ndarray
    beta_T: np.ndarray
    seed: int
    dt: float
    t0: float
    steps: int
    clamped_fraction: float = 0.0
    checksum: np.ndarray | None = None
    paths: np.ndarray | None = None  # (M, K+1, n) when stored
    q_paths: np.ndarray | None = None
    c_paths: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.X_T.shape[0]

    @property
    def flagged(self) -> bool:
        return self.clamped_fraction > CLAMP_FLAG

    @property
    def discount_T(self) -> np.ndarray:
        return np.exp(self.I_h - self.I_q - self.I_c)

    def values(self) -> np.ndarray:
        """Per-path Feynman-Kac sample: running payoff plus discounted terminal value."""
        return self.payoff + self.discount_T * self.beta_T

    def increment_hash(self) -> str:
        if self.checksum is None:
            return ""
        return hashlib.sha256(np.ascontiguousarray(self.checksum).tobytes()).hexdigest()[:16]


@dataclass
class PairedBundle:
    first: PathBundle
    second: PathBundle
    gap_sup: np.ndarray  # per path sup_k e^{-1/2 int |q|^2} |X - Xbar|
    dx0: float

    @property
    def shared_noise(self) -> bool:
        a, b = self.first.checksum, self.second.checksum
        return a is not None and b is not None and np.array_equal(a, b)


class _Coeffs:
    """Per-step coefficient evaluation with constants hoisted."""

    def __init__(self, p: FactorPDE, allow_degenerate: bool):
        self.p = p
        self.n = p.n
        self.allow_degenerate = allow_degenerate
        self.regime = None if p.theta_is_zero else AlphaRegime.from_k(p.k)
        z = np.zeros((1, p.n))
        self.const_sigma = all(e.is_const for row in p.Sigma for e in row)
        self.const_A = all(e.is_const for row in p.A for e in row)
        self.sigma0 = batch_sqrt(p.sigma_at(z), allow_singular=allow_degenerate)[0] if self.const_sigma else None
        self.V0 = batch_sqrt(p.A_at(z), allow_singular=True)[0] if self.const_A else None
        self.etas = None if p.robust is None else p.robust.array()
        self.iota = 1 if p.robust is None else p.robust.iota

    def sigma(self, X):
        if self.sigma0 is not None:
            return self.sigma0
        return batch_sqrt(self.p.sigma_at(X), allow_singular=self.allow_degenerate)

    def V(self, X):
        if self.V0 is not None:
            return self.V0
        return batch_sqrt(self.p.A_at(X), allow_singular=True)

    def drift_h(self, X, eta):
        p = self.p
        if self.etas is None:
            return np.broadcast_to(p.b_at(X), X.shape), np.broadcast_to(p.h_at(X), X.shape[:1])
        if eta is None:
            raise SimulationError("robust model needs an eta policy")
        b = np.empty(X.shape)
        h = np.empty(X.shape[0])
        for j, e in enumerate(self.etas):
            sel = eta == j
            if sel.any():
                b[sel] = np.broadcast_to(p.b_at(X[sel], e), (int(sel.sum()), self.n))
                h[sel] = np.broadcast_to(p.h_at(X[sel], e), (int(sel.sum()),))
        return self.iota * b, self.iota * h

    def theta_h(self, X):
        return np.broadcast_to(self.regime.hjb_weight(self.p.theta_at(X)), X.shape[:1])


def _matvec(M, v):
    if M.shape[-1] == 1:
        return (M[0, 0] if M.ndim == 2 else M[:, :, 0]) * v
    if M.ndim == 2:
        return v @ M.T
    return np.einsum("bij,bj->bi", M, v)


def _check(X, what, k):
    if not np.all(np.isfinite(X)):
        bad = np.where(~np.all(np.isfinite(X), axis=-1))[0][0]
        raise SimulationError(f"non-finite {what} at step {k}, path-local index {int(bad)}")


def _blocks(M: int, B: int):
    return [(b, b * B, min(B, M - b * B)) for b in range((M + B - 1) // B)]


def _map_blocks(fn, blocks, threads):
    if threads == 1 or len(blocks) == 1:
        return [fn(*b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda b: fn(*b), blocks))


def simulate(
    p: FactorPDE,
    policy,
    x0,
    t0: float,
    cfg: MCConfig,
    *,
    allow_degenerate: bool = False,
) -> PathBundle:
    """Simulate ``cfg.paths`` controlled paths from (x0, t0) to the horizon."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (p.n,):
        raise SimulationError(f"x0 must have {p.n} entries")
    if not 0 <= t0 < p.T:
        raise SimulationError("t0 must lie in [0, T)")
    co = _Coeffs(p, allow_degenerate)
    K, s = cfg.steps, cfg.substeps
    dt = (p.T - t0) / K
    sq = math.sqrt(dt / s)
    B = cfg.block
    store = cfg.store_paths

    def run(block, start, count):
        rng = block_rng(cfg.seed, block)
        X = np.tile(x0, (B, 1))
        Ih = np.zeros(B)
        Iq = np.zeros(B)
        Ic = np.zeros(B)
        pay = np.zeros(B)
        chk = np.zeros(B)
        clamped = 0
        traj = np.empty((B, K + 1, p.n)) if store else None
        qs = np.empty((B, K, p.n)) if store else None
        cs = np.empty((B, K)) if store else None
        if store:
            traj[:, 0] = X
        dW = np.empty((B, p.n))
        alpha = None if co.regime is None else co.regime.alpha
        for k in range(K):
            t = t0 + k * dt
            pe = policy.evaluate(t, X)
            clamped += pe.clamped
            b, h = co.drift_h(X, pe.eta)
            q = pe.q
            if co.regime is not None:
                thdt = co.theta_h(X) * dt
                pay += thdt * np.exp(Ih - Iq - Ic) * pe.c**alpha
                Ic += thdt * (alpha * pe.c)
            Ih += h * dt
            Iq += np.einsum("bi,bi->b", q, q) * (0.5 * dt)
            rng.standard_normal(out=dW)
            for _ in range(s - 1):
                dW += rng.standard_normal((B, p.n))
            dW *= sq
            chk += (k + 1) * dW[:, 0]
            drift = b - _matvec(co.V(X), q)
            drift *= dt
            drift += _matvec(co.sigma(X), dW)
            X = X + drift
            if k % 64 == 63 or k == K - 1:
                _check(X, "state", k)
            if store:
                traj[:, k + 1] = X
                qs[:, k] = q
                cs[:, k] = pe.c
        bT = np.broadcast_to(p.beta_at(X), (B,))
        sl = slice(0, count)
        # clamp counts refer to the whole block; rescale to the kept paths
        return (
            X[sl],
            Ih[sl],
            Iq[sl],
            Ic[sl],
            pay[sl],
            np.array(bT[sl]),
            chk[sl],
            clamped * count / B,
            traj[sl] if store else None,
            qs[sl] if store else None,
            cs[sl] if store else None,
        )

    parts = _map_blocks(run, _blocks(cfg.paths, B), cfg.threads)
    cat = lambda i: np.concatenate([r[i] for r in parts])  # noqa: E731
    clamp_total = sum(r[7] for r in parts)
    return PathBundle(
        X_T=cat(0),
        I_h=cat(1),
        I_q=cat(2),
        I_c=cat(3),
        payoff=cat(4),
        beta_T=cat(5),
        seed=cfg.seed,
        dt=dt,
        t0=t0,
        steps=K,
        clamped_fraction=float(clamp_total / (cfg.paths * K)),
        checksum=cat(6),
        paths=cat(8) if store else None,
        q_paths=cat(9) if store else None,
        c_paths=cat(10) if store else None,
    )


def simulate_paired(
    p: FactorPDE,
    policy,
    x0,
    xbar0,
    t0: float,
    cfg: MCConfig,
) -> PairedBundle:
    """Two trajectories per path from x0 and xbar0 driven by the same noise and the same control.

    ``policy`` is evaluated on the first trajectory, or for an
    :class:`AdversarialPolicy` on the pair.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    xb0 = np.atleast_1d(np.asarray(xbar0, dtype=float))
    dx0 = float(np.linalg.norm(x0 - xb0))
    co = _Coeffs(p, allow_degenerate=True)
    K = cfg.steps
    s = cfg.substeps
    dt = (p.T - t0) / K
    sq = math.sqrt(dt / s)
    B = cfg.block
    adversarial = isinstance(policy, AdversarialPolicy)

    def run(block, start, count):
        rng = block_rng(cfg.seed, block)
        X = np.tile(x0, (B, 1))
        Y = np.tile(xb0, (B, 1))
        Iq = np.zeros(B)
        chk = np.zeros(B)
        sup = np.linalg.norm(X - Y, axis=1)
        for k in range(K):
            t = t0 + k * dt
            VX, VY = co.V(X), co.V(Y)
            if adversarial:
                VXb = np.broadcast_to(VX, (B, p.n, p.n))
                VYb = np.broadcast_to(VY, (B, p.n, p.n))
                q = policy.choose(X - Y, VYb - VXb)
                eta = None
            else:
                pe = policy.evaluate(t, X)
                q, eta = pe.q, pe.eta
            bX, _ = co.drift_h(X, eta)
            bY, _ = co.drift_h(Y, eta)
            dW = rng.standard_normal((B, p.n)) * sq
            for _ in range(s - 1):
                dW += rng.standard_normal((B, p.n)) * sq
            chk += (k + 1) * dW[:, 0]
            X = X + (bX - _matvec(VX, q)) * dt + _matvec(co.sigma(X), dW)
            Y = Y + (bY - _matvec(VY, q)) * dt + _matvec(co.sigma(Y), dW)
            Iq += 0.5 * np.sum(q * q, axis=-1) * dt
            _check(X, "state", k)
            _check(Y, "state", k)
            sup = np.maximum(sup, np.exp(-Iq) * np.linalg.norm(X - Y, axis=1))
        sl = slice(0, count)
        return X[sl], Y[sl], Iq[sl], chk[sl], sup[sl]

    parts = _map_blocks(run, _blocks(cfg.paths, B), cfg.threads)
    cat = lambda i: np.concatenate([r[i] for r in parts])  # noqa: E731
    zeros = np.zeros(cfg.paths)
    Iq = cat(2)
    chk = cat(3)

    def bundle(XT):
        return PathBundle(XT, zeros, Iq, zeros, zeros, zeros, cfg.seed, dt, t0, K, checksum=chk)

    return PairedBundle(bundle(cat(0)), bundle(cat(1)), cat(4), dx0)
