"""Closed-form maximizers of the restricted-control Hamiltonian.

Every function is vectorized over leading axes: scalars are accepted and
arrays of node values are processed in one call.  The consumption term is
weighted by ``theta / (1 - alpha)^2``; with that weight the unclipped
Hamiltonian coincides with the nonlinear part of the factor equation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AlphaRegime, FactorPDE, ModelError

__all__ = [
    "ControlBox",
    "HamiltonianError",
    "optimal_q",
    "optimal_c",
    "robust_eta",
    "hamiltonian_value",
]


class HamiltonianError(ValueError):
    """Non-positive value passed where G > 0 is required."""


@dataclass(frozen=True)
class ControlBox:
    R: float
    m1: float
    m2: float

    def __post_init__(self):
        for name in ("R", "m1", "m2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.R > 0:
            raise ValueError("R must be positive")
        if not 0 <= self.m1 < self.m2:
            raise ValueError("need 0 <= m1 < m2")

    def check(self, regime: AlphaRegime) -> "ControlBox":
        if regime.regime == "K_NEG" and not self.m1 <= 1.0 <= self.m2:
            raise ValueError("regime K_NEG needs m1 <= 1 <= m2")
        if regime.regime == "K_GT1" and self.m1 != 0.0:
            raise ValueError("regime K_GT1 needs m1 = 0")
        return self

    def to_dict(self) -> dict:
        return {"R": self.R, "m1": self.m1, "m2": self.m2}


def _positive(g, what="g_val") -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if np.any(~(g > 0)):
        raise HamiltonianError(f"{what} must be positive (min {float(np.min(g)):.6g})")
    return g


def optimal_q(p, g_val, R: float):
    """Maximize p'q - |q|^2 g / 2 over the ball |q| <= R.

    Returns ``(q, value, clipped)``; ``p`` has shape (..., n).
    """
    g = _positive(g_val)
    p = np.asarray(p, dtype=float)
    if not R > 0:
        raise ValueError("R must be positive")
    q0 = p / g[..., None]
    norm = np.sqrt(np.sum(q0 * q0, axis=-1))
    clipped = norm > R
    scale = np.where(clipped, R / np.where(norm > 0, norm, 1.0), 1.0)
    q = q0 * scale[..., None]
    value = np.sum(p * q, axis=-1) - 0.5 * np.sum(q * q, axis=-1) * g
    return q, value, clipped


def optimal_c(g_val, regime: AlphaRegime, box: ControlBox):
    """Optimize -alpha c g + c^alpha over the consumption interval.

    K_NEG maximizes over [m1, m2]; K_GT1 minimizes over [0, m2].  Returns
    ``(c, value, clipped)``.
    """
    g = _positive(g_val)
    a = regime.alpha
    c0 = g ** (1.0 / (a - 1.0))
    lo = box.m1 if regime.regime == "K_NEG" else 0.0
    c = np.clip(c0, lo, box.m2)
    clipped = (c0 < lo) | (c0 > box.m2)
    value = -a * c * g + c**a
    return c, value, clipped


def robust_eta(x, dg, g_val, p: FactorPDE):
    """Pick eta in the finite set minimizing b(x, eta)'dg + h(x, eta) g.

    Ties go to the lowest index.  Returns ``(index, eta, iota * min)``.
    """
    if p.robust is None:
        raise ModelError("model has no robust set")
    pts = p.robust.array()
    if pts.shape[0] == 0:
        raise ModelError("robust set is empty")
    x = np.asarray(x, dtype=float)
    dg = np.asarray(dg, dtype=float)
    g = np.asarray(g_val, dtype=float)
    terms = np.stack(
        [np.sum(p.b_at(x, eta) * dg, axis=-1) + p.h_at(x, eta) * g for eta in pts],
        axis=0,
    )
    idx = np.argmin(terms, axis=0)
    best = np.take_along_axis(terms, idx[None, ...], axis=0)[0]
    return idx, pts[idx], p.robust.iota * best


def hamiltonian_value(x, g_val, dg, p: FactorPDE, regime: AlphaRegime, box: ControlBox, V=None):
    """Restricted Hamiltonian: q-part + weighted c-part + drift and potential."""
    x = np.asarray(x, dtype=float)
    g = _positive(g_val)
    dg = np.asarray(dg, dtype=float)
    if V is None:
        from .linalg import batch_sqrt

        V = batch_sqrt(p.A_at(x))
    pv = np.einsum("...ij,...j->...i", V, dg)
    _, qval, _ = optimal_q(pv, g, box.R)
    total = qval
    if not p.theta_is_zero:
        _, cval, _ = optimal_c(g, regime, box)
        total = total + regime.hjb_weight(p.theta_at(x)) * cval
    if p.robust is not None:
        _, _, term = robust_eta(x, dg, g, p)
        total = total + term
    else:
        total = total + np.sum(p.b_at(x) * dg, axis=-1) + p.h_at(x) * g
    return total
