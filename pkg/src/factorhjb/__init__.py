"""Finite-difference policy iteration for semilinear factor HJB equations, with
explicit-bound certificates and an independent Monte Carlo oracle."""

__version__ = "0.1.0"

from .certify import CertificateReport, auto_box, certify
from .hamiltonian import ControlBox
from .mc_oracle import VerifyConfig, verify_solution
from .model import AlphaRegime, FactorPDE, MarketSpec, build_pde_from_market, validate
from .portfolio import extract_strategy, simulate_wealth, utility_compare
from .sde import MCConfig, simulate
from .solver import Grid, SolverConfig, solve
from .transform import apply_power, reduce_regime, residual

__all__ = [
    "AlphaRegime",
    "CertificateReport",
    "ControlBox",
    "FactorPDE",
    "Grid",
    "MCConfig",
    "MarketSpec",
    "SolverConfig",
    "VerifyConfig",
    "apply_power",
    "auto_box",
    "build_pde_from_market",
    "certify",
    "extract_strategy",
    "reduce_regime",
    "residual",
    "simulate",
    "simulate_wealth",
    "solve",
    "utility_compare",
    "validate",
    "verify_solution",
]
