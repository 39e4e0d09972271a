import dataclasses
import math

import numpy as np
import pytest

from conftest import constant_oracle
from factorhjb.hamiltonian import ControlBox
from factorhjb.mc_oracle import (
    OracleError,
    VerifyConfig,
    bound_estimates,
    estimate_lipschitz,
    feynman_kac_value,
    lipschitz_suite,
    verify_solution,
)
from factorhjb.model import FactorPDE
from factorhjb.sde import ConstantPolicy, FunctionPolicy, MCConfig, simulate, simulate_paired
from factorhjb.solver import Grid, SolverConfig, solve

BOX = ControlBox(1.0, 0.05, 2.0)
POINTS = [([-1.0], 0.0), ([-0.5], 0.0), ([0.0], 0.0), ([0.5], 0.25), ([1.0], 0.5)]


def _lin(h="0", sigma="1"):
    return FactorPDE.build(n=1, Sigma=sigma, A="1", b="0", h=h, theta="0", k=-1, beta="1", T=1.0)


def test_trivial_functional_is_exact():
    est, se = feynman_kac_value(simulate(_lin(), ConstantPolicy([0.0]), [0.0], 0.0, MCConfig(steps=10, paths=100, block=100)))
    assert est == 1.0 and se == 0.0


def test_constant_discount_is_path_independent():
    est, se = feynman_kac_value(simulate(_lin(h="0.4", sigma="2"), ConstantPolicy([0.0]), [0.0], 0.25, MCConfig(steps=10, paths=100, block=100)))
    assert est == pytest.approx(math.exp(0.4 * 0.75)) and se == pytest.approx(0.0, abs=1e-15)


def test_empty_bundle_rejected():
    b = simulate(_lin(), ConstantPolicy([0.0]), [0.0], 0.0, MCConfig(steps=2, paths=2, block=2))
    b = dataclasses.replace(b, X_T=b.X_T[:0], payoff=b.payoff[:0])
    with pytest.raises(OracleError):
        feynman_kac_value(b)


def test_optimal_consumption_attains_oracle_value():
    p = constant_oracle()
    # c* = G^{1/(alpha-1)} = 1 / (1 + 4 (T - t))
    pol = FunctionPolicy(lambda t, X: (0.0, 1.0 / (1.0 + 4.0 * (1.0 - t))))
    errs = []
    for K in (250, 500, 1000):
        est, se = feynman_kac_value(simulate(p, pol, [0.0], 0.0, MCConfig(steps=K, paths=16, block=16)))
        errs.append(abs(est - math.sqrt(5.0)))
    assert errs[-1] <= 1e-3 * math.sqrt(5.0)
    # first-order Riemann-sum bias
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05) and errs[1] / errs[2] == pytest.approx(2.0, rel=0.05)


def test_suboptimal_consumption_is_worse():
    p = constant_oracle()
    opt = FunctionPolicy(lambda t, X: (0.0, 1.0 / (1.0 + 4.0 * (1.0 - t))))
    cfg = MCConfig(steps=400, paths=4, block=4)
    best, _ = feynman_kac_value(simulate(p, opt, [0.0], 0.0, cfg))
    for c in (0.1, 0.5, 1.0):
        other, _ = feynman_kac_value(simulate(p, ConstantPolicy([0.0], c=c), [0.0], 0.0, cfg))
        assert other < best


@pytest.fixture(scope="module")
def oracle_solution():
    p = constant_oracle(region=[(-3.0, 3.0)])
    g = Grid.uniform(p.region, 61, 41, 1.0)
    sol, ctl = solve(p, g, SolverConfig(box=BOX, theta_scheme=0.5))
    return p, sol, ctl


FAST = VerifyConfig(mc=MCConfig(steps=200, paths=4096, block=4096), bias_paths=1024)


def test_verify_constant_oracle(oracle_solution):
    p, sol, ctl = oracle_solution
    rep = verify_solution(sol, ctl, p, POINTS, FAST, field_error=2e-4)
    assert rep.passed and rep.max_abs_z <= 3
    assert len(rep.points) == 5


def test_corrupted_field_detected(oracle_solution):
    p, sol, ctl = oracle_solution
    bad = dataclasses.replace(sol, G=sol.G + 0.1)
    rep = verify_solution(bad, ctl, p, POINTS, FAST, field_error=2e-4)
    assert not rep.passed
    gaps = [pt.gap for pt in rep.points]
    assert np.mean(gaps) == pytest.approx(0.1, abs=5e-3)


def test_verify_rejects_outside_points(oracle_solution):
    p, sol, ctl = oracle_solution
    with pytest.raises(OracleError):
        verify_solution(sol, ctl, p, [([3.0], 0.0)], FAST)
    with pytest.raises(OracleError):
        verify_solution(sol, ctl, p, [([0.0], 1.0)], FAST)
    with pytest.raises(OracleError):
        verify_solution(sol, ctl, p, [], FAST)


def test_verify_config_checks():
    with pytest.raises(OracleError):
        VerifyConfig(mc=MCConfig(steps=3))
    with pytest.raises(OracleError):
        VerifyConfig(bias_paths=1)


def test_linear_instance_against_closed_form():
    p = FactorPDE.build(n=1, Sigma="0.5", A="0.25", b="-x1", h="0.3", theta="0", k=-1, beta="1", T=1.0, region=[(-4, 4)])
    g = Grid.uniform(p.region, 81, 201, 1.0)
    sol, ctl = solve(p, g, SolverConfig(box=BOX, theta_scheme=0.5, rannacher_steps=0))
    rep = verify_solution(sol, ctl, p, [([0.0], 0.0), ([1.0], 0.5)], FAST, field_error=1e-6)
    assert rep.passed
    for pt in rep.points:
        assert pt.mc == pytest.approx(math.exp(0.3 * (1 - pt.t)), rel=1e-12)


def test_std_error_scales_with_paths():
    p = FactorPDE.build(n=1, Sigma="1", A="1", b="-x1", h="0.2*tanh(x1)", theta="0", k=-1, beta="1 + 0.5*tanh(x1)", T=1.0)
    ses = []
    for M in (4000, 16000):
        _, se = feynman_kac_value(simulate(p, ConstantPolicy([0.0]), [0.0], 0.0, MCConfig(steps=50, paths=M, block=4000)))
        ses.append(se)
    assert ses[0] / ses[1] == pytest.approx(2.0, rel=0.2)


def test_lipschitz_conserved_gap():
    p = FactorPDE.build(n=1, Sigma="1", A="1e-12", b="0", h="0", theta="0", k=-1, beta="1", T=1.0)
    pb = simulate_paired(p, ConstantPolicy([0.0]), [0.0], [0.3], 0.0, MCConfig(steps=20, paths=200, block=200))
    L, se = estimate_lipschitz(pb)
    assert L == pytest.approx(1.0, abs=1e-12) and se == pytest.approx(0.0, abs=1e-12)


def test_lipschitz_zero_gap_rejected():
    pb = simulate_paired(_lin(), ConstantPolicy([0.0]), [0.0], [0.0], 0.0, MCConfig(steps=4, paths=4, block=4))
    with pytest.raises(OracleError):
        estimate_lipschitz(pb)


def test_lipschitz_contraction_is_one():
    p = FactorPDE.build(n=1, Sigma="0.5", A="1e-12", b="-x1", h="0", theta="0", k=-1, beta="1", T=1.0)
    pb = simulate_paired(p, ConstantPolicy([0.0]), [0.0], [0.2], 0.0, MCConfig(steps=50, paths=500, block=500))
    L, _ = estimate_lipschitz(pb)
    assert L == pytest.approx(1.0, abs=1e-12)


def test_gronwall_ceiling_for_expanding_drift():
    # b(x) = 0.5 x: Lipschitz 0.5, gap grows like e^{0.5 s}
    p = FactorPDE.build(n=1, Sigma="0.5", A="1e-12", b="0.5*x1", h="0", theta="0", k=-1, beta="1", T=1.0)
    pb = simulate_paired(p, ConstantPolicy([0.0]), [0.0], [0.1], 0.0, MCConfig(steps=200, paths=500, block=500))
    L, se = estimate_lipschitz(pb)
    assert 1.0 < L <= math.exp(0.5) + 3 * se


def test_radius_independence_suite():
    p = FactorPDE.build(n=1, Sigma="0.25", A="(0.5 + 0.25*tanh(x1))^2", b="-x1", h="0", theta="0", k=-1, beta="1", T=1.0)
    rep = lipschitz_suite(p, [0.0], [0.1], MCConfig(steps=100, paths=2000, block=2000), L_b=1.0)
    assert rep.passed
    assert rep.spread <= 3 * rep.pooled_std_error
    assert set(rep.to_dict()) >= {"radii", "estimates", "ceiling", "passed"}


def test_bound_estimates_trivial_model():
    p = FactorPDE.build(n=1, Sigma="1", A="1", b="0", h="0", theta="0", k=-1, beta="1", T=1.0, region=[(-1, 1)])
    assert bound_estimates(p) == (1.0, 1.0)


def test_bound_estimates_constant_oracle():
    D1, D2 = bound_estimates(constant_oracle())
    assert D1 == pytest.approx(7.0) and D2 == pytest.approx(math.exp(-2.0))
