import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from factorhjb.model import (
    MU_GRID,
    AlphaRegime,
    AssumptionError,
    FactorPDE,
    MarketSpec,
    ModelError,
    build_pde_from_market,
    pde_hash,
    validate,
)


def _market(**kw):
    args = dict(r=0, b_stock=0, sigma_stock=1, g=0, a1=1, a2=1, gamma=0.5, w=0, T=1.0, region=[(-1, 1)])
    args.update(kw)
    return MarketSpec.build(**args)


def _at(e, x=0.3):
    return float(np.asarray(e(np.array([[x]]))).ravel()[0])


def test_market_reduction_constant_case():
    p = build_pde_from_market(_market())
    assert _at(p.Sigma[0][0]) == 2.0
    assert _at(p.A[0][0]) == 1.0
    assert _at(p.b[0]) == 0.0 and _at(p.h) == 0.0
    assert p.k == -1.0 and p.theta.value == 0.25
    assert p.regime.alpha == 0.5 and p.a3_mode == "A3"


def test_market_without_a1_switches_to_shifted_ellipticity():
    p = build_pde_from_market(_market(a1=0))
    assert _at(p.A[0][0]) == 0.0
    assert p.a3_mode == "A3_PRIME"
    # smallest grid value with mu * Sigma + A >= eps
    assert p.mu == MU_GRID[0]
    assert p.mu * 2.0 >= p.ellipticity_eps


def test_negative_gamma_lands_in_the_gap():
    p = build_pde_from_market(_market(gamma=-1.0))
    assert p.k == 0.5
    with pytest.raises(ModelError):
        AlphaRegime.from_k(p.k)


def test_potential_keeps_rate_outside_the_risk_factor():
    m = _market(r=0.04, b_stock=0.1, sigma_stock=0.2, w=0.01, gamma=0.3)
    p = build_pde_from_market(m)
    lam = 0.3
    expected = 0.3 * lam**2 / (2 * 0.7) + 0.3 * 0.04 - 0.01
    assert _at(p.h) == pytest.approx(expected, rel=1e-14)


def test_market_rejects_degenerate_gamma():
    for g in (0.0, 1.0, 1.5):
        with pytest.raises(ModelError):
            build_pde_from_market(_market(gamma=g))


def test_identity_model_validates():
    p = FactorPDE.build(
        n=2,
        Sigma=[["1", "0"], ["0", "1"]],
        A=[["1", "0"], ["0", "1"]],
        b=["0", "0"],
        h="0",
        theta="1",
        k=-1,
        beta="1",
        T=1.0,
        region=[(-1, 1), (-1, 1)],
    )
    rep = validate(p, samples=1000)
    assert rep.passed
    assert rep.min_eig_sigma == pytest.approx(1.0) and rep.min_eig_A == pytest.approx(1.0)


def test_terminal_value_touching_zero_fails():
    p = FactorPDE.build(n=1, Sigma="1", A="1", b="0", h="0", theta="1", k=-1, beta="max(x1, 0)", T=1.0, region=[(-1, 1)])
    rep = validate(p, strict=False)
    assert any(v.startswith("A2") for v in rep.violations)
    with pytest.raises(AssumptionError) as exc:
        validate(p)
    assert exc.value.report is not None


def test_shifted_ellipticity_eigenvalue():
    p = FactorPDE.build(
        n=2,
        Sigma=[["1", "0"], ["0", "1"]],
        A=[["-0.5", "0"], ["0", "-0.5"]],
        b=["0", "0"],
        h="0",
        theta="1",
        k=-1,
        beta="1",
        T=1.0,
        region=[(-1, 1), (-1, 1)],
        a3_mode="A3_PRIME",
        mu=0.75,
    )
    rep = validate(p)
    assert rep.min_eig_mu_sigma_A == pytest.approx(0.25)


def test_indefinite_A_fails_plain_ellipticity():
    p = FactorPDE.build(n=1, Sigma="1", A="-0.5", b="0", h="0", theta="1", k=-1, beta="1", T=1.0, region=[(-1, 1)])
    assert not validate(p, strict=False).passed


def test_variable_count_checked():
    with pytest.raises(ModelError):
        FactorPDE.build(n=1, Sigma="1", A="1", b="x2", h="0", theta="1", k=-1, beta="1", T=1.0)


def test_hash_is_stable_and_sensitive():
    a = FactorPDE.build(n=1, Sigma="1", A="1", b="0", h="0", theta="1", k=-1, beta="1", T=1.0)
    b = FactorPDE.build(n=1, Sigma="1", A="1", b="0", h="0", theta="1", k=-1, beta="1", T=1.0)
    c = FactorPDE.build(n=1, Sigma="1", A="1", b="0", h="0.1", theta="1", k=-1, beta="1", T=1.0)
    assert pde_hash(a) == pde_hash(b) != pde_hash(c)


@given(st.floats(-20, 20).filter(lambda k: not 0 <= k <= 1))
def test_alpha_regime_round_trip(k):
    r = AlphaRegime.from_k(k)
    assert r.k == pytest.approx(k, rel=1e-12)
    assert (r.regime == "K_NEG") == (k < 0)
    assert (0 < r.alpha < 1) if k < 0 else r.alpha > 1


@given(st.floats(0.0, 1.0))
def test_alpha_regime_rejects_gap(k):
    with pytest.raises(ModelError):
        AlphaRegime.from_k(k)


@given(st.floats(-0.95, 0.95).filter(lambda g: abs(g) > 1e-3))
def test_consumption_weight_identity(gamma):
    # theta (1 - k) must equal 1 - gamma for the market reduction
    m = _market(gamma=gamma)
    p = build_pde_from_market(m)
    assert p.theta.value * (1 - p.k) == pytest.approx(1 - gamma, rel=1e-12)
    if not 0 <= p.k <= 1:
        assert math.isfinite(p.regime.hjb_weight(p.theta.value))


def test_market_reduction_needs_region():
    m = MarketSpec.build(r="0.02", b_stock="0.07", sigma_stock="0.2", g="-x1", a1="0.3", a2="0.3", gamma=0.5)
    with pytest.raises(ModelError, match="region"):
        build_pde_from_market(m)
