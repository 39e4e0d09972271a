from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from factorhjb.model import FactorPDE

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "factorhjb" / "configs"


@pytest.fixture
def configs_dir() -> Path:
    return CONFIGS


def constant_oracle(**kw) -> FactorPDE:
    args = dict(n=1, Sigma="1", A="1", b="0", h="0", theta="1", k=-1, beta="1", T=1.0, region=[(-5.0, 5.0)])
    args.update(kw)
    return FactorPDE.build(**args)


def oracle_value(t, T=1.0):
    """G for the constant model: u = G^2 solves u' = -4 with u(T) = 1."""
    return np.sqrt(1.0 + 4.0 * (T - np.asarray(t, float)))


@pytest.fixture
def oracle_pde() -> FactorPDE:
    return constant_oracle()


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> str:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
