import os

import hypothesis
import numpy as np
import pytest

from aberrant_mix.model import CfaParams, EfaParams, FactorStructure, MixtureParams, MixtureReg

hypothesis.settings.register_profile("default", deadline=None, max_examples=50)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# pass/fail lines from tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_params(rng, p, q, K, C=0, means_fixed_zero=False, structure=None):
    """Valid random parameters with a simple CFA structure."""
    structure = structure or FactorStructure.simple(p, q)
    lam1 = rng.uniform(0.3, 1.0, (p, q)) * structure.mask
    a = rng.normal(size=(q, q + 2))
    cov = a @ a.T + q * np.eye(q)
    d = np.sqrt(np.diag(cov))
    phi = cov / np.outer(d, d)
    np.fill_diagonal(phi, 1.0)
    mu = np.zeros(q) if means_fixed_zero else rng.normal(size=q)
    cfa = CfaParams(lam1, phi, rng.uniform(0.2, 1.0, p), mu, means_fixed_zero)
    efa = EfaParams(rng.normal(size=(p, K)), rng.uniform(0.2, 1.0, p), rng.normal(size=K))
    reg = MixtureReg(rng.normal(scale=0.5, size=C + 1))
    return MixtureParams(cfa, efa, reg), structure


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
