import numpy as np
import pandas as pd
import pytest

from twostagesem import SemSpec, generate, get_scenario
from twostagesem.simgen import _specs


@pytest.fixture(scope="session")
def quad_data():
    return generate(get_scenario("quadratic-normal-n500"), seed=11, include_latent=True)


@pytest.fixture(scope="session")
def quad_cov_data():
    return generate(get_scenario("quadratic-covariate-n500"), seed=12, include_latent=True)


@pytest.fixture(scope="session")
def specs():
    return _specs(False)


@pytest.fixture(scope="session")
def specs_cov():
    return _specs(True)


@pytest.fixture(scope="session")
def two_factor_spec():
    """Two correlated factors with a latent regression and a covariate."""
    return SemSpec.factor_model(
        {"f1": ["a1", "a2", "a3"], "f2": ["b1", "b2", "b3"]},
        regressions=[("f2", "f1"), ("f1", "z"), ("a2", "z")],
        covariates=["z"],
    )


def simulate_two_factor(n, rng):
    z = rng.normal(size=n)
    f1 = 0.5 * z + rng.normal(size=n)
    f2 = 0.3 + 0.8 * f1 + rng.normal(scale=0.7, size=n)
    d = {"z": z}
    for j, lam in enumerate([1.0, 0.9, 1.2]):
        d[f"a{j + 1}"] = lam * f1 + (0.4 * z if j == 1 else 0) + rng.normal(scale=0.6, size=n)
        d[f"b{j + 1}"] = 0.1 * j + lam * f2 + rng.normal(scale=0.5, size=n)
    return pd.DataFrame(d)


@pytest.fixture(scope="session")
def two_factor_data():
    return simulate_two_factor(400, np.random.default_rng(5))


# ------------------------------------------------------- acceptance summary
ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record ``(criterion, passed, detail)`` and print it immediately."""

    def record(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
