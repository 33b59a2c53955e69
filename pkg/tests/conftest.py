import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rotfda.population import FunctionalPopulation, StratumSpec, TimeGrid, synth_population

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture
def tiny_pop():
    """N=4 constant curves (1, 2, 3, 6) on a 3-point grid over [0, 2], one stratum."""
    g = TimeGrid.uniform(2.0, 3)
    X = np.repeat(np.array([[1.0], [2.0], [3.0], [6.0]]), 3, axis=1)
    return FunctionalPopulation(g, X, ["a"] * 4)


@pytest.fixture
def tiny_varying_pop():
    """Two strata of 4 and 3 units with time-varying curves on a 5-point grid over [0, 4]."""
    g = TimeGrid.uniform(4.0, 5)
    rng = np.random.default_rng(2024)
    X = rng.normal(size=(7, 5)).round(3)
    return FunctionalPopulation(g, X, ["a", "a", "b", "a", "b", "a", "b"])


@pytest.fixture(scope="session")
def synth400():
    g = TimeGrid.from_spacing(24.0, 0.5)
    return synth_population(
        [StratumSpec(200, 1.0, 0.1, name="low", level=1.0), StratumSpec(200, 4.0, 0.1, name="high", level=2.0)], g, 17
    )


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test body sets ``rec.ok`` and ``rec.detail``."""

    class Rec:
        ok = False
        detail = ""

    rec = Rec()
    yield rec
    label = request.node.get_closest_marker("criterion").args[0]
    line = f"ACCEPTANCE {label}: {'PASS' if rec.ok else 'FAIL'}  {rec.detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
