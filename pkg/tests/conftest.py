import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from czsl import synthgen

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_world():
    """40 classes, half target, default splits."""
    spec = synthgen.WorldSpec(n_classes=40, n_scenes=400, seed=11, d=8, d_visual=12, theme_strength=0.5)
    ds, emb, truth = synthgen.generate(spec)
    ds = synthgen.prepare(ds, 0.5, 11)
    return ds, emb, truth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
