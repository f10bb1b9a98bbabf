import numpy as np
import pytest

from primlearn.execution_model import PrimitiveExecutionModel
from primlearn.lattice import LatticeConfig, generate_primitive_set


@pytest.fixture(scope="session")
def config():
    return LatticeConfig()


@pytest.fixture(scope="session")
def prims(config):
    return generate_primitive_set(config)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def reference_model(prim, sigma=(0.02, 0.02, 0.02, 0.05, 0.05, 0.05), dt_model=0.05):
    """Execution model centered on the reference with constant spread."""
    times = dt_model * np.arange(int(round(prim.t_F / dt_model)) + 1)
    mean = prim.state_at(times)
    var = np.tile(np.asarray(sigma) ** 2, (len(times), 1))
    return PrimitiveExecutionModel(prim.id, dt_model, times, mean, var, 10)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
