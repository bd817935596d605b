import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scafuzz.device import default_device
from scafuzz.pipeline import train_models
from scafuzz.targets import aes_target, generate_synthetic_program

settings.register_profile(
    "scafuzz", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("scafuzz")

# acceptance criteria append (name, passed, detail) here; printed at the end of the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


@pytest.fixture(scope="session")
def clean_device():
    return default_device()


@pytest.fixture(scope="session")
def noisy_device():
    return default_device().with_snr(10.0)


@pytest.fixture(scope="session")
def clean_models(clean_device):
    return train_models(clean_device, n_branches=600)


@pytest.fixture(scope="session")
def noisy_models(noisy_device):
    return train_models(noisy_device)


@pytest.fixture(scope="session")
def v1():
    return generate_synthetic_program(1, 42)


@pytest.fixture(scope="session")
def aes():
    return aes_target()


@pytest.fixture
def record():
    def add(name, ok, detail):
        ACCEPTANCE.append((name, bool(ok), detail))
        return ok

    return add


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
