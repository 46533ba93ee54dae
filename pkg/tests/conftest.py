import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wawenet import model

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")

_ACCEPTANCE = []


def record_acceptance(number, title, ok, detail):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    _ACCEPTANCE.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)


def mini_config(pools=(4, 4, 3), length=48, padded=(), channels=4, input_channels=1, n_targets=1):
    return model.ModelConfig(
        input_channels=input_channels, n_targets=n_targets, channels=channels,
        sections=model.custom_sections(length, pools, padded), input_length=length,
    )


def mini_net(seed=0, dtype=np.float64, **kw):
    return model.build(mini_config(**kw), seed=seed, dtype=dtype, allow_custom=True)


@pytest.fixture(scope="session")
def full_net():
    return model.build(seed=0).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
