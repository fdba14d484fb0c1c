import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from scenecnn.architectures import InceptionSpec, build_mini_caffenet, build_mini_googlenet  # noqa: E402
from scenecnn.data import SyntheticSpec, generate_synthetic  # noqa: E402


def tiny_caffenet(num_classes=3, seed=0, size=16, dtype=np.float32):
    net = build_mini_caffenet((3, size, size), num_classes, seed=seed, channels=(2, 3, 2, 2, 2), fc_units=(6, 5))
    return net.astype(dtype)


def tiny_googlenet(num_classes=3, seed=0, size=8, use_aux=True, dtype=np.float32):
    specs = [InceptionSpec(2, 2, 2, 1, 2, 2), InceptionSpec(2, 2, 3, 1, 2, 2)]
    net = build_mini_googlenet((3, size, size), num_classes, specs, use_aux=use_aux, seed=seed, stem_channels=3)
    return net.astype(dtype)


@pytest.fixture
def small_synthetic():
    return generate_synthetic(SyntheticSpec(num_classes=4, image_size=16, samples_per_class=10, seed=3))


def pytest_configure(config):
    config._acceptance = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line and asserts it."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._acceptance.append((number, line))
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config._acceptance:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(config._acceptance):
            terminalreporter.write_line(line)
