import socket
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedsilo.config import ExperimentConfig

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

ROOT = Path(__file__).resolve().parent.parent
TESTDATA = ROOT / "testdata"


def small_config(**overrides) -> ExperimentConfig:
    """A fast 3-client blobs experiment; keyword overrides patch the JSON dict."""
    d = {
        "name": "small",
        "seed": 3,
        "global_rounds": 2,
        "model": {"kind": "linear_softmax", "input_dim": 3, "class_count": 4,
                  "adapter": {"rank": 2, "scaling": 4.0, "target_names": ["linear.weight"]}},
        "trainer": {"learning_rate": 0.02, "batch_size": 8, "batches_per_round": 10},
        "data": {"source": "synthetic:blobs?classes=4&n=240&dim=3&spread=1.0", "val_fraction": 0.25},
        "partition": {"n_clients": 3, "alpha1": 2.0, "alpha2": 8.0},
        "communication": {"timeout_s": 30, "connect_timeout_s": 10},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(d.get(key), dict):
            d[key] = {**d[key], **value}
        else:
            d[key] = value
    return ExperimentConfig.from_dict(d)


@pytest.fixture
def config():
    return small_config()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
