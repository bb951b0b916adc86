import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)
# tests must never reach a real completion service
os.environ.pop("WIREHALLU_LLM_ENDPOINT", None)

settings.register_profile(
    "repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_config():
    from wirehallu.evaluation import RunConfig

    return RunConfig()


@pytest.fixture(scope="session")
def shared_artifacts():
    """Per-seed artifacts for ``desk_config``, shared by every slow test."""
    return {}


@pytest.fixture(scope="session")
def seed0(desk_config, shared_artifacts):
    """Seed-0 dataset, trained GAN and calibrated validator."""
    from wirehallu.evaluation import prepare_seed

    if 0 not in shared_artifacts:
        shared_artifacts[0] = prepare_seed(desk_config, 0)
    return shared_artifacts[0]


@pytest.fixture(scope="session")
def desk_sweep(desk_config, shared_artifacts, tmp_path_factory):
    """Full desk-scale sweep over every strategy, SNR and seed.

    Returns (result, output dir, seconds). Preparation already paid for by
    other tests is added back so the time covers the whole pipeline.
    """
    import time

    from wirehallu.evaluation import sweep

    prepaid = sum(a.seconds.get("prepare", 0.0) for a in shared_artifacts.values())
    out = tmp_path_factory.mktemp("desk_sweep")
    t0 = time.perf_counter()
    result = sweep(desk_config, out, artifacts=shared_artifacts)
    return result, out, time.perf_counter() - t0 + prepaid


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
