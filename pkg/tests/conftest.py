import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from vlaprune.model import ModelConfig, TokenLayout, build_model
from vlaprune.sim import SceneSpec, TrajectorySpec, generate_episode, layout_for


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(num_layers=4, hidden_dim=16, num_heads=2, ffn_dim=32, seed=3)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_layout():
    return TokenLayout.build([("a", 6), ("b", 4)], num_text=3, num_action=2)


@pytest.fixture(scope="session")
def small_scene():
    return SceneSpec(grid_size=8, feature_dim=32, seed=1)


@pytest.fixture(scope="session")
def small_episode(small_scene):
    return generate_episode(small_scene, TrajectorySpec())


@pytest.fixture(scope="session")
def small_layout(small_scene):
    return layout_for(small_scene, num_text=8, num_action=4)


def random_attention(rng, heads, n, causal=False):
    a = rng.random((heads, n, n)) + 1e-3
    if causal:
        a = np.tril(a)
    return a / a.sum(axis=-1, keepdims=True)


@pytest.fixture(scope="session", autouse=True)
def single_thread_blas():
    # the container has one core; extra BLAS threads only contend
    with threadpool_limits(1):
        yield


# acceptance criteria run last, so the wall-clock check sees the whole session
SESSION = {"start": time.perf_counter(), "lines": []}


def pytest_collection_modifyitems(session, config, items):
    items.sort(key=lambda item: item.nodeid.startswith("tests/test_acceptance.py"))


def pytest_terminal_summary(terminalreporter):
    if SESSION["lines"]:
        terminalreporter.section("acceptance")
        for line in SESSION["lines"]:
            terminalreporter.write_line(line)
