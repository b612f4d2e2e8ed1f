import numpy as np
import pytest

from incr_gcf.data import Interaction, chronological_split, index_interactions
from incr_gcf.graph import build_graph
from incr_gcf.model import init_model
from incr_gcf.synthetic import drift_interactions


def make_interactions(n, n_users=7, n_items=5, seed=0):
    rng = np.random.default_rng(seed)
    return [
        Interaction(f"u{rng.integers(n_users)}", f"i{rng.integers(n_items)}", int(t))
        for t in np.sort(rng.integers(0, 10 * n + 1, size=n))
    ]


def random_graph(rng, max_users=6, max_items=6, p=0.4):
    nu = int(rng.integers(1, max_users + 1))
    ni = int(rng.integers(1, max_items + 1))
    mask = rng.random((nu, ni)) < p
    pairs = np.argwhere(mask)
    return build_graph(pairs, nu, ni), pairs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def drift_split():
    ds = index_interactions(drift_interactions(n_users=60, n_items=40, n_groups=4, per_period=(8, 2, 2), seed=3))
    return chronological_split(ds, 0.6, 2)


@pytest.fixture
def tiny_model():
    return init_model(4, 5, dim=3, n_layers=2, seed=1, dtype=np.float64)


def strip_wall_clock(obj):
    """Drop timing fields, which are the only nondeterministic part of a report."""
    if isinstance(obj, dict):
        return {k: strip_wall_clock(v) for k, v in obj.items() if "seconds" not in k}
    if isinstance(obj, list):
        return [strip_wall_clock(v) for v in obj]
    return obj


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
