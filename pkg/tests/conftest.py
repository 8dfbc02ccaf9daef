from __future__ import annotations

import numpy as np
import pytest

from clusterhom import _accel
from clusterhom.cluster import build_cluster_graph, build_periodic_cluster_graph
from clusterhom.coefficients import build_degenerate_field
from clusterhom.environment import BoxDomain, condition_on_origin, sample_poisson


@pytest.fixture(scope="session")
def small_sample():
    """A conditioned d=2, zeta=4 sample on [-6, 6]^2 with its graph."""
    return condition_on_origin(4.0, BoxDomain(2, 6.0), seed=3)


@pytest.fixture(scope="session")
def small_field(small_sample):
    _, graph = small_sample
    return build_degenerate_field(graph, smoothing_radius=0.25)


@pytest.fixture(scope="session")
def torus_sample():
    cfg = sample_poisson(4.0, BoxDomain(2, 4.0), seed=5)
    graph = build_periodic_cluster_graph(cfg)
    return cfg, graph, build_degenerate_field(graph, smoothing_radius=0.25)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    if request.param == "numba" and not _accel.HAVE_NUMBA:
        pytest.skip("numba not importable")
    old = _accel.backend()
    _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(old)


def chain_config(points, half_width=5.0):
    from clusterhom.environment import PointConfiguration

    return PointConfiguration(np.asarray(points, dtype=float), 1.0, BoxDomain(2, half_width))


def chain_graph(points, half_width=5.0):
    return build_cluster_graph(chain_config(points, half_width))


# acceptance criteria report one line each; printed in the terminal summary so they survive capture
_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def report(number: int, passed: bool, detail: str) -> None:
        lines.append(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
        print(lines[-1])

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
