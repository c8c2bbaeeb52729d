import functools

import pytest

from rdoe.network import bundled_networks, load_bundled
from rdoe.nlp import RDOEEngine

BUNDLED = tuple(bundled_networks())
DESK = ("five_network", "desk_k4", "desk_k8")


@functools.lru_cache(maxsize=None)
def network(name):
    return load_bundled(name)


@functools.lru_cache(maxsize=None)
def engine(name, optimize_q=False):
    return RDOEEngine(network(name), optimize_q=optimize_q)


@functools.lru_cache(maxsize=None)
def envelope(name, strategy, optimize_q=False):
    return engine(name, optimize_q).solve(strategy)


@pytest.fixture(scope="session")
def nets():
    return {name: network(name) for name in BUNDLED}


@pytest.fixture(scope="session")
def solved():
    return envelope


@pytest.fixture(scope="session")
def engines():
    return engine


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
