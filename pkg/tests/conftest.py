import numpy as np
import pytest

from fnas import nn_core as nn
from fnas.search_space import default_schema, enumerable_schema


ACCEPTANCE_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one pass/fail line for the summary."""

    def record(n, ok, detail):
        line = f"C{n:<2} {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_LINES][n] = line
        print(line)
        return ok

    return record


@pytest.fixture
def rng():
    return nn.make_rng(1234, "tests")


@pytest.fixture
def schema():
    return default_schema()


@pytest.fixture
def small_schema():
    return enumerable_schema()


def mlp_reference(params, x, spec, prefix="mlp"):
    """Plain numpy forward written independently of nn_core's tape."""
    h = np.asarray(x, dtype=np.float64)
    for i in range(spec.layers):
        h = h @ params[f"{prefix}.{i}.W"] + params[f"{prefix}.{i}.b"]
        if spec.activation == "prelu":
            a = params[f"{prefix}.{i}.a"][0]
            h = np.where(h > 0, h, a * h)
        elif spec.activation == "tanh":
            h = np.tanh(h)
    return h @ params[f"{prefix}.out.W"] + params[f"{prefix}.out.b"]
