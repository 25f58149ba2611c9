import numpy as np
import pytest

from amortlearn import autodiff as ad
from amortlearn.sequence_model import SequenceModelConfig


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_seq():
    def make(scheme="causal", d_model=16, n_layers=1, max_context=32):
        return SequenceModelConfig(d_model=d_model, d_ffn=2 * d_model, n_heads=4, n_layers=n_layers, max_context=max_context, masking_scheme=scheme)

    return make


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion and assert it."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def report(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        lines.append((number, line))
        print(line)
        assert passed, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
