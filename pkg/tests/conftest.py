import numpy as np
import pytest

from acam import diffcore as dc
from acam.diffcore import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar probe sum(out * weights), so every output coordinate matters."""
    return dc.tensor_sum(dc.mul(out, Tensor(weights)))


# acceptance criteria append (number, passed, detail) here; printed after the run
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
