import numpy as np
import pytest

from racflow import tensor as T
from racflow.config import RunConfig
from racflow.state import StateSpec
from racflow.tensor import Tensor


class ConstantField:
    """v(s, t) = c, independent of state and time."""

    def __init__(self, c):
        self.c = np.float32(c) if np.isscalar(c) else np.asarray(c, np.float32)

    def __call__(self, s, t):
        return Tensor(np.broadcast_to(self.c, s.shape).copy())


class LinearField:
    """v(s, t) = s."""

    def __call__(self, s, t):
        return s


class TimeScaledField:
    """v(s, t) = t * c."""

    def __init__(self, c):
        self.c = np.asarray(c, np.float32)

    def __call__(self, s, t):
        return Tensor(np.broadcast_to(np.float32(t) * self.c, s.shape).copy())


class ZeroField:
    def __call__(self, s, t):
        return Tensor(np.zeros(s.shape, np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """8x8 geometry with a narrow field for fast pipeline tests."""
    return RunConfig().override({
        "state.height": 8, "state.width": 8, "field.width": 8, "field.depth": 1,
        "train.batch_size": 2, "data.count": 4, "train.iterations": 3,
        "train.checkpoint_every": 2,
    })


@pytest.fixture
def spec():
    return StateSpec(channels=4, height=8, width=8, latent_channels=4, factor=2)


def scalar_state(value: float) -> Tensor:
    return Tensor(np.full((1, 1, 1), value, np.float32))


def grad_of(fn, *arrays):
    leaves = [Tensor(np.asarray(a, np.float32), requires_grad=True) for a in arrays]
    with T.GradientTape() as tape:
        out = fn(*leaves)
    return out, tape.gradient(out, leaves)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
