import numpy as np
import pytest

from src.models.drift import (Composite, DriftSpec, LinearDistributedDelay, ModulatedDamping,
                              OrnsteinUhlenbeck)
from src.models.history import PastHistory, TailModel

DT = 0.01
PAST_WINDOW = 20.0
# y_-(s) = 0.1 (e^{0.5|s|} - 1): endpoint 0, separated from the zero past by K' e^{lambda'|s|}
K_PRIME = 0.1
RATE_PRIME = 0.5


@pytest.fixture
def ou_spec():
    return DriftSpec(OrnsteinUhlenbeck(b=0.5))


@pytest.fixture
def md_spec():
    return DriftSpec(ModulatedDamping(b=1.0, epsilon=0.5, rate=1.0))


@pytest.fixture
def ldd_spec():
    return DriftSpec(LinearDistributedDelay(b=1.0, kappa=0.3, rate=1.0))


@pytest.fixture
def zero_drift():
    return DriftSpec(Composite(()))


def separated_tail(dimension: int = 1) -> TailModel:
    u = np.zeros(dimension)
    u[0] = 1.0
    return TailModel(constant=tuple(-K_PRIME * u), amplitude=K_PRIME, rate=RATE_PRIME, direction=tuple(u))


def past_pair(spec: DriftSpec, dt: float = DT, window: float = PAST_WINDOW):
    """(zero past, separated past) sharing the endpoint 0."""
    x_past = PastHistory.zeros(spec.dimension, dt, window, spec.kernels)
    y_past = PastHistory.from_tail(separated_tail(spec.dimension), spec.dimension, dt, window, spec.kernels)
    return x_past, y_past


@pytest.fixture
def pasts():
    return past_pair
