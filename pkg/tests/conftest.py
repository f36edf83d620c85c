from __future__ import annotations

import numpy as np
import pytest

from proxgate import ml
from proxgate.protocol import SessionManager
from proxgate.registry import DeviceIdentifiers, Group, Registry
from proxgate.rssi import PathLossParams, RssiSample, synth_dataset

SECRET = bytes(range(32))
T0 = 1_700_000_000.0


class FakeClock:
    def __init__(self, now: float = T0):
        self.now = now

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


def ids(n: int) -> DeviceIdentifiers:
    return DeviceIdentifiers(uuid=f"uuid-{n}", imei=f"imei-{n}")


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def registry(clock):
    return Registry(SECRET, clock=clock)


@pytest.fixture
def pair(registry):
    """(requester, owner) signatures; requester signed in."""
    owner = registry.register_device("owner", ids(1), Group.GROUP_ONE)
    requester = registry.register_device("requester", ids(2), Group.GROUP_TWO)
    registry.set_signed_in(requester.signature, True)
    return requester.signature, owner.signature


@pytest.fixture
def manager(registry, clock):
    counter = iter(range(1, 10**9))
    return SessionManager(registry, clock=clock, id_factory=lambda: f"s{next(counter)}")


@pytest.fixture(scope="session")
def noiseless_model():
    data = synth_dataset(2000, params=PathLossParams(shadowing_sigma_db=0.0, rng_seed=11))
    return ml.train_logistic(data)


def readings(a, b, rssi_ab, rssi_ba, ts):
    """One reading per value in each direction."""
    out = [RssiSample(a, b, v, ts) for v in np.atleast_1d(rssi_ab)]
    out += [RssiSample(b, a, v, ts) for v in np.atleast_1d(rssi_ba)]
    return out
