import pytest

from src.entities.control_client import ControlClient
from src.entities.relay import Relay
from src.network.clock_sync import LocalClock, SyncSample, estimate_offset
from src.network.netem import CONTROL, Netem, NetworkProfile
from src.utils.config import MS, ServerSettings
from src.utils.errors import NoSamples


def test_sample_arithmetic():
    # client 5 ms behind the server, 10 ms each way, 1 ms server hold
    s = SyncSample(t0=100, t1=100 + 5 + 10, t2=116, t3=116 + 10 - 5)
    assert s.rtt == 20
    assert s.offset == 5


def test_minimum_rtt_sample_wins():
    noisy = SyncSample(0, 30, 30, 10)  # rtt 10, offset 25
    clean = SyncSample(0, 7, 7, 4)  # rtt 4, offset 5
    assert estimate_offset([noisy, clean]) == 5
    # only the k most recent samples count
    assert estimate_offset([clean, noisy], k=1) == 25


def test_no_samples():
    with pytest.raises(NoSamples):
        estimate_offset([])


def test_local_clock_mapping():
    clock = LocalClock(true_offset=7 * MS)
    assert clock.local(100 * MS) == 107 * MS
    clock.add_sample(SyncSample(t0=107 * MS, t1=103 * MS, t2=103 * MS, t3=113 * MS), at=0)
    assert clock.estimate == -7 * MS
    assert clock.to_reference(clock.local(250 * MS)) == 250 * MS
    assert clock.history[-1].rtt == 6 * MS


@pytest.mark.parametrize("offset_ms, forward_ms, reverse_ms", [
    (7.0, 3.0, 3.0),
    (-4.0, 3.0, 3.0),
    (12.5, 2.0, 9.0),
    (-30.0, 15.0, 1.0),
])
def test_estimate_error_bounded_by_path_asymmetry(offset_ms, forward_ms, reverse_ms):
    net = Netem(seed=1)
    Relay(net, ServerSettings(), (1,), None)
    clock = LocalClock(true_offset=round(offset_ms * MS))
    client = ControlClient(net, "client", 7000, ("server", 8554), clock)
    net.set_path("client", "server", NetworkProfile.from_ms(forward_ms), CONTROL)
    net.set_path("server", "client", NetworkProfile.from_ms(reverse_ms), CONTROL)

    client.sync_round(8)
    net.step_virtual(2000 * MS)

    bound = abs(forward_ms - reverse_ms) * MS / 2
    assert len(clock.history) == 8
    for estimate in clock.history:
        # the estimate is reference minus local, i.e. minus the true offset
        assert abs(estimate.offset + clock.true_offset) <= bound
    if forward_ms == reverse_ms:
        assert clock.estimate == -clock.true_offset
