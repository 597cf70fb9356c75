import pytest

from src.network.netem import (CONTROL, MEDIA, HandoverEvent, Netem, NetworkProfile, TimeMode,
                               TimeSource, validate_schedule)
from src.utils.config import MS
from src.utils.errors import ScenarioError, UnknownAddress

SECOND_MS = 1000 * MS


def _pair(profile: NetworkProfile, seed: int = 1):
    net = Netem(seed=seed, default_profiles={MEDIA: profile})
    got = []
    net.bind("b", 9, lambda data, src, now: got.append((data, src, now)))
    net.bind("a", 8, lambda data, src, now: None)
    return net, got


def test_fixed_delay_delivery():
    net, got = _pair(NetworkProfile.from_ms(10))
    net.send("a", 8, ("b", 9), b"x")
    net.step_virtual(50 * MS)
    assert got == [(b"x", ("a", 8), 10 * MS)]
    assert net.now() == 50 * MS
    assert net.trace[0].fate == "delivered"


def test_total_loss_and_no_loss():
    net, got = _pair(NetworkProfile.from_ms(5, loss_rate=1.0))
    for _ in range(20):
        net.send("a", 8, ("b", 9), b"x")
    net.step_virtual(100 * MS)
    assert got == []
    assert {r.fate for r in net.trace} == {"dropped"}

    net, got = _pair(NetworkProfile.from_ms(5, loss_rate=0.0))
    for _ in range(20):
        net.send("a", 8, ("b", 9), b"x")
    net.step_virtual(100 * MS)
    assert len(got) == 20


def test_seeded_runs_are_identical():
    def run(seed):
        net, got = _pair(NetworkProfile.from_ms(20, jitter_ms=5, loss_rate=0.2), seed)
        for i in range(50):
            net.call_at(i * MS, net.send, "a", 8, ("b", 9), bytes([i]))
        net.step_virtual(SECOND_MS)
        return got

    assert run(3) == run(3)
    assert run(3) != run(4)


def test_same_instant_datagrams_share_jitter():
    net, got = _pair(NetworkProfile.from_ms(20, jitter_ms=5))
    for i in range(5):
        net.send("a", 8, ("b", 9), bytes([i]))
    net.step_virtual(SECOND_MS)
    assert len({now for _, _, now in got}) == 1
    assert [data for data, _, _ in got] == [bytes([i]) for i in range(5)]


def test_control_channel_uses_its_own_profile():
    net = Netem(default_profiles={MEDIA: NetworkProfile.from_ms(25),
                                  CONTROL: NetworkProfile.from_ms(3)})
    got = []
    net.bind("b", 9, lambda d, s, now: got.append(now), CONTROL)
    net.bind("a", 8, lambda d, s, now: None, CONTROL)
    net.send("a", 8, ("b", 9), b"ping")
    net.step_virtual(SECOND_MS)
    assert got == [3 * MS]


def test_per_path_profile_overrides_default():
    net, got = _pair(NetworkProfile.from_ms(10))
    net.set_path("a", "b", NetworkProfile.from_ms(40))
    net.send("a", 8, ("b", 9), b"x")
    net.step_virtual(SECOND_MS)
    assert got[0][2] == 40 * MS


def test_unknown_destination():
    net, _ = _pair(NetworkProfile.from_ms(10))
    with pytest.raises(UnknownAddress):
        net.send("a", 8, ("nowhere", 9), b"x")


def test_transmit_decides_fate():
    profile = NetworkProfile.from_ms(10)
    net, _ = _pair(profile)
    assert net.transmit(b"x", ("a", 8), ("b", 9), profile, 0) == 10 * MS
    lossy = NetworkProfile.from_ms(10, loss_rate=1.0)
    assert net.transmit(b"x", ("a", 8), ("b", 9), lossy, 0) is None

    net.apply_handover(HandoverEvent(at=0, outage_duration=50 * MS, new_address="b-h1", node="b"))
    assert net.transmit(b"x", ("a", 8), ("b", 9), profile, 20 * MS) is None
    with pytest.raises(UnknownAddress):
        net.apply_handover(HandoverEvent(at=0, outage_duration=MS, new_address="z", node="ghost"))


def test_handover_outage_and_rebind():
    net, got = _pair(NetworkProfile.from_ms(10))
    changes = []
    net.on_address_change("b", lambda old, new: changes.append((old, new, net.now())))
    net.schedule_handovers([HandoverEvent(at=100 * MS, outage_duration=50 * MS,
                                          new_address="b-h1", node="b")])
    net.call_at(95 * MS, net.send, "a", 8, ("b", 9), b"in-flight")
    net.call_at(120 * MS, net.send, "a", 8, ("b", 9), b"during")
    net.call_at(200 * MS, net.send, "a", 8, ("b", 9), b"old-address")
    net.call_at(200 * MS, net.send, "a", 8, ("b-h1", 9), b"new-address")
    net.step_virtual(300 * MS)

    assert changes == [("b", "b-h1", 150 * MS)]
    assert got == [(b"new-address", ("a", 8), 210 * MS)]
    assert net.host_of("b") == "b-h1"
    assert net.outage_starts() == [100 * MS]
    assert net.in_outage("b", 120 * MS)
    assert not net.in_outage("b", 150 * MS)


def test_schedule_validation():
    first = HandoverEvent(at=100 * MS, outage_duration=200 * MS, new_address="x")
    with pytest.raises(ScenarioError):
        validate_schedule([first, HandoverEvent(at=200 * MS, outage_duration=10 * MS,
                                                new_address="y")])
    with pytest.raises(ScenarioError):
        validate_schedule([first, HandoverEvent(at=50 * MS, outage_duration=10 * MS,
                                                new_address="y")])
    assert validate_schedule([first, HandoverEvent(at=300 * MS, outage_duration=10 * MS,
                                                   new_address="y")])


def test_profile_validation():
    with pytest.raises(ScenarioError):
        NetworkProfile.from_ms(10, loss_rate=1.5)
    with pytest.raises(ScenarioError):
        NetworkProfile(-1)


def test_virtual_time_only_moves_forward():
    clock = TimeSource(TimeMode.VIRTUAL)
    clock.advance_to(10)
    with pytest.raises(ScenarioError):
        clock.advance_to(5)
    with pytest.raises(ScenarioError):
        TimeSource(TimeMode.WALL).advance_to(10)


def test_timers_fire_in_order_and_can_be_cancelled():
    net = Netem()
    fired = []
    net.call_at(30, fired.append, "c")
    net.call_at(10, fired.append, "a")
    cancelled = net.call_at(20, fired.append, "b")
    cancelled.cancel()
    net.call_at(10, fired.append, "a2")
    events = net.step_virtual(100)
    assert fired == ["a", "a2", "c"]
    assert [e.at for e in events] == [10, 10, 30]
    assert net.pending() == 0


def test_loss_rate_matches_profile():
    net, got = _pair(NetworkProfile.from_ms(5, loss_rate=0.1), seed=11)
    for _ in range(10_000):
        net.send("a", 8, ("b", 9), b"x")
    net.step_virtual(SECOND_MS)
    dropped = sum(r.fate == "dropped" for r in net.trace)
    assert abs(dropped / 10_000 - 0.1) <= 0.01
    assert len(got) == 10_000 - dropped
