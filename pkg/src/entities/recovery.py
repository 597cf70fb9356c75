"""Connectivity monitoring and session re-establishment after a handover.

The monitor itself is a pure state machine: :func:`monitor_step` advances the
timers, and the ``on_*`` functions fold in observations (media arrival, probe
results, address-change notifications). The receiver owns the state and
executes the returned actions.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, List, Optional, Tuple

from src.control.messages import ControlMessage, Method, Transport
from src.utils.config import MS
from src.utils.errors import ConfigError, IllegalTransition, InvariantViolation, RecoveryTimeout

logger = logging.getLogger(__name__)


class ConnectivityPhase(str, Enum):
    HEALTHY = "Healthy"
    SUSPECTED_DOWN = "SuspectedDown"
    DOWN = "Down"
    RECONNECTING = "Reconnecting"
    RECOVERED = "Recovered"


class MonitorAction(str, Enum):
    SEND_PROBE = "SendProbe"
    START_HANDSHAKE = "StartHandshake"
    GIVE_UP = "GiveUp"


_ALLOWED = {
    (ConnectivityPhase.HEALTHY, ConnectivityPhase.SUSPECTED_DOWN),
    (ConnectivityPhase.SUSPECTED_DOWN, ConnectivityPhase.DOWN),
    (ConnectivityPhase.DOWN, ConnectivityPhase.RECONNECTING),
    (ConnectivityPhase.RECONNECTING, ConnectivityPhase.RECOVERED),
    (ConnectivityPhase.RECOVERED, ConnectivityPhase.HEALTHY),
    # explicit address-change notification
    (ConnectivityPhase.HEALTHY, ConnectivityPhase.DOWN),
    # media resumed before the outage was confirmed
    (ConnectivityPhase.SUSPECTED_DOWN, ConnectivityPhase.HEALTHY),
}


@dataclass(frozen=True)
class MonitorConfig:
    rtp_silence_timeout: int = 100 * MS
    ping_interval: int = 20 * MS
    recovery_cap: int = 10_000 * MS

    def __post_init__(self):
        if self.rtp_silence_timeout <= 0 or self.ping_interval <= 0 or self.recovery_cap <= 0:
            raise ConfigError("monitor timers must be > 0")


@dataclass(frozen=True)
class ConnectivityState:
    phase: ConnectivityPhase = ConnectivityPhase.HEALTHY
    last_rtp_rx_ts: int = 0
    last_ping_ok_ts: Optional[int] = None
    last_probe_ts: Optional[int] = None
    probe_failures: int = 0
    # first detection instant of the current episode
    episode_start: Optional[int] = None


def _move(state: ConnectivityState, phase: ConnectivityPhase, **changes) -> ConnectivityState:
    if phase is not state.phase and (state.phase, phase) not in _ALLOWED:
        raise IllegalTransition(f"connectivity {state.phase.value} -> {phase.value}")
    return replace(state, phase=phase, **changes)


def monitor_step(state: ConnectivityState, now: int,
                 cfg: MonitorConfig) -> Tuple[ConnectivityState, List[MonitorAction]]:
    actions: List[MonitorAction] = []
    phase = state.phase

    if phase in (ConnectivityPhase.DOWN, ConnectivityPhase.RECONNECTING):
        if state.episode_start is not None and now - state.episode_start > cfg.recovery_cap:
            return state, [MonitorAction.GIVE_UP]

    if phase is ConnectivityPhase.HEALTHY:
        if now - state.last_rtp_rx_ts > cfg.rtp_silence_timeout:
            state = _move(state, ConnectivityPhase.SUSPECTED_DOWN, episode_start=now,
                          probe_failures=0, last_probe_ts=now)
            actions.append(MonitorAction.SEND_PROBE)
        return state, actions

    if phase is ConnectivityPhase.SUSPECTED_DOWN:
        if now - state.last_rtp_rx_ts > 2 * cfg.rtp_silence_timeout:
            # control answers but media stays away: the session is gone
            state = _move(state, ConnectivityPhase.DOWN, probe_failures=0)
            phase = state.phase

    if phase in (ConnectivityPhase.SUSPECTED_DOWN, ConnectivityPhase.DOWN):
        if state.last_probe_ts is None or now - state.last_probe_ts >= cfg.ping_interval:
            state = replace(state, last_probe_ts=now)
            actions.append(MonitorAction.SEND_PROBE)
    return state, actions


def on_rtp(state: ConnectivityState, now: int) -> ConnectivityState:
    state = replace(state, last_rtp_rx_ts=now)
    if state.phase in (ConnectivityPhase.SUSPECTED_DOWN, ConnectivityPhase.RECOVERED):
        return _move(state, ConnectivityPhase.HEALTHY, probe_failures=0, episode_start=None)
    return state


def on_probe_result(state: ConnectivityState, now: int,
                    reachable: bool) -> Tuple[ConnectivityState, List[MonitorAction]]:
    """Fold in one probe outcome; any answer, even an error status, proves reachability."""
    if state.phase not in (ConnectivityPhase.SUSPECTED_DOWN, ConnectivityPhase.DOWN):
        return state, []
    if not reachable:
        failures = state.probe_failures + 1
        if state.phase is ConnectivityPhase.SUSPECTED_DOWN and failures >= 2:
            return _move(state, ConnectivityPhase.DOWN, probe_failures=failures), []
        return replace(state, probe_failures=failures), []
    state = replace(state, last_ping_ok_ts=now, probe_failures=0)
    if state.phase is ConnectivityPhase.DOWN:
        return _move(state, ConnectivityPhase.RECONNECTING), [MonitorAction.START_HANDSHAKE]
    return state, []


def on_address_change(state: ConnectivityState,
                      now: int) -> Tuple[ConnectivityState, List[MonitorAction]]:
    if state.phase in (ConnectivityPhase.HEALTHY, ConnectivityPhase.SUSPECTED_DOWN):
        start = state.episode_start if state.episode_start is not None else now
        state = _move(state, ConnectivityPhase.DOWN, episode_start=start, probe_failures=0,
                      last_probe_ts=now)
        return state, [MonitorAction.SEND_PROBE]
    if state.phase is ConnectivityPhase.DOWN:
        return replace(state, last_probe_ts=now), [MonitorAction.SEND_PROBE]
    return state, []


def on_session_established(state: ConnectivityState, now: int) -> ConnectivityState:
    return _move(state, ConnectivityPhase.RECOVERED)


@dataclass
class RecoveryRecord:
    handover_id: int
    outage_start_ts: int
    detected_ts: int
    session_established_ts: Optional[int] = None
    first_display_ts: Optional[int] = None
    first_display_idr: Optional[bool] = None

    @property
    def recovery_ms(self) -> Optional[float]:
        if self.session_established_ts is None:
            return None
        return (self.session_established_ts - self.outage_start_ts) / MS

    def check(self):
        chain = [self.outage_start_ts, self.detected_ts, self.session_established_ts,
                 self.first_display_ts]
        present = [ts for ts in chain if ts is not None]
        if any(a > b for a, b in zip(present, present[1:])):
            raise InvariantViolation(f"recovery {self.handover_id} timestamps out of order: {chain}")
        return self

    def row(self, run_id: str) -> list:
        return [run_id, self.handover_id, self.outage_start_ts, self.detected_ts,
                self.session_established_ts, self.first_display_ts, self.recovery_ms]


@dataclass(frozen=True)
class HandshakePolicy:
    retry_backoff: int = 50 * MS
    request_timeout: int = 200 * MS
    recovery_cap: int = 10_000 * MS


class Reconnector:
    """Fresh SETUP + PLAY from the current address, retried until the cap."""

    def __init__(self, client, client_rtp_port: int, policy: HandshakePolicy,
                 episode_start: int, on_established: Callable[[str, int], None]):
        self.client = client
        self.client_rtp_port = client_rtp_port
        self.policy = policy
        self.episode_start = episode_start
        self.on_established = on_established
        self.attempts = 0
        self.done = False
        self._timer = None

    def start(self):
        self.attempts += 1
        now = self.client.runtime.now()
        if now - self.episode_start > self.policy.recovery_cap:
            raise RecoveryTimeout(
                f"no session after {(now - self.episode_start) / MS:.0f} ms "
                f"({self.attempts - 1} attempts)"
            )
        logger.debug("Handshake attempt %d", self.attempts)
        self.client.request(Method.SETUP, self._on_setup, self.policy.request_timeout,
                            transport=Transport(self.client_rtp_port))

    def cancel(self):
        self.done = True
        if self._timer is not None:
            self._timer.cancel()

    def _retry(self, reason: str):
        if self.done:
            return
        logger.debug("Handshake failed (%s); retrying in %d ms", reason,
                     self.policy.retry_backoff // MS)
        self._timer = self.client.runtime.call_later(self.policy.retry_backoff, self.start,
                                                     label="handshake-retry")

    def _on_setup(self, reply: Optional[ControlMessage], _local_now: int):
        if self.done:
            return
        if reply is None or not reply.ok or reply.session_id is None:
            self._retry("SETUP " + ("timeout" if reply is None else str(reply.status)))
            return
        session_id = reply.session_id
        self.client.request(Method.PLAY,
                            lambda r, t: self._on_play(session_id, r),
                            self.policy.request_timeout, session_id=session_id)

    def _on_play(self, session_id: str, reply: Optional[ControlMessage]):
        if self.done:
            return
        if reply is None or not reply.ok:
            self._retry("PLAY " + ("timeout" if reply is None else str(reply.status)))
            return
        self.done = True
        self.on_established(session_id, self.client.runtime.now())


def reconnect(client, client_rtp_port: int, policy: HandshakePolicy, episode_start: int,
              on_established: Callable[[str, int], None]) -> Reconnector:
    reconnector = Reconnector(client, client_rtp_port, policy, episode_start, on_established)
    reconnector.start()
    return reconnector
