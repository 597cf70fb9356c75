from dataclasses import dataclass, replace
from enum import Enum
from typing import Tuple

from src.utils.errors import ConfigError, IllegalTransition


class SessionPhase(str, Enum):
    INIT = "Init"
    READY = "Ready"
    PLAYING = "Playing"
    DEAD = "Dead"


class SessionEvent(str, Enum):
    SETUP_OK = "SetupOk"
    PLAY_OK = "PlayOk"
    TEARDOWN = "Teardown"
    TIMEOUT = "Timeout"
    PEER_ADDRESS_CHANGED = "PeerAddressChanged"


# events that kill a session from any phase; the server never rebinds a
# session to a new peer address
_FATAL = (SessionEvent.TEARDOWN, SessionEvent.TIMEOUT, SessionEvent.PEER_ADDRESS_CHANGED)

_TRANSITIONS = {
    (SessionPhase.INIT, SessionEvent.SETUP_OK): SessionPhase.READY,
    (SessionPhase.READY, SessionEvent.PLAY_OK): SessionPhase.PLAYING,
    (SessionPhase.PLAYING, SessionEvent.PLAY_OK): SessionPhase.PLAYING,
}


@dataclass(frozen=True)
class SessionState:
    id: str
    phase: SessionPhase
    peer_address: str
    client_rtp_port: int
    last_activity_ts: int
    timeout: int

    @property
    def rtp_destination(self) -> Tuple[str, int]:
        return (self.peer_address, self.client_rtp_port)

    @property
    def alive(self) -> bool:
        return self.phase is not SessionPhase.DEAD

    def touched(self, now: int) -> "SessionState":
        return replace(self, last_activity_ts=now)

    def expired(self, now: int) -> bool:
        return now - self.last_activity_ts > self.timeout


def session_transition(state: SessionState, event: SessionEvent) -> SessionState:
    event = SessionEvent(event)
    if event in _FATAL:
        return replace(state, phase=SessionPhase.DEAD)
    target = _TRANSITIONS.get((state.phase, event))
    if target is None:
        raise IllegalTransition(f"{event.value} not allowed in phase {state.phase.value}")
    return replace(state, phase=target)


@dataclass(frozen=True)
class KeepalivePolicy:
    interval: int
    timeout: int

    def __post_init__(self):
        if not 0 < self.interval < self.timeout:
            raise ConfigError(
                f"keepalive interval ({self.interval} ns) must be > 0 and below the "
                f"session timeout ({self.timeout} ns)"
            )


def keepalive_due(state: SessionState, now: int, interval: int) -> bool:
    KeepalivePolicy(interval, state.timeout)
    return now - state.last_activity_ts >= interval
