"""NTP-style offset estimation against the server's reference clock.

``offset`` is reference minus local: a local timestamp maps onto the server
timeline as ``local + offset``.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

from src.utils.errors import NoSamples

logger = logging.getLogger(__name__)

DEFAULT_K = 8


@dataclass(frozen=True)
class SyncSample:
    t0: int  # client send (client clock)
    t1: int  # server receive (server clock)
    t2: int  # server send (server clock)
    t3: int  # client receive (client clock)

    @property
    def rtt(self) -> int:
        return (self.t3 - self.t0) - (self.t2 - self.t1)

    @property
    def offset(self) -> float:
        return ((self.t1 - self.t0) + (self.t2 - self.t3)) / 2


def estimate_offset(samples: Sequence[SyncSample], k: int = DEFAULT_K) -> float:
    """Offset of the minimum-RTT sample among the ``k`` most recent."""
    if not samples:
        raise NoSamples("no clock sync samples collected")
    recent = list(samples)[-max(1, k):]
    return min(recent, key=lambda s: s.rtt).offset


@dataclass(frozen=True)
class OffsetEstimate:
    at: int
    offset: float
    rtt: int


@dataclass
class LocalClock:
    """An entity clock running ``true_offset`` ahead of the reference clock."""
    true_offset: int = 0
    estimate: float = 0.0
    history: List[OffsetEstimate] = field(default_factory=list)
    samples: List[SyncSample] = field(default_factory=list)

    def local(self, reference_now: int) -> int:
        return reference_now + self.true_offset

    def to_reference(self, local_ts: int) -> int:
        return int(round(local_ts + self.estimate))

    def add_sample(self, sample: SyncSample, k: int = DEFAULT_K, at: Optional[int] = None):
        self.samples.append(sample)
        del self.samples[:-max(k, 1)]
        self.estimate = estimate_offset(self.samples, k)
        best = min(self.samples, key=lambda s: s.rtt)
        self.history.append(OffsetEstimate(at if at is not None else sample.t3,
                                           self.estimate, best.rtt))
        logger.debug("Clock offset estimate %.0f ns (rtt %d ns)", self.estimate, best.rtt)
