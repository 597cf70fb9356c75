"""Per-frame, per-stage timestamps and the latency decomposition."""

import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

from src.utils.errors import DuplicateStage, IncompleteTrace, InvariantViolation


class Stage(str, Enum):
    CAPTURE = "capture"
    ENCODE_DONE = "encode_done"
    PAYLOAD_DONE = "payload_done"
    SENT = "sent"
    SERVER_IN = "server_in"
    SERVER_OUT = "server_out"
    RECEIVED = "received"
    DEPAYLOAD_DONE = "depayload_done"
    DECODE_DONE = "decode_done"
    DISPLAY = "display"


STAGES = list(Stage)

STAGE_ENTITY = {
    Stage.CAPTURE: "sender",
    Stage.ENCODE_DONE: "sender",
    Stage.PAYLOAD_DONE: "sender",
    Stage.SENT: "sender",
    Stage.SERVER_IN: "server",
    Stage.SERVER_OUT: "server",
    Stage.RECEIVED: "receiver",
    Stage.DEPAYLOAD_DONE: "receiver",
    Stage.DECODE_DONE: "receiver",
    Stage.DISPLAY: "receiver",
}


class Outcome(str, Enum):
    DISPLAYED = "Displayed"
    DROP_LATE = "DropLate"
    DROP_LOSS = "DropLoss"
    DROP_NEED_IDR = "DropNeedIdr"
    IN_FLIGHT = "InFlight"


FRAME_COLUMNS = ["run_id", "ssrc", "frame_id"] + [s.value for s in STAGES] + ["outcome"]


@dataclass
class FrameTrace:
    ssrc: int
    frame_id: int
    stamps: Dict[Stage, int] = field(default_factory=dict)
    raw: Dict[Stage, int] = field(default_factory=dict)
    outcome: Outcome = Outcome.IN_FLIGHT

    def get(self, stage: Stage) -> Optional[int]:
        return self.stamps.get(stage)

    def is_monotone(self) -> bool:
        present = [self.stamps[s] for s in STAGES if s in self.stamps]
        return all(a <= b for a, b in zip(present, present[1:]))

    def row(self, run_id: str, raw: bool = False) -> list:
        source = self.raw if raw else self.stamps
        return ([run_id, self.ssrc, self.frame_id] + [source.get(s) for s in STAGES]
                + [self.outcome.value])


@dataclass(frozen=True)
class Decomposition:
    sender_proc: int
    server_proc: int
    receiver_proc: int
    accum_proc: int
    network: int
    e2e: int

    def as_dict(self) -> Dict[str, int]:
        return {
            "sender_proc": self.sender_proc,
            "server_proc": self.server_proc,
            "receiver_proc": self.receiver_proc,
            "accum_proc": self.accum_proc,
            "network": self.network,
            "e2e": self.e2e,
        }


def decompose(trace: FrameTrace) -> Decomposition:
    if trace.outcome is not Outcome.DISPLAYED:
        raise IncompleteTrace(f"frame {trace.frame_id} was not displayed ({trace.outcome.value})")
    missing = [s.value for s in STAGES if s not in trace.stamps]
    if missing:
        raise IncompleteTrace(f"frame {trace.frame_id} lacks stages {missing}")
    t = trace.stamps
    sender = (t[Stage.PAYLOAD_DONE] - t[Stage.CAPTURE]) + (t[Stage.SENT] - t[Stage.PAYLOAD_DONE])
    server = t[Stage.SERVER_OUT] - t[Stage.SERVER_IN]
    receiver = t[Stage.DISPLAY] - t[Stage.RECEIVED]
    accum = sender + server + receiver
    e2e = t[Stage.DISPLAY] - t[Stage.CAPTURE]
    return Decomposition(sender, server, receiver, accum, e2e - accum, e2e)


class TraceStore:
    """Append-only store of frame traces keyed by (ssrc, frame_id).

    Safe for concurrent appends from the intake and playout contexts.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._traces: Dict[Tuple[int, int], FrameTrace] = {}

    def trace(self, ssrc: int, frame_id: int) -> FrameTrace:
        key = (ssrc, frame_id)
        with self._lock:
            trace = self._traces.get(key)
            if trace is None:
                trace = self._traces[key] = FrameTrace(ssrc, frame_id)
            return trace

    def record_stage(self, ssrc: int, frame_id: int, stage: Stage, ts: int,
                     reference_ts: Optional[int] = None):
        """Store ``ts`` (entity-local) and its server-referenced value once."""
        stage = Stage(stage)
        trace = self.trace(ssrc, frame_id)
        with self._lock:
            if stage in trace.raw:
                raise DuplicateStage(f"{stage.value} already recorded for frame {frame_id}")
            trace.raw[stage] = ts
            trace.stamps[stage] = ts if reference_ts is None else reference_ts

    def set_outcome(self, ssrc: int, frame_id: int, outcome: Outcome):
        trace = self.trace(ssrc, frame_id)
        with self._lock:
            trace.outcome = Outcome(outcome)

    def has_stage(self, ssrc: int, frame_id: int, stage: Stage) -> bool:
        with self._lock:
            trace = self._traces.get((ssrc, frame_id))
            return trace is not None and Stage(stage) in trace.raw

    def traces(self, ssrc: Optional[int] = None) -> List[FrameTrace]:
        with self._lock:
            items = sorted(self._traces.items())
        return [t for (s, _), t in items if ssrc is None or s == ssrc]

    def accounting(self, ssrc: int) -> Counter:
        """Outcome counts over the frames the sender put on the wire."""
        counts = Counter({o: 0 for o in Outcome})
        for trace in self.traces(ssrc):
            if Stage.SENT in trace.stamps:
                counts[trace.outcome] += 1
        return counts

    def frames_sent(self, ssrc: int) -> int:
        return sum(1 for t in self.traces(ssrc) if Stage.SENT in t.stamps)

    def decompositions(self, ssrc: int) -> List[Decomposition]:
        """Decompositions of the displayed frames that carry every stage."""
        out = []
        for trace in self.traces(ssrc):
            if trace.outcome is not Outcome.DISPLAYED:
                continue
            try:
                out.append(decompose(trace))
            except IncompleteTrace:
                # untagged frames carry no relay stages
                continue
        return out


def rows(store: TraceStore, run_id: str, raw: bool = False,
         ssrcs: Optional[Iterable[int]] = None) -> List[list]:
    wanted = set(ssrcs) if ssrcs is not None else None
    return [t.row(run_id, raw) for t in store.traces()
            if wanted is None or t.ssrc in wanted]


class StageProbe:
    """Records one entity's stage timestamps for one stream.

    ``clock`` maps the entity's local timestamps onto the reference timeline.
    With ``entity`` set, only that entity's stages may be recorded.
    """

    def __init__(self, store: Optional[TraceStore], ssrc: int, clock=None,
                 entity: Optional[str] = None):
        self.store = store
        self.ssrc = ssrc
        self.clock = clock
        self.entity = entity

    def reference(self, local_ts: int) -> int:
        return local_ts if self.clock is None else self.clock.to_reference(local_ts)

    def record(self, frame_id: int, stage: Stage, local_ts: int):
        stage = Stage(stage)
        if self.entity is not None and STAGE_ENTITY[stage] != self.entity:
            raise InvariantViolation(f"{self.entity} cannot record {stage.value}")
        if self.store is not None:
            self.store.record_stage(self.ssrc, frame_id, stage, local_ts, self.reference(local_ts))

    def outcome(self, frame_id: int, outcome: Outcome):
        if self.store is not None:
            self.store.set_outcome(self.ssrc, frame_id, outcome)
