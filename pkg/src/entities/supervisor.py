"""In-process experiments: all three entities over the emulator in virtual time."""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from src.metrics.resources import ResourceSampler
from src.metrics.stats import count_row, summarize
from src.metrics.traces import Outcome, Stage, TraceStore, rows
from src.network.clock_sync import LocalClock
from src.network.netem import CONTROL, MEDIA, HandoverEvent, Netem, NetworkProfile, TimeMode, TimeSource
from src.utils.artifact_store import ArtifactStore
from src.utils.config import (MS, SECOND, HandoverSettings, NetworkSettings, ReceiverSettings,
                              ScenarioConfig, SenderSettings, ServerSettings, load_config_file)
from src.utils.errors import InvariantViolation, ScenarioError

from .receiver import ReceiverPipeline
from .relay import Relay
from .sender import SenderPipeline

logger = logging.getLogger(__name__)


def _fog() -> ScenarioConfig:
    return ScenarioConfig(
        name="fog",
        duration_s=60.0,
        sender=SenderSettings(encode_delay_ms=22.0, payload_delay_ms=3.0, clock_offset_ms=7.0),
        server=ServerSettings(forward_delay_ms=1.0),
        receiver=ReceiverSettings(depayload_delay_ms=1.0, decode_delay_ms=8.0,
                                  clock_offset_ms=-4.0),
        network=NetworkSettings(profile="fog", one_way_ms=25.0, jitter_ms=1.0, loss_rate=0.0),
    )


def _cloud() -> ScenarioConfig:
    fog = _fog()
    return replace(fog, name="cloud",
                   network=replace(fog.network, profile="lte", one_way_ms=37.5, jitter_ms=8.0,
                                   loss_rate=0.0005))


def _handover() -> ScenarioConfig:
    fog = _fog()
    return replace(fog, name="handover", duration_s=100.0,
                   handover=HandoverSettings(count=30, first_at_s=5.0, interval_s=3.0,
                                             outage_min_ms=100.0, outage_max_ms=250.0))


SCENARIOS = {"fog": _fog, "cloud": _cloud, "handover": _handover}


def builtin_scenario(name: str) -> ScenarioConfig:
    if name not in SCENARIOS:
        raise ScenarioError(f"unknown scenario {name!r} (built-in: {', '.join(SCENARIOS)})")
    return SCENARIOS[name]().validate()


def resolve_scenario(name: str, scenario_file: Optional[str] = None) -> ScenarioConfig:
    """Built-in scenario by name, or a scenario file layered on the fog defaults."""
    if scenario_file:
        return load_config_file(scenario_file, base=_fog())
    if name in SCENARIOS:
        return builtin_scenario(name)
    if Path(name).suffix:
        return load_config_file(name, base=_fog())
    raise ScenarioError(f"unknown scenario {name!r} (built-in: {', '.join(SCENARIOS)})")


def handover_schedule(settings: HandoverSettings, host: str,
                      node: str = "receiver") -> List[HandoverEvent]:
    rng = np.random.default_rng(settings.seed)
    outages = rng.uniform(settings.outage_min_ms, settings.outage_max_ms, size=settings.count)
    return [
        HandoverEvent(at=round((settings.first_at_s + i * settings.interval_s) * SECOND),
                      outage_duration=round(outage * MS), new_address=f"{host}-h{i + 1}",
                      node=node)
        for i, outage in enumerate(outages)
    ]


@dataclass
class ExperimentResult:
    run_id: str
    scenario: ScenarioConfig
    store: TraceStore
    records: list
    handovers: List[HandoverEvent]
    counts: Dict[str, int]
    summaries: List[list]
    timing: List[list]
    offsets: List[list]
    resources: List[list] = field(default_factory=list)
    out_dir: Optional[Path] = None

    @property
    def live_ssrc(self) -> int:
        return self.scenario.sender.ssrc

    def decompositions(self):
        return self.store.decompositions(self.live_ssrc)


class ExperimentSupervisor:
    def __init__(self, scenario: ScenarioConfig, seed: Optional[int] = None,
                 duration_s: Optional[float] = None):
        if seed is not None:
            scenario = scenario.with_seed(seed)
        if duration_s is not None:
            scenario = scenario.with_duration(duration_s)
        self.scenario = scenario.validate()
        self.seed = self.scenario.network.seed
        self.run_id = f"{self.scenario.name}-{self.seed}"
        self.store = TraceStore()

        self._netem = None
        self._relay = None
        self._receiver = None
        self._sender = None

    def plan(self) -> List[str]:
        """Entities in start order, plus the scripted events of the run."""
        steps = ["network", "server", "receiver", "sender"]
        if self.scenario.handover.count:
            steps.append("handovers")
        if self.scenario.sender.preroll_at_s is not None:
            steps.append("preroll")
        return steps

    def _log(self, message: str, *args):
        logger.info("[run %s] " + message, self.run_id, *args)

    @property
    def netem(self) -> Netem:
        if self._netem is None:
            net = self.scenario.network
            media = NetworkProfile.from_ms(net.one_way_ms, net.jitter_ms, net.loss_rate)
            control = NetworkProfile.from_ms(net.control_one_way_ms, net.control_jitter_ms,
                                             net.control_loss_rate)
            self._netem = Netem(seed=net.seed, time_source=TimeSource(TimeMode.VIRTUAL),
                                default_profiles={MEDIA: media, CONTROL: control},
                                keep_trace=False)
            self._netem.add_node("sender", self.scenario.sender.host)
            self._netem.add_node("server", self.scenario.server.host)
            self._netem.add_node("receiver", self.scenario.receiver.host)
        return self._netem

    @property
    def relay(self) -> Relay:
        if self._relay is None:
            sender = self.scenario.sender
            self._relay = Relay(self.netem, self.scenario.server,
                                (sender.ssrc, sender.preroll_ssrc), self.store,
                                stream=self.scenario.receiver.stream)
        return self._relay

    @property
    def receiver(self) -> ReceiverPipeline:
        if self._receiver is None:
            s = self.scenario
            clock = LocalClock(true_offset=round(s.receiver.clock_offset_ms * MS))
            self._receiver = ReceiverPipeline(self.netem, s.receiver, s.server, s.sender,
                                              s.network, self.store, clock,
                                              outage_truth=self._outage_truth)
        return self._receiver

    @property
    def sender(self) -> SenderPipeline:
        if self._sender is None:
            s = self.scenario
            clock = LocalClock(true_offset=round(s.sender.clock_offset_ms * MS))
            self._sender = SenderPipeline(self.netem, s.sender, s.server, s.network,
                                          self.store, clock)
        return self._sender

    def _outage_truth(self, detected: int) -> Optional[int]:
        starts = [at for at in self.netem.outage_starts() if at <= detected]
        return starts[-1] if starts else None

    def run(self) -> ExperimentResult:
        sampler = ResourceSampler("experiment")
        sampler.sample()
        plan = self.plan()
        self._log("Starting %s for %.1f s (%s)", self.scenario.name, self.scenario.duration_s,
                  ", ".join(plan))

        handovers: List[HandoverEvent] = []
        if "handovers" in plan:
            handovers = handover_schedule(self.scenario.handover, self.scenario.receiver.host)
            self.netem.schedule_handovers(handovers)

        self.relay.start()
        self.receiver.start()
        self.sender.start()

        end = round(self.scenario.duration_s * SECOND)
        self.netem.step_virtual(end)
        self.sender.stop()
        self.receiver.stop()
        # let frames already on the wire reach a decision
        drain = round((self.scenario.receiver.target_latency_ms + 500) * MS)
        self.netem.step_virtual(end + drain)
        self.relay.stop()
        sampler.sample()

        result = self._collect(handovers)
        result.resources = sampler.rows(self.run_id)
        self.check_invariants(result)
        self._log("Finished: %d frames sent, %d displayed, %d recoveries", result.counts["frames_sent"],
                  result.counts["displayed"], len(result.records))
        return result

    def _collect(self, handovers: List[HandoverEvent]) -> ExperimentResult:
        live = self.scenario.sender.ssrc
        accounting = self.store.accounting(live)
        relay = self.relay.counters
        live_depack = self.receiver.stream(live).depacketizer.counters
        counts = {
            "frames_sent": self.store.frames_sent(live),
            "displayed": accounting[Outcome.DISPLAYED],
            "dropped_late": accounting[Outcome.DROP_LATE],
            "dropped_loss": accounting[Outcome.DROP_LOSS],
            "dropped_need_idr": accounting[Outcome.DROP_NEED_IDR],
            "in_flight": accounting[Outcome.IN_FLIGHT],
            "preroll_frames": self.sender.preroll_frames,
            "relay_ingested": relay.ingested,
            "relay_forwarded": relay.forwarded,
            "relay_foreign_ssrc": relay.foreign_ssrc,
            "relay_gated": relay.gated,
            "duplicate_packets": live_depack.duplicates,
            "late_packets": live_depack.late_packets,
            "frames_reassembled": live_depack.frames_complete,
            "frames_loss_detected": live_depack.frames_lost,
            "sessions_established": self.receiver.sessions_established,
        }

        summaries: List[list] = []
        decompositions = self.store.decompositions(live)
        if decompositions:
            for metric in ("sender_proc", "server_proc", "receiver_proc", "accum_proc",
                           "network", "e2e"):
                values = [d.as_dict()[metric] for d in decompositions]
                summaries.append(summarize(values).row(self.run_id, metric))
        records = list(self.receiver.records)
        recovered = [r.recovery_ms for r in records if r.recovery_ms is not None]
        if recovered:
            summaries.append(summarize(recovered).row(self.run_id, "recovery_ms"))
        summaries.extend(count_row(self.run_id, name, value) for name, value in counts.items())

        timing = []
        if self.relay.wall_ns:
            timing.append(summarize(self.relay.wall_ns).row(self.run_id, "relay_proc_wall"))

        offsets = []
        for entity, clock in (("sender", self.sender.clock), ("receiver", self.receiver.clock)):
            offsets.extend([self.run_id, entity, e.at, e.offset, e.rtt] for e in clock.history)

        return ExperimentResult(self.run_id, self.scenario, self.store, records, handovers,
                                counts, summaries, timing, offsets)

    def check_invariants(self, result: ExperimentResult):
        """Abort the run with a diagnostic when a pipeline invariant does not hold."""
        problems = []
        for trace in self.store.traces():
            if not trace.is_monotone():
                problems.append(f"frame {trace.ssrc:08x}/{trace.frame_id} stages not monotone")
            if (trace.outcome is Outcome.DISPLAYED) != (trace.get(Stage.DISPLAY) is not None):
                problems.append(f"frame {trace.ssrc:08x}/{trace.frame_id} display/outcome mismatch")
        counts = result.counts
        outcomes = sum(counts[k] for k in ("displayed", "dropped_late", "dropped_loss",
                                           "dropped_need_idr", "in_flight"))
        if outcomes != counts["frames_sent"]:
            problems.append(f"accounting {outcomes} != frames sent {counts['frames_sent']}")
        for d in result.decompositions():
            if d.e2e != d.accum_proc + d.network:
                problems.append("decomposition identity broken")
                break
        for stream in self.receiver.streams.values():
            shown = stream.displayed
            if any(a >= b for a, b in zip(shown, shown[1:])):
                problems.append(f"display order not increasing on {stream.ssrc:08x}")
        for record in result.records:
            try:
                record.check()
            except InvariantViolation as e:
                problems.append(str(e))
            if record.first_display_idr is False:
                problems.append(f"recovery {record.handover_id} resumed on a non-IDR frame")
        if self.receiver.sessions_established != 1 + len(result.records):
            problems.append(f"{self.receiver.sessions_established} sessions for "
                            f"{len(result.records)} recoveries")
        if problems:
            for problem in problems:
                logger.error("[run %s] invariant violated: %s", self.run_id, problem)
            raise InvariantViolation(f"{len(problems)} invariant violation(s): {problems[0]}")

    def write_artifacts(self, result: ExperimentResult, store: ArtifactStore) -> Path:
        live, preroll = self.scenario.sender.ssrc, self.scenario.sender.preroll_ssrc
        store.write_rows("frames.csv", rows(self.store, result.run_id, ssrcs=(live, preroll)))
        store.write_rows("frames_raw.csv", rows(self.store, result.run_id, raw=True,
                                                ssrcs=(live, preroll)))
        store.write_rows("recovery.csv", [r.row(result.run_id) for r in result.records])
        store.write_rows("summary.csv", result.summaries)
        store.write_rows("offsets.csv", result.offsets)
        store.write_rows("timing.csv", result.timing)
        store.write_rows("resources.csv", result.resources)
        result.out_dir = store.out_dir
        self._log("Artifacts written to %s", store.out_dir)
        return store.out_dir
