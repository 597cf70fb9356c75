import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional

from src.entities.receiver import ReceiverPipeline
from src.entities.relay import Relay
from src.entities.sender import SenderPipeline
from src.entities.supervisor import ExperimentSupervisor, resolve_scenario
from src.metrics.report import render_report, write_report
from src.metrics.resources import ResourceSampler
from src.metrics.stats import summarize
from src.metrics.traces import TraceStore, rows
from src.network.clock_sync import LocalClock
from src.network.runtime import AsyncioRuntime
from src.utils.artifact_store import ArtifactStore
from src.utils.config import SECOND, Config, load_config_file
from src.utils.errors import (ConfigError, InvariantViolation, RecoveryTimeout, ScenarioError,
                              SchemaMismatch, StreamError)

logger = logging.getLogger(__name__)

ROLES = ("sender", "server", "receiver")
RESOURCE_INTERVAL = 1 * SECOND

EXIT_CODES = (
    (ConfigError, 2),
    (ScenarioError, 2),
    (RecoveryTimeout, 3),
    (SchemaMismatch, 4),
    (InvariantViolation, 5),
)


def exit_code(error: StreamError) -> int:
    for kind, code in EXIT_CODES:
        if isinstance(error, kind):
            return code
    return 1


class StreamingOrchestrator:
    """Runs one role over real UDP, whole scenarios in virtual time, and reports."""

    def __init__(self, out_dir: Optional[str] = None):
        Config.validate()
        self.out_dir = Path(out_dir) if out_dir else None

    def run_role(self, role: str, config_file: str, duration_s: Optional[float] = None) -> Path:
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r} (expected one of {', '.join(ROLES)})")
        scenario = load_config_file(config_file, role=role)
        runtime = AsyncioRuntime()
        runtime.add_node("sender", scenario.sender.host)
        runtime.add_node("server", scenario.server.host)
        runtime.add_node("receiver", scenario.receiver.host)

        store = TraceStore()
        sender = scenario.sender
        if role == "server":
            entity = Relay(runtime, scenario.server, (sender.ssrc, sender.preroll_ssrc), store,
                           stream=scenario.receiver.stream)
        elif role == "sender":
            entity = SenderPipeline(runtime, sender, scenario.server, scenario.network, store,
                                    LocalClock())
        else:
            entity = ReceiverPipeline(runtime, scenario.receiver, scenario.server, sender,
                                      scenario.network, store, LocalClock())

        sampler = ResourceSampler(role)

        def sample_resources():
            sampler.sample()
            runtime.call_later(RESOURCE_INTERVAL, sample_resources, label="resources")

        def on_start():
            entity.start()
            sample_resources()

        logger.info("Starting %s role (%s)", role, config_file)
        duration = None if duration_s is None else round(duration_s * SECOND)
        try:
            asyncio.run(runtime.serve(on_start, duration))
        finally:
            entity.stop()
            sampler.sample()
            shard = self._write_shards(role, scenario.name, entity, store, sampler)
            logger.info("%s stopped; shards in %s", role, shard)
        return shard

    def _write_shards(self, role: str, name: str, entity, store: TraceStore,
                      sampler: ResourceSampler) -> Path:
        run_id = f"{name}-{role}"
        artifacts = ArtifactStore(str(self._base_dir() / role))
        artifacts.write_rows("frames.csv", rows(store, run_id))
        artifacts.write_rows("frames_raw.csv", rows(store, run_id, raw=True))
        artifacts.write_rows("resources.csv", sampler.rows(run_id))
        clock = getattr(entity, "clock", None)
        if clock is not None:
            artifacts.write_rows("offsets.csv", [[run_id, role, e.at, e.offset, e.rtt]
                                                 for e in clock.history])
        wall = getattr(entity, "wall_ns", None)
        if wall:
            artifacts.write_rows("timing.csv",
                                 [summarize(wall).row(run_id, "relay_proc_wall")])
        return artifacts.out_dir

    def _base_dir(self) -> Path:
        return self.out_dir or Path(Config.STREAM_OUT_DIR)

    def run_experiment(self, scenario: str, seed: Optional[int] = None,
                       duration_s: Optional[float] = None,
                       scenario_file: Optional[str] = None) -> Path:
        config = resolve_scenario(scenario, scenario_file)
        supervisor = ExperimentSupervisor(config, seed=seed, duration_s=duration_s)
        result = supervisor.run()
        target = self.out_dir or Path(Config.STREAM_OUT_DIR) / result.run_id
        artifacts = ArtifactStore(str(target))
        supervisor.write_artifacts(result, artifacts)
        write_report(artifacts)
        return artifacts.out_dir

    def report(self, artifact_dir: str) -> str:
        path = Path(artifact_dir)
        if not path.is_dir():
            raise SchemaMismatch(f"{path} is not an artifact directory")
        return render_report(ArtifactStore(str(path)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgestream",
        description="Low-latency streaming with handover recovery: roles, experiments, reports.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    for role in ROLES:
        p = sub.add_parser(role, help=f"run the {role} over real UDP until interrupted")
        p.add_argument("--config", required=True, help="role configuration file")
        p.add_argument("--duration-s", type=float, help="stop after this many seconds")
        p.add_argument("--out-dir", help="directory for the CSV shards")

    p = sub.add_parser("experiment", help="run a scenario in virtual time")
    p.add_argument("scenario", nargs="?", default="fog",
                   help="fog, cloud, handover or a scenario file")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration-s", type=float)
    p.add_argument("--out-dir")
    p.add_argument("--scenario-file", help="custom scenario layered on the fog defaults")

    p = sub.add_parser("report", help="render tables from an artifact directory")
    p.add_argument("artifact_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        Config.configure_logging()
        orchestrator = StreamingOrchestrator(getattr(args, "out_dir", None))
        if args.verb in ROLES:
            orchestrator.run_role(args.verb, args.config, args.duration_s)
        elif args.verb == "experiment":
            out = orchestrator.run_experiment(args.scenario, args.seed, args.duration_s,
                                              args.scenario_file)
            print(orchestrator.report(str(out)))
            print(f"Artifacts: {out}")
        else:
            print(orchestrator.report(args.artifact_dir))
    except StreamError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code(e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
