"""Whole-scenario runs in virtual time."""

from dataclasses import replace

import numpy as np
import pytest

from src.entities.supervisor import (ExperimentSupervisor, builtin_scenario, handover_schedule,
                                     resolve_scenario)
from src.metrics.traces import Outcome, Stage
from src.utils.artifact_store import ArtifactStore
from src.utils.config import MS, SECOND
from src.utils.errors import ScenarioError

OUTCOME_COUNTS = ("displayed", "dropped_late", "dropped_loss", "dropped_need_idr", "in_flight")


def _run(name, seed, duration_s=None, **network):
    scenario = builtin_scenario(name)
    if network:
        scenario = replace(scenario, network=replace(scenario.network, **network))
    return ExperimentSupervisor(scenario, seed=seed, duration_s=duration_s).run()


def _mean_e2e(result) -> float:
    return float(np.mean([d.e2e for d in result.decompositions()]))


@pytest.fixture(scope="module")
def fog7():
    return _run("fog", 7)


@pytest.fixture(scope="module")
def cloud7():
    return _run("cloud", 7)


@pytest.fixture(scope="module")
def handover7():
    return _run("handover", 7)


def test_builtin_scenarios():
    fog = builtin_scenario("fog")
    assert fog.duration_s == 60.0 and fog.sender.fps == 30.0
    handover = builtin_scenario("handover")
    assert handover.handover.count == 30
    assert handover.network == fog.network
    with pytest.raises(ScenarioError):
        resolve_scenario("nope")


def test_handover_schedule_is_seeded():
    settings = builtin_scenario("handover").handover
    events = handover_schedule(settings, "receiver")
    assert len(events) == 30
    assert events[0].at == 5 * SECOND
    assert events[1].at - events[0].at == 3 * SECOND
    assert all(100 * MS <= e.outage_duration <= 250 * MS for e in events)
    assert [e.new_address for e in events[:2]] == ["receiver-h1", "receiver-h2"]
    assert handover_schedule(settings, "receiver") == events


@pytest.mark.parametrize("seed", range(1, 12))
@pytest.mark.parametrize("name, duration_s", [("fog", 5.0), ("cloud", 5.0), ("handover", 9.0)])
def test_frame_accounting_is_conserved(name, duration_s, seed):
    counts = _run(name, seed, duration_s).counts
    assert sum(counts[k] for k in OUTCOME_COUNTS) == counts["frames_sent"]
    assert counts["frames_sent"] > 0


def test_fog_latency_decomposition_without_jitter():
    result = _run("fog", 3, 10.0, jitter_ms=0.0)
    decompositions = result.decompositions()
    assert len(decompositions) > 250
    for d in decompositions:
        assert d.e2e == d.accum_proc + d.network
        assert abs(d.network - 50 * MS) <= 1 * MS
        assert 30 * MS <= d.accum_proc <= 50 * MS


def test_fog_run_displays_almost_everything(fog7):
    counts = fog7.counts
    assert counts["displayed"] >= 0.98 * counts["frames_sent"]
    assert counts["relay_foreign_ssrc"] == 0
    assert 80 * MS <= _mean_e2e(fog7) <= 90 * MS


def test_relay_processing_stays_under_5ms(fog7):
    row = next(r for r in fog7.timing if r[1] == "relay_proc_wall")
    assert row[2] > 0
    assert row[7] < 5 * MS


def test_cloud_adds_about_25ms(fog7, cloud7):
    delta = _mean_e2e(cloud7) - _mean_e2e(fog7)
    assert abs(delta - 25 * MS) <= 5 * MS


def test_cross_run_stability():
    results = [_run("fog", seed, 10.0) for seed in range(1, 12)]
    means = [_mean_e2e(r) for r in results]
    grand = float(np.mean(means))
    assert all(abs(m - grand) <= 0.10 * grand for m in means)

    for result in results:
        values = sorted(d.e2e for d in result.decompositions())
        n = len(values)
        row = next(r for r in result.summaries if r[1] == "e2e")
        p5, p95 = row[6], row[7]
        assert p5 == values[-(-5 * n // 100) - 1]
        assert p95 == values[-(-95 * n // 100) - 1]


def test_handover_recovery(handover7):
    records = handover7.records
    assert len(records) == 30
    recoveries = [r.recovery_ms for r in records]
    for record, event in zip(records, handover7.handovers):
        outage_ms = event.outage_duration / MS
        assert record.outage_start_ts == event.at
        assert record.recovery_ms - outage_ms <= 100 + 40 + 2 * 6 + 10
        assert record.first_display_idr is True
        assert record.session_established_ts <= record.first_display_ts
    assert float(np.mean(recoveries)) < 300
    assert max(recoveries) < 600
    assert handover7.counts["sessions_established"] == 31


def test_handover_accounting(handover7):
    counts = handover7.counts
    assert sum(counts[k] for k in OUTCOME_COUNTS) == counts["frames_sent"]
    assert counts["dropped_loss"] > 0


def test_preroll_replays_through_the_relay():
    fog = builtin_scenario("fog")
    scenario = replace(fog, sender=replace(fog.sender, preroll_at_s=20.0))
    supervisor = ExperimentSupervisor(scenario, seed=5, duration_s=23.0)
    result = supervisor.run()

    preroll = result.store.traces(scenario.sender.preroll_ssrc)
    assert len(preroll) == supervisor.sender.preroll_frames > 400
    assert all(t.outcome is Outcome.DISPLAYED for t in preroll)
    captures = [t.get(Stage.CAPTURE) for t in preroll]
    assert max(captures) - min(captures) <= 15 * SECOND
    assert preroll[0].frame_id % scenario.sender.gop_length == 0
    assert result.counts["preroll_frames"] == len(preroll)
    shown = supervisor.receiver.stream(scenario.sender.preroll_ssrc).displayed
    assert shown == sorted(shown)


def test_handover_runs_are_byte_identical(handover7, tmp_path):
    again = _run("handover", 7)
    first = ArtifactStore(str(tmp_path / "a"))
    second = ArtifactStore(str(tmp_path / "b"))
    ExperimentSupervisor(builtin_scenario("handover"), seed=7).write_artifacts(handover7, first)
    ExperimentSupervisor(builtin_scenario("handover"), seed=7).write_artifacts(again, second)
    for name in ("frames.csv", "frames_raw.csv", "recovery.csv", "summary.csv", "offsets.csv"):
        assert first.path(name).read_bytes() == second.path(name).read_bytes(), name
