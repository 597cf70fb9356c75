import numpy as np
import pytest

from src.metrics.report import render_report, write_report
from src.metrics.resources import ResourceSampler
from src.metrics.stats import count_row, percentile_rank, summarize
from src.metrics.traces import (STAGES, FrameTrace, Outcome, Stage, StageProbe, TraceStore,
                                decompose, rows)
from src.network.clock_sync import LocalClock
from src.utils.artifact_store import SCHEMAS, ArtifactStore
from src.utils.config import MS
from src.utils.errors import (DuplicateStage, EmptySeries, IncompleteTrace, InvariantViolation,
                              SchemaMismatch)

# capture, encode, payload, sent, server in/out, received, depayload, decode, display
FOG_STAMPS = [0, 22, 25, 25, 50, 51, 76, 77, 85, 85]


def _displayed_trace(store, frame_id=0, stamps=FOG_STAMPS, ssrc=1):
    for stage, ms in zip(STAGES, stamps):
        store.record_stage(ssrc, frame_id, stage, (ms + 33 * frame_id) * MS)
    store.set_outcome(ssrc, frame_id, Outcome.DISPLAYED)
    return store.trace(ssrc, frame_id)


def test_decomposition_identity():
    d = decompose(_displayed_trace(TraceStore()))
    assert d.sender_proc == 25 * MS
    assert d.server_proc == 1 * MS
    assert d.receiver_proc == 9 * MS
    assert d.accum_proc == 35 * MS
    assert d.network == 50 * MS
    assert d.e2e == d.accum_proc + d.network == 85 * MS


def test_decompose_rejects_incomplete_traces():
    store = TraceStore()
    store.record_stage(1, 0, Stage.CAPTURE, 0)
    with pytest.raises(IncompleteTrace):
        decompose(store.trace(1, 0))
    store.set_outcome(1, 0, Outcome.DISPLAYED)
    with pytest.raises(IncompleteTrace):
        decompose(store.trace(1, 0))


def test_stage_written_once():
    store = TraceStore()
    store.record_stage(1, 0, Stage.SENT, 5)
    with pytest.raises(DuplicateStage):
        store.record_stage(1, 0, Stage.SENT, 6)


def test_stage_stamps_keep_raw_and_reference_time():
    store = TraceStore()
    probe = StageProbe(store, 9, LocalClock(true_offset=-4 * MS, estimate=4 * MS))
    probe.record(3, Stage.RECEIVED, 100 * MS)
    trace = store.trace(9, 3)
    assert trace.raw[Stage.RECEIVED] == 100 * MS
    assert trace.get(Stage.RECEIVED) == 104 * MS
    assert rows(store, "r", raw=True)[0][3 + STAGES.index(Stage.RECEIVED)] == 100 * MS


def test_stages_of_another_entity_are_refused():
    store = TraceStore()
    sender = StageProbe(store, 9, entity="sender")
    sender.record(0, Stage.CAPTURE, 0)
    with pytest.raises(InvariantViolation):
        sender.record(0, Stage.DISPLAY, 5 * MS)
    with pytest.raises(InvariantViolation):
        StageProbe(store, 9, entity="receiver").record(0, Stage.SERVER_IN, MS)
    assert set(store.trace(9, 0).stamps) == {Stage.CAPTURE}


def test_store_decompositions_cover_complete_displayed_frames():
    store = TraceStore()
    _displayed_trace(store, 0)
    _displayed_trace(store, 1)
    # displayed without relay stages
    for stage, ms in zip(STAGES, FOG_STAMPS):
        if stage not in (Stage.SERVER_IN, Stage.SERVER_OUT):
            store.record_stage(1, 2, stage, ms * MS)
    store.set_outcome(1, 2, Outcome.DISPLAYED)
    store.record_stage(1, 3, Stage.CAPTURE, 0)
    store.set_outcome(1, 3, Outcome.DROP_LATE)
    decompositions = store.decompositions(1)
    assert len(decompositions) == 2
    assert all(d.e2e == 85 * MS for d in decompositions)


def test_monotone_check():
    trace = FrameTrace(1, 0, stamps={Stage.CAPTURE: 10, Stage.SENT: 5})
    assert not trace.is_monotone()
    assert _displayed_trace(TraceStore()).is_monotone()


def test_accounting_counts_sent_frames_only():
    store = TraceStore()
    _displayed_trace(store, 0)
    store.record_stage(1, 1, Stage.SENT, 1)
    store.set_outcome(1, 1, Outcome.DROP_LATE)
    store.record_stage(1, 2, Stage.SENT, 2)
    store.set_outcome(1, 3, Outcome.DROP_LOSS)  # never sent
    counts = store.accounting(1)
    assert counts[Outcome.DISPLAYED] == 1
    assert counts[Outcome.DROP_LATE] == 1
    assert counts[Outcome.IN_FLIGHT] == 1
    assert counts[Outcome.DROP_LOSS] == 0
    assert sum(counts.values()) == store.frames_sent(1) == 3


def test_summary_matches_sort_oracle():
    rng = np.random.default_rng(11)
    for n in (1, 2, 19, 20, 21, 100, 1001):
        values = rng.normal(80, 5, size=n)
        s = summarize(values)
        ordered = sorted(values)
        # rank ceil(p/100 * n), 1-indexed
        assert s.p5 == ordered[max(1, -(-5 * n // 100)) - 1]
        assert s.p95 == ordered[max(1, -(-95 * n // 100)) - 1]
        assert s.min == ordered[0] and s.max == ordered[-1]
        assert s.count == n
        assert s.stddev == pytest.approx(np.std(values))


def test_percentile_small_series():
    data = np.array([1.0, 2.0, 3.0])
    assert percentile_rank(data, 5) == 1.0
    assert percentile_rank(data, 95) == 3.0
    assert summarize([7.0]).stddev == 0.0


def test_empty_series():
    with pytest.raises(EmptySeries):
        summarize([])


def test_artifacts_round_trip(tmp_path):
    store = TraceStore()
    _displayed_trace(store)
    artifacts = ArtifactStore(str(tmp_path))
    artifacts.write_rows("frames.csv", rows(store, "fog-1"))
    frame = artifacts.load("frames.csv")
    assert list(frame.columns) == SCHEMAS["frames.csv"]
    assert int(frame.loc[0, "display"]) == 85 * MS
    assert frame.loc[0, "outcome"] == "Displayed"


def test_schema_mismatch(tmp_path):
    artifacts = ArtifactStore(str(tmp_path))
    with pytest.raises(SchemaMismatch):
        artifacts.load("frames.csv")
    (tmp_path / "frames.csv").write_text("run_id,nope\nx,1\n")
    with pytest.raises(SchemaMismatch):
        artifacts.load("frames.csv")
    (tmp_path / "summary.csv").write_text("")
    with pytest.raises(SchemaMismatch):
        artifacts.load("summary.csv")


def test_clear_removes_artifacts(tmp_path):
    artifacts = ArtifactStore(str(tmp_path / "out"))
    artifacts.write_text("report.txt", "x")
    artifacts.clear()
    assert list(artifacts.out_dir.iterdir()) == []


def _write_run(tmp_path):
    store = TraceStore()
    for frame_id in range(20):
        _displayed_trace(store, frame_id)
    artifacts = ArtifactStore(str(tmp_path))
    artifacts.write_rows("frames.csv", rows(store, "fog-1"))
    summaries = []
    decompositions = [decompose(t) for t in store.traces(1)]
    for metric in ("sender_proc", "network", "e2e"):
        values = [d.as_dict()[metric] for d in decompositions]
        summaries.append(summarize(values).row("fog-1", metric))
    summaries.append(count_row("fog-1", "frames_sent", 20))
    summaries.append(count_row("fog-1", "displayed", 20))
    artifacts.write_rows("summary.csv", summaries)
    artifacts.write_rows("recovery.csv", [["fog-1", 0, 0, 120 * MS, 200 * MS, 300 * MS, 200.0],
                                          ["fog-1", 1, 0, 110 * MS, 150 * MS, 250 * MS, 150.0]])
    return artifacts


def test_report_tables(tmp_path):
    text = render_report(_write_run(tmp_path))
    assert "Run: fog-1" in text
    assert "capture -> encode_done" in text
    network = next(line for line in text.splitlines() if line.strip().startswith("network"))
    assert "50.00" in network
    assert "frames_sent" in text
    recovery = text.split("Handover recovery")[1]
    assert "150.00" in recovery and "175.00" in recovery and "200.00" in recovery


def test_report_is_a_pure_function_of_the_csvs(tmp_path):
    artifacts = _write_run(tmp_path)
    first = write_report(artifacts).read_text()
    assert render_report(artifacts) == first


def test_report_on_empty_directory(tmp_path):
    with pytest.raises(SchemaMismatch):
        render_report(ArtifactStore(str(tmp_path)))


def test_resource_sampler():
    sampler = ResourceSampler("experiment")
    sample = sampler.sample()
    assert sample.rss_bytes > 0
    assert sampler.rows("fog-1")[0][:2] == ["fog-1", "experiment"]
