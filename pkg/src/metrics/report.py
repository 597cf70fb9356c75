"""Human-readable tables rendered from the CSV artifacts of one run.

The report only reads files through :class:`ArtifactStore`, so rendering the
same directory twice always gives the same text.
"""

import logging
from pathlib import Path
from typing import List, Optional

import pandas as pd

from src.utils.artifact_store import ArtifactStore
from src.utils.config import MS
from src.utils.errors import EmptySeries

from .stats import summarize
from .traces import STAGES, Outcome

logger = logging.getLogger(__name__)

DECOMPOSITION_METRICS = ["sender_proc", "server_proc", "receiver_proc", "accum_proc",
                         "network", "e2e"]
ACCOUNTING_METRICS = ["frames_sent", "displayed", "dropped_late", "dropped_loss",
                      "dropped_need_idr", "in_flight", "preroll_frames", "relay_foreign_ssrc",
                      "duplicate_packets", "late_packets", "sessions_established"]


def _ms(value) -> Optional[float]:
    return None if pd.isna(value) else round(float(value) / MS, 3)


def _table(title: str, frame: pd.DataFrame) -> str:
    if frame.empty:
        return f"{title}\n  (no data)\n"
    body = frame.to_string(index=False, float_format=lambda v: f"{v:.2f}", na_rep="-")
    return f"{title}\n{body}\n"


def _live_frames(frames: pd.DataFrame) -> pd.DataFrame:
    # the live stream is the one carrying the most frames; pre-roll is a short replay
    if frames.empty:
        return frames
    live = frames["ssrc"].value_counts().sort_index().idxmax()
    return frames[frames["ssrc"] == live]


def stage_table(frames: pd.DataFrame) -> pd.DataFrame:
    """Mean/p5/p95 of each hop between consecutive stages of displayed frames."""
    shown = _live_frames(frames)
    shown = shown[shown["outcome"] == Outcome.DISPLAYED.value]
    out = []
    for prev, cur in zip(STAGES, STAGES[1:]):
        pair = shown[[prev.value, cur.value]].dropna()
        deltas = (pair[cur.value] - pair[prev.value]).astype("int64").tolist()
        try:
            s = summarize(deltas)
        except EmptySeries:
            continue
        out.append({"stage": f"{prev.value} -> {cur.value}", "frames": s.count,
                    "mean_ms": s.mean / MS, "p5_ms": s.p5 / MS, "p95_ms": s.p95 / MS})
    return pd.DataFrame(out)


def decomposition_table(summary: pd.DataFrame) -> pd.DataFrame:
    rows = summary.set_index("metric")
    out = []
    for metric in DECOMPOSITION_METRICS:
        if metric not in rows.index:
            continue
        r = rows.loc[metric]
        out.append({"component": metric, "frames": int(r["count"]), "mean_ms": _ms(r["mean"]),
                    "p5_ms": _ms(r["p5"]), "p95_ms": _ms(r["p95"]), "stddev_ms": _ms(r["stddev"])})
    return pd.DataFrame(out)


def accounting_table(summary: pd.DataFrame) -> pd.DataFrame:
    counts = summary[summary["mean"].isna()].set_index("metric")["count"]
    return pd.DataFrame([{"counter": name, "value": int(counts[name])}
                         for name in ACCOUNTING_METRICS if name in counts.index])


def recovery_table(recovery: pd.DataFrame) -> pd.DataFrame:
    values = recovery["recovery_ms"].dropna()
    if values.empty:
        return pd.DataFrame()
    return pd.DataFrame([{"handovers": len(recovery), "recovered": len(values),
                          "min_ms": float(values.min()), "mean_ms": float(values.mean()),
                          "max_ms": float(values.max())}])


def render_report(store: ArtifactStore) -> str:
    """Render every table; raises SchemaMismatch for a missing or malformed CSV."""
    frames = store.load("frames.csv")
    summary = store.load("summary.csv")
    recovery = store.load("recovery.csv", required=False)

    run_ids = sorted(set(summary["run_id"].astype(str)) | set(frames["run_id"].astype(str)))
    sections: List[str] = [f"Run: {', '.join(run_ids) or '-'}\n"]
    sections.append(_table("Per-stage latency (displayed frames, live stream)",
                           stage_table(frames)))
    sections.append(_table("Latency decomposition", decomposition_table(summary)))
    sections.append(_table("Frame accounting", accounting_table(summary)))
    if recovery is not None:
        sections.append(_table("Handover recovery", recovery_table(recovery)))
    return "\n".join(sections)


def write_report(store: ArtifactStore) -> Path:
    text = render_report(store)
    target = store.write_text("report.txt", text)
    logger.info("Report written to %s", target)
    return target
