import logging
import os
import shutil
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from src.metrics.stats import SUMMARY_COLUMNS
from src.metrics.traces import FRAME_COLUMNS
from .config import Config
from .errors import SchemaMismatch

logger = logging.getLogger(__name__)

RECOVERY_COLUMNS = ["run_id", "handover_id", "outage_start", "detected",
                    "session_established", "first_display", "recovery_ms"]
OFFSET_COLUMNS = ["run_id", "entity", "at", "offset", "rtt"]
RESOURCE_COLUMNS = ["run_id", "entity", "at", "cpu_percent", "rss_bytes"]

SCHEMAS: Dict[str, List[str]] = {
    "frames.csv": FRAME_COLUMNS,
    "frames_raw.csv": FRAME_COLUMNS,
    "recovery.csv": RECOVERY_COLUMNS,
    "summary.csv": SUMMARY_COLUMNS,
    "offsets.csv": OFFSET_COLUMNS,
    # host measurements; the only files that vary between identical runs
    "timing.csv": SUMMARY_COLUMNS,
    "resources.csv": RESOURCE_COLUMNS,
}

INT_COLUMNS = {
    "frames.csv": FRAME_COLUMNS[1:-1],
    "frames_raw.csv": FRAME_COLUMNS[1:-1],
    "recovery.csv": RECOVERY_COLUMNS[1:-1],
    "offsets.csv": ["at", "rtt"],
    "resources.csv": ["at", "rss_bytes"],
    "summary.csv": ["count"],
    "timing.csv": ["count"],
}


class ArtifactStore:
    def __init__(self, out_dir: Optional[str] = None):
        self.out_dir = Path(out_dir or Config.STREAM_OUT_DIR)

        # Ensure directory exists
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_rows(self, name: str, rows: List[list]) -> Path:
        """Write rows under the schema registered for ``name``."""
        columns = SCHEMAS[name]
        frame = pd.DataFrame(rows, columns=columns)
        for column in INT_COLUMNS.get(name, []):
            frame[column] = pd.array(frame[column], dtype="Int64")
        target = self.path(name)
        frame.to_csv(target, index=False, lineterminator="\n", float_format="%.6f")
        logger.debug("Wrote %d rows to %s", len(frame), target)
        return target

    def write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        target.write_text(text)
        return target

    def load(self, name: str, required: bool = True) -> Optional[pd.DataFrame]:
        target = self.path(name)
        if not target.is_file():
            if required:
                raise SchemaMismatch(f"{target} is missing")
            return None
        try:
            frame = pd.read_csv(target)
        except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
            raise SchemaMismatch(f"{target} is not a valid CSV: {e}") from e
        expected = SCHEMAS[name]
        if list(frame.columns) != expected:
            raise SchemaMismatch(f"{target}: columns {list(frame.columns)} != {expected}")
        for column in INT_COLUMNS.get(name, []):
            frame[column] = pd.array(frame[column], dtype="Int64")
        return frame

    def clear(self):
        """Remove every artifact in the directory"""
        if self.out_dir.exists():
            shutil.rmtree(self.out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
