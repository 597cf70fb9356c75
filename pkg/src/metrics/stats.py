from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from src.utils.errors import EmptySeries

SUMMARY_COLUMNS = ["run_id", "metric", "count", "mean", "min", "max", "p5", "p95", "stddev"]


@dataclass(frozen=True)
class Summary:
    count: int
    mean: float
    min: float
    max: float
    p5: float
    p95: float
    stddev: float

    def row(self, run_id: str, metric: str) -> list:
        values = asdict(self)
        return [run_id, metric] + [values[c] for c in SUMMARY_COLUMNS[2:]]


def percentile_rank(sorted_values: np.ndarray, p: int) -> float:
    """Value at 1-indexed rank ceil(p/100 * n) of an ascending array."""
    n = len(sorted_values)
    rank = max(1, -(-p * n // 100))
    return float(sorted_values[rank - 1])


def summarize(values: Sequence[float]) -> Summary:
    data = np.sort(np.asarray(values, dtype=np.float64))
    if data.size == 0:
        raise EmptySeries("cannot summarize an empty series")
    return Summary(
        count=int(data.size),
        mean=float(data.mean()),
        min=float(data[0]),
        max=float(data[-1]),
        p5=percentile_rank(data, 5),
        p95=percentile_rank(data, 95),
        stddev=float(data.std()),
    )


def count_row(run_id: str, metric: str, count: int) -> list:
    return [run_id, metric, int(count), None, None, None, None, None, None]
