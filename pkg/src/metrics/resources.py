import logging
import time
from dataclasses import dataclass
from typing import List

import psutil

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResourceSample:
    entity: str
    at: int
    cpu_percent: float
    rss_bytes: int

    def row(self, run_id: str) -> list:
        return [run_id, self.entity, self.at, self.cpu_percent, self.rss_bytes]


class ResourceSampler:
    """CPU and resident memory of the current process, one sample per call."""

    def __init__(self, entity: str):
        self.entity = entity
        self.samples: List[ResourceSample] = []
        self._process = psutil.Process()
        self._process.cpu_percent(None)  # first call only primes the counter

    def sample(self) -> ResourceSample:
        with self._process.oneshot():
            cpu = self._process.cpu_percent(None)
            rss = self._process.memory_info().rss
        sample = ResourceSample(self.entity, time.time_ns(), cpu, rss)
        self.samples.append(sample)
        logger.debug("%s cpu=%.1f%% rss=%d", self.entity, cpu, rss)
        return sample

    def rows(self, run_id: str) -> List[list]:
        return [s.row(run_id) for s in self.samples]
