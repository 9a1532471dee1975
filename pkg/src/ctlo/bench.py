"""Per-stage wall-time accounting."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


@dataclass
class StageTiming:
    stage: str
    count: int
    total: float
    mean: float
    p95: float


@dataclass
class Timers:
    """Monotonic-clock accumulators keyed by stage name.

    Nested stages are not subtracted from their parents, so only time
    top-level stages when the totals must add up.
    """

    samples: dict = field(default_factory=dict)
    wall: float = 0.0
    frames: int = 0

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.samples.setdefault(name, []).append(time.perf_counter() - t0)

    def add(self, name: str, seconds: float) -> None:
        self.samples.setdefault(name, []).append(float(seconds))

    def table(self) -> list:
        rows = []
        for name, s in self.samples.items():
            a = np.asarray(s)
            rows.append(StageTiming(name, a.size, float(a.sum()), float(a.mean()), float(np.percentile(a, 95))))
        return rows


def report(result) -> tuple:
    """(rows, text) for an OdometryResult or a bare Timers instance."""
    timers = getattr(result, "timers", result)
    rows = timers.table() if timers is not None else []
    frames = getattr(timers, "frames", 0)
    wall = getattr(timers, "wall", 0.0)
    hz = f"{frames / wall:.2f}" if frames and wall > 0 else "n/a"
    lines = [f"{'stage':<16}{'count':>8}{'total_s':>12}{'mean_ms':>12}{'p95_ms':>12}"]
    for r in rows:
        lines.append(f"{r.stage:<16}{r.count:>8d}{r.total:>12.4f}{1e3 * r.mean:>12.3f}{1e3 * r.p95:>12.3f}")
    lines.append("")
    lines.append(f"frames = {frames}")
    lines.append(f"wall_s = {wall:.4f}")
    lines.append(f"hz = {hz}")
    return rows, "\n".join(lines) + "\n"
