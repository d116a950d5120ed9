"""Measurement registry and CSV report writer.

Every component records into one shared registry: per-second throughput,
end-to-end latency samples, pilot startups, per-window engine rows,
rebalance events and reconstruction timings. Export produces one CSV per
family with a deterministic column and row order, so re-exporting without
new samples yields byte-identical files.

All exported timestamps are milliseconds since the registry was created
(single-process clock, so no synchronization concerns).
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import UnknownComponent


def nearest_rank(values: list[float], q: float) -> float:
    """Nearest-rank percentile (no interpolation); values must be sorted."""
    if not values:
        return 0.0
    rank = max(1, math.ceil(q / 100.0 * len(values)))
    return values[rank - 1]


@dataclass
class LatencySummary:
    count: int = 0
    mean: float = 0.0
    p50: float = 0.0
    p95: float = 0.0
    p99: float = 0.0
    max: float = 0.0


@dataclass
class Snapshot:
    """Per-second throughput series plus a latency summary."""

    component: str
    series: list[tuple[int, int, int]] = field(default_factory=list)  # (second, msgs, bytes)
    total_messages: int = 0
    total_bytes: int = 0
    latency: LatencySummary = field(default_factory=LatencySummary)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


class MetricsRegistry:
    """Thread-safe metric accumulation with deterministic CSV export."""

    def __init__(self, origin_ms: Optional[int] = None):
        self.origin_ms = int(time.time() * 1000) if origin_ms is None else origin_ms
        self._lock = threading.Lock()
        # component -> family ("producer"/"engine"/...)
        self._components: dict[str, str] = {}
        # (component, second) -> [messages, bytes]
        self._throughput: dict[tuple[str, int], list[int]] = {}
        # component -> latency_ms samples
        self._latencies: dict[str, list[float]] = {}
        self._pilots: list[tuple] = []
        self._windows: list[tuple] = []
        self._rebalances: list[tuple] = []
        self._reconstructions: list[tuple] = []

    def now_ms(self) -> float:
        """Milliseconds since registry creation."""
        return time.time() * 1000 - self.origin_ms

    # --- components ---

    def register(self, component: str, family: str = "engine") -> None:
        with self._lock:
            self._components.setdefault(component, family)
            self._latencies.setdefault(component, [])

    def _check(self, component: str) -> None:
        if component not in self._components:
            raise UnknownComponent(component)

    # --- recording ---

    def record_throughput(
        self, component: str, messages: int, nbytes: int, at_ms: Optional[float] = None
    ) -> None:
        """Accumulate into the wall-second bucket containing ``at_ms``."""
        if at_ms is None:
            at_ms = self.now_ms()
        second = int(at_ms // 1000)
        with self._lock:
            self._check(component)
            bucket = self._throughput.setdefault((component, second), [0, 0])
            bucket[0] += messages
            bucket[1] += nbytes

    def record_latency(self, component: str, event_time_ms: float, processed_at_ms: float) -> None:
        with self._lock:
            self._check(component)
            self._latencies[component].append(processed_at_ms - event_time_ms)

    def record_pilot(self, pilot_id: str, service_type: str, workers: int, startup_ms: float) -> None:
        with self._lock:
            self._pilots.append((pilot_id, service_type, workers, startup_ms))

    def record_window(
        self,
        window_index: int,
        planned_at_ms: float,
        records: int,
        nbytes: int,
        processing_ms: float,
        scheduling_delay_ms: float,
        backlog_records: int,
    ) -> None:
        with self._lock:
            self._windows.append(
                (window_index, planned_at_ms, records, nbytes,
                 processing_ms, scheduling_delay_ms, backlog_records)
            )

    def record_rebalance(self, at_ms: float, window_index: int, workers: int, assignment: dict[int, str]) -> None:
        pairs = " ".join(f"{p}:{w}" for p, w in sorted(assignment.items()))
        with self._lock:
            self._rebalances.append((at_ms, window_index, workers, pairs))

    def record_reconstruction(
        self,
        window_index: int,
        message_offset: int,
        algorithm: str,
        iterations: int,
        millis: float,
        rmse_if_reference: Optional[float] = None,
    ) -> None:
        with self._lock:
            self._reconstructions.append(
                (window_index, message_offset, algorithm, iterations, millis, rmse_if_reference)
            )

    # --- aggregation ---

    def _latency_summary(self, samples: list[float]) -> LatencySummary:
        if not samples:
            return LatencySummary()
        ordered = sorted(samples)
        return LatencySummary(
            count=len(ordered),
            mean=sum(ordered) / len(ordered),
            p50=nearest_rank(ordered, 50),
            p95=nearest_rank(ordered, 95),
            p99=nearest_rank(ordered, 99),
            max=ordered[-1],
        )

    def snapshot(self, component: str) -> Snapshot:
        with self._lock:
            self._check(component)
            series = sorted(
                (second, counts[0], counts[1])
                for (comp, second), counts in self._throughput.items()
                if comp == component
            )
            snap = Snapshot(
                component=component,
                series=series,
                total_messages=sum(s[1] for s in series),
                total_bytes=sum(s[2] for s in series),
                latency=self._latency_summary(self._latencies[component]),
            )
        return snap

    def components(self, family: Optional[str] = None) -> list[str]:
        with self._lock:
            return sorted(
                c for c, f in self._components.items() if family is None or f == family
            )

    def window_rows(self) -> list[tuple]:
        with self._lock:
            return sorted(self._windows)

    def pilot_rows(self) -> list[tuple]:
        with self._lock:
            return list(self._pilots)

    # --- export ---

    def export_csv(self, out_dir: str | Path) -> list[Path]:
        """Write one CSV per family; returns the written paths.

        The four core families are always written (header-only when empty);
        rebalances.csv / reconstruction.csv appear only once populated.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with self._lock:
            producer_rows = sorted(
                (second, comp, counts[0], counts[1])
                for (comp, second), counts in self._throughput.items()
                if self._components.get(comp) == "producer"
            )
            latency_rows = []
            for comp in sorted(self._components):
                s = self._latency_summary(self._latencies[comp])
                if s.count == 0:
                    continue
                latency_rows.append((comp, s.count, s.mean, s.p50, s.p95, s.p99, s.max))
            pilots = list(self._pilots)
            windows = sorted(self._windows)
            rebalances = list(self._rebalances)
            reconstructions = list(self._reconstructions)

        written = []

        def emit(name: str, header: list[str], rows: list[tuple]) -> None:
            path = out / name
            _write_csv(path, header, rows)
            written.append(path)

        emit("pilots.csv", ["pilot_id", "service_type", "workers", "startup_ms"], pilots)
        emit("producer.csv", ["second", "producer_id", "messages", "bytes"], producer_rows)
        emit(
            "windows.csv",
            ["window_index", "planned_at_ms", "records", "bytes",
             "processing_ms", "scheduling_delay_ms", "backlog_records"],
            windows,
        )
        emit(
            "latency.csv",
            ["component", "count", "mean_ms", "p50_ms", "p95_ms", "p99_ms", "max_ms"],
            latency_rows,
        )
        if rebalances:
            emit("rebalances.csv", ["at_ms", "window_index", "workers", "assignment"], rebalances)
        if reconstructions:
            emit(
                "reconstruction.csv",
                ["window_index", "message_offset", "algorithm",
                 "iterations", "millis", "rmse_if_reference"],
                reconstructions,
            )
        return written

    def write_summary(self, path: str | Path, extra: Optional[list[str]] = None) -> Path:
        """Human-readable totals next to the CSVs."""
        lines = []
        with self._lock:
            lines.append(f"pilots: {len(self._pilots)}")
            for pid, stype, workers, startup in self._pilots:
                lines.append(f"  {pid} ({stype}) workers={workers} startup_ms={startup:.1f}")
            for family in ("producer", "engine"):
                comps = sorted(c for c, f in self._components.items() if f == family)
                for comp in comps:
                    msgs = 0
                    nbytes = 0
                    for (c, _), counts in self._throughput.items():
                        if c == comp:
                            msgs += counts[0]
                            nbytes += counts[1]
                    s = self._latency_summary(self._latencies[comp])
                    line = f"{family} {comp}: messages={msgs} bytes={nbytes}"
                    if s.count:
                        line += (
                            f" latency_ms p50={s.p50:.1f} p95={s.p95:.1f}"
                            f" p99={s.p99:.1f} max={s.max:.1f}"
                        )
                    lines.append(line)
            lines.append(f"windows: {len(self._windows)}")
            if self._windows:
                recs = sum(w[2] for w in self._windows)
                nb = sum(w[3] for w in self._windows)
                lines.append(f"  records={recs} bytes={nb}")
            if self._rebalances:
                lines.append(f"rebalances: {len(self._rebalances)}")
            if self._reconstructions:
                lines.append(f"reconstructions: {len(self._reconstructions)}")
        if extra:
            lines.extend(extra)
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("\n".join(lines) + "\n")
        return p
