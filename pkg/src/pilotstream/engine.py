"""Micro-batch stream-processing engine.

Plans fixed processing-time windows over a topic's partitions, runs one
task per non-empty partition on pilot workers, merges partition results
through the operator's exclusive merge phase and only then commits
offsets (at-least-once; exactly-once effect for deterministic operators
because ranges are fixed before execution).

If a window overruns, the next one is planned immediately and covers the
accumulated backlog. Worker-set changes trigger a balanced partition
rebalance that is applied between batches.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .errors import OperatorError, StreamFailed, UnknownOperator
from .metrics import MetricsRegistry

logger = logging.getLogger(__name__)

# Record payloads equal to this marker end a partition: they advance
# offsets but are never handed to operators.
END_OF_STREAM = b"\x00~end-of-stream~\x00"

DEFAULT_MAX_RETRIES = 3
_FETCH_CHUNK = 64 * 1024 * 1024


@dataclass
class StreamDefinition:
    topic: str
    group: str = "stream"
    window_ms: int = 1000
    operator: str = "identity"
    operator_config: dict[str, Any] = field(default_factory=dict)
    # back-pressure cap: records admitted per partition per window
    max_records_per_window: Optional[int] = None
    start: str = "resume"  # resume | earliest | latest
    max_retries: int = DEFAULT_MAX_RETRIES


@dataclass
class WindowBatch:
    window_index: int
    planned_at: float  # ms on the engine clock
    ranges: dict[int, tuple[int, int]]  # partition -> [start, end)
    record_count: int
    backlog: int
    scheduling_delay_ms: float = 0.0
    byte_count: int = 0
    completed_at: Optional[float] = None
    attempts: int = 0


def balanced_assignment(partitions: list[int], workers: list[str]) -> dict[int, str]:
    """Round-robin sorted partitions over sorted workers: max−min load ≤ 1."""
    ws = sorted(workers)
    if not ws:
        return {}
    return {p: ws[i % len(ws)] for i, p in enumerate(sorted(partitions))}


# --- operator registry ---


class Operator:
    """Stream operator: a concurrent per-partition phase and an exclusive
    merge phase. Subclasses may keep state, mutated only inside merge."""

    def process_partition(self, partition: int, records: list) -> Any:
        raise NotImplementedError

    def merge(self, window_index: int, partials: dict[int, Any]) -> Any:
        raise NotImplementedError


_operators: dict[str, Callable[[dict], Operator]] = {}
_operators_lock = threading.Lock()


def register_operator(name: str, factory: Callable[[dict], Operator]) -> None:
    with _operators_lock:
        _operators[name] = factory


def make_operator(name: str, config: dict) -> Operator:
    with _operators_lock:
        factory = _operators.get(name)
    if factory is None:
        raise UnknownOperator(name)
    return factory(config)


def registered_operators() -> list[str]:
    with _operators_lock:
        return sorted(_operators)


class IdentityOperator(Operator):
    """Passes payloads through; merge concatenates in partition order."""

    def __init__(self, config: dict):
        pass

    def process_partition(self, partition: int, records: list) -> list[bytes]:
        return [r.payload for r in records]

    def merge(self, window_index: int, partials: dict[int, list[bytes]]) -> list[bytes]:
        out: list[bytes] = []
        for p in sorted(partials):
            out.extend(partials[p])
        return out


class CountOperator(Operator):
    def __init__(self, config: dict):
        pass

    def process_partition(self, partition: int, records: list) -> tuple[int, int]:
        return len(records), sum(len(r.payload) for r in records)

    def merge(self, window_index: int, partials: dict[int, tuple[int, int]]):
        return (
            sum(v[0] for v in partials.values()),
            sum(v[1] for v in partials.values()),
        )


class SleepOperator(Operator):
    """Fixed busy time per task (sleep, so tasks overlap across workers);
    used to measure scaling. Config: sleep_ms and/or sleep_ms_per_record."""

    def __init__(self, config: dict):
        self.sleep_ms = float(config.get("sleep_ms", 0))
        self.per_record_ms = float(config.get("sleep_ms_per_record", 0))

    def process_partition(self, partition: int, records: list) -> int:
        delay = self.sleep_ms + self.per_record_ms * len(records)
        if delay > 0:
            time.sleep(delay / 1000.0)
        return len(records)

    def merge(self, window_index: int, partials: dict[int, int]) -> int:
        return sum(partials.values())


register_operator("identity", IdentityOperator)
register_operator("count", CountOperator)
register_operator("sleep", SleepOperator)


class _TaskResult:
    __slots__ = ("partial", "count", "nbytes", "ended", "event_times")

    def __init__(self, partial, count, nbytes, ended, event_times):
        self.partial = partial
        self.count = count
        self.nbytes = nbytes
        self.ended = ended
        self.event_times = event_times


class Stream:
    """One defined stream; drive it with run()/start() or plan/execute
    directly. Not safe to run from two threads at once."""

    def __init__(self, engine: "StreamEngine", definition: StreamDefinition):
        self.engine = engine
        self.definition = definition
        broker = engine.broker
        cfg = broker.topic_config(definition.topic)  # raises UnknownTopic
        self.partitions = list(range(cfg.partitions))
        self.operator = make_operator(definition.operator, definition.operator_config)

        earliest = broker.earliest_offsets(definition.topic)
        latest = broker.latest_offsets(definition.topic)
        committed = broker.fetch_committed(definition.group)
        self.committed: dict[int, int] = {}
        for p in self.partitions:
            if definition.start == "latest":
                self.committed[p] = latest[p]
            elif definition.start == "earliest":
                self.committed[p] = earliest[p]
            else:
                self.committed[p] = committed.get((definition.topic, p), earliest[p])

        self.initial_offsets = dict(self.committed)
        self.assignment: dict[int, str] = {}
        self.window_index = 0
        self.windows: list[WindowBatch] = []
        self.outputs: list[tuple[int, Any]] = []
        self.state = "idle"
        self.error: Optional[BaseException] = None
        self.t0: Optional[float] = None
        self._ended: set[int] = set()
        self._ended_lock = threading.Lock()
        self._stop = threading.Event()
        self._pending_workers: Optional[list[str]] = None
        self._thread: Optional[threading.Thread] = None

        workers = engine.pool.worker_ids()
        if workers:
            self.rebalance(workers)

    # --- assignment ---

    def rebalance(self, workers: list[str]) -> dict[int, str]:
        """Reassign all partitions over the given workers, balanced."""
        self.assignment = balanced_assignment(self.partitions, workers)
        self.engine.record_rebalance(self.window_index, workers, self.assignment)
        logger.info(
            "stream %s rebalanced over %d workers at window %d",
            self.definition.group, len(workers), self.window_index,
        )
        return dict(self.assignment)

    def notify_workers(self, workers: list[str]) -> None:
        """Queue a rebalance; applied before the next batch."""
        self._pending_workers = list(workers)

    def _apply_pending_rebalance(self) -> None:
        pending = self._pending_workers
        if pending is not None:
            self._pending_workers = None
            self.rebalance(pending)

    # --- planning ---

    def plan_batch(self) -> WindowBatch:
        now = self.engine.now_ms()
        if self.t0 is None:
            self.t0 = now
        nominal = self.t0 + self.window_index * self.definition.window_ms
        latest = self.engine.broker.latest_offsets(self.definition.topic)
        cap = self.definition.max_records_per_window
        ranges: dict[int, tuple[int, int]] = {}
        backlog = 0
        for p in self.partitions:
            start = self.committed[p]
            end = latest[p]
            if cap is not None:
                end = min(end, start + cap)
            ranges[p] = (start, end)
            backlog += latest[p] - end
        batch = WindowBatch(
            window_index=self.window_index,
            planned_at=now,
            ranges=ranges,
            record_count=sum(e - s for s, e in ranges.values()),
            backlog=backlog,
            scheduling_delay_ms=max(0.0, now - nominal),
        )
        return batch

    # --- execution ---

    def _run_partition(self, partition: int, start: int, end: int) -> _TaskResult:
        broker = self.engine.broker
        topic = self.definition.topic
        records = []
        offset = start
        while offset < end:
            got = broker.fetch(topic, partition, offset, max_bytes=_FETCH_CHUNK)
            if not got.records:
                break
            for rec in got.records:
                if rec.offset >= end:
                    break
                records.append(rec)
            offset = got.next_offset
        ended = False
        data = []
        for rec in records:
            if rec.payload == END_OF_STREAM:
                ended = True
            else:
                data.append(rec)
        try:
            partial = self.operator.process_partition(partition, data)
        except Exception as exc:
            raise OperatorError(partition, exc) from exc
        return _TaskResult(
            partial=partial,
            count=len(data),
            nbytes=sum(len(r.payload) for r in data),
            ended=ended,
            event_times=[r.event_time for r in data],
        )

    def execute_batch(self, batch: WindowBatch) -> Any:
        """Run the batch to completion and commit; retries the whole batch
        on task failure without advancing offsets."""
        engine = self.engine
        if not self.assignment:
            self.rebalance(engine.pool.worker_ids())
        nonempty = {p: r for p, r in batch.ranges.items() if r[1] > r[0]}
        last_error: Optional[BaseException] = None
        merged = None
        results: dict[int, _TaskResult] = {}
        for attempt in range(1 + max(0, self.definition.max_retries)):
            batch.attempts = attempt + 1
            try:
                units = {
                    p: engine.pool.submit(
                        self._run_partition, p, r[0], r[1],
                        worker=self.assignment.get(p),
                        name=f"{self.definition.group}:w{batch.window_index}:p{p}",
                    )
                    for p, r in nonempty.items()
                }
                results = {p: u.wait() for p, u in units.items()}
                merged = self.operator.merge(
                    batch.window_index, {p: res.partial for p, res in results.items()}
                )
                last_error = None
                break
            except Exception as exc:
                last_error = exc
                logger.warning(
                    "stream %s window %d attempt %d failed: %s",
                    self.definition.group, batch.window_index, attempt + 1, exc,
                )
        if last_error is not None:
            raise last_error

        engine.broker.commit_offsets(
            self.definition.group,
            {(self.definition.topic, p): r[1] for p, r in batch.ranges.items()},
        )
        for p, r in batch.ranges.items():
            self.committed[p] = r[1]
        with self._ended_lock:
            self._ended.update(p for p, res in results.items() if res.ended)

        batch.byte_count = sum(res.nbytes for res in results.values())
        batch.record_count = sum(res.count for res in results.values())
        batch.completed_at = engine.now_ms()
        self.windows.append(batch)
        self.outputs.append((batch.window_index, merged))
        self.window_index = batch.window_index + 1
        engine.record_window(self, batch, results)
        return merged

    # --- control loop ---

    def _drained(self) -> bool:
        with self._ended_lock:
            if len(self._ended) < len(self.partitions):
                return False
        latest = self.engine.broker.latest_offsets(self.definition.topic)
        return all(self.committed[p] >= latest[p] for p in self.partitions)

    def run(self, max_windows: Optional[int] = None) -> None:
        """Plan/execute/commit every window_ms until stop(), source end,
        or max_windows. Overruns replan immediately (catch-up)."""
        self.state = "running"
        if self.t0 is None:
            self.t0 = self.engine.now_ms()
        done = 0
        try:
            while not self._stop.is_set():
                if max_windows is not None and done >= max_windows:
                    break
                nominal = self.t0 + self.window_index * self.definition.window_ms
                wait_s = (nominal - self.engine.now_ms()) / 1000.0
                if wait_s > 0 and self._stop.wait(wait_s):
                    break
                self._apply_pending_rebalance()
                batch = self.plan_batch()
                self.execute_batch(batch)
                done += 1
                if self._drained():
                    self.state = "drained"
                    logger.info("stream %s drained after %d windows",
                                self.definition.group, done)
                    return
        except Exception as exc:
            self.state = "failed"
            self.error = exc
            raise StreamFailed(
                f"stream {self.definition.group} window {self.window_index}: {exc}"
            ) from exc
        self.state = "stopped"

    def start(self, max_windows: Optional[int] = None) -> "Stream":
        def _target():
            try:
                self.run(max_windows=max_windows)
            except StreamFailed:
                pass  # state/error already set

        self._thread = threading.Thread(
            target=_target, name=f"stream-{self.definition.group}", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        """Finish the in-flight batch, commit it, then stop."""
        self._stop.set()

    def join(self, timeout: Optional[float] = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)
        if self.error is not None:
            raise StreamFailed(str(self.error)) from self.error


class StreamEngine:
    """Engine facade bound to one broker and one worker pool."""

    def __init__(self, broker, pool, metrics: Optional[MetricsRegistry] = None,
                 engine_id: str = "engine"):
        self.broker = broker
        self.pool = pool
        self.metrics = metrics
        self.engine_id = engine_id
        self._origin = time.time() * 1000
        self.streams: list[Stream] = []
        if metrics is not None:
            metrics.register(engine_id, family="engine")

    def now_ms(self) -> float:
        if self.metrics is not None:
            return self.metrics.now_ms()
        return time.time() * 1000 - self._origin

    def define_stream(self, definition: StreamDefinition) -> Stream:
        stream = Stream(self, definition)
        self.streams.append(stream)
        return stream

    def workers_changed(self, workers: list[str]) -> None:
        for stream in self.streams:
            stream.notify_workers(workers)

    def stop_all(self) -> None:
        for stream in self.streams:
            stream.stop()
        for stream in self.streams:
            if stream._thread is not None:
                stream._thread.join()

    # --- metrics plumbing ---

    def record_window(self, stream: Stream, batch: WindowBatch,
                      results: dict[int, _TaskResult]) -> None:
        if self.metrics is None:
            return
        processing_ms = (batch.completed_at or batch.planned_at) - batch.planned_at
        self.metrics.record_window(
            batch.window_index,
            batch.planned_at,
            batch.record_count,
            batch.byte_count,
            processing_ms,
            batch.scheduling_delay_ms,
            batch.backlog,
        )
        self.metrics.record_throughput(
            self.engine_id, batch.record_count, batch.byte_count
        )
        processed_at = time.time() * 1000
        for res in results.values():
            for et in res.event_times:
                self.metrics.record_latency(self.engine_id, et, processed_at)

    def record_rebalance(self, window_index: int, workers: list[str],
                         assignment: dict[int, str]) -> None:
        if self.metrics is None:
            return
        self.metrics.record_rebalance(
            self.now_ms(), window_index, len(workers), assignment
        )
