"""Stream-source mini-app: rate-controlled message generators.

Two payload plugins: a cluster source that samples Gaussian points around
per-run random centroids (serialized to an ASCII point grid), and a
template source replaying one fixed payload verbatim. N producers share a
target rate through per-producer token buckets and write straight into
the broker; a production report tracks achieved per-second throughput and
flags saturation.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import END_OF_STREAM
from .errors import InvalidConfig, UnknownScenario

logger = logging.getLogger(__name__)


@dataclass
class ClusterSourceConfig:
    num_centroids: int = 10
    points_per_message: int = 5000
    dims: int = 3
    centroid_spread: float = 10.0
    point_stddev: float = 1.0
    seed: int = 42


@dataclass
class TemplateSourceConfig:
    payload: bytes = b""

    @classmethod
    def from_file(cls, path) -> "TemplateSourceConfig":
        with open(path, "rb") as fh:
            return cls(payload=fh.read())


@dataclass
class SourceConfig:
    plugin: str  # cluster | template
    topic: str
    producers: int = 1
    target_rate: Optional[float] = None  # messages/s shared by all producers
    total_messages: Optional[int] = None
    duration_s: Optional[float] = None
    append_end_sentinel: bool = False
    cluster: Optional[ClusterSourceConfig] = None
    template: Optional[TemplateSourceConfig] = None

    def validate(self) -> None:
        if self.plugin not in ("cluster", "template"):
            raise InvalidConfig(f"unknown source plugin {self.plugin!r}")
        if self.producers < 1:
            raise InvalidConfig("producers must be >= 1")
        if (self.total_messages is None) == (self.duration_s is None):
            raise InvalidConfig("set exactly one of total_messages / duration_s")
        if self.plugin == "cluster" and self.cluster is None:
            raise InvalidConfig("cluster plugin needs a cluster section")
        if self.plugin == "template" and (
            self.template is None or not self.template.payload
        ):
            raise InvalidConfig("template plugin needs a non-empty template payload")


# --- cluster payload generation ---


def encode_points(points: np.ndarray) -> bytes:
    """ASCII wire format: header line `n,d`, then one point per line with
    d comma-separated shortest round-trip decimals."""
    n, d = points.shape
    lines = [f"{n},{d}"]
    for row in points.tolist():
        lines.append(",".join(repr(v) for v in row))
    return ("\n".join(lines) + "\n").encode("ascii")


def cluster_centroids(config: ClusterSourceConfig) -> np.ndarray:
    """Per-run centroids: uniform in [-spread, +spread]^d, fixed by seed."""
    rng = np.random.default_rng(config.seed)
    return rng.uniform(
        -config.centroid_spread,
        config.centroid_spread,
        size=(config.num_centroids, config.dims),
    )


def generate_cluster_message(config: ClusterSourceConfig, rng: np.random.Generator) -> bytes:
    """One message: n points, each Gaussian around a uniformly chosen
    per-run centroid."""
    centroids = cluster_centroids(config)
    idx = rng.integers(0, config.num_centroids, size=config.points_per_message)
    points = centroids[idx]
    if config.point_stddev > 0:
        points = points + rng.normal(
            0.0, config.point_stddev, size=(config.points_per_message, config.dims)
        )
    return encode_points(points)


# --- rate limiting ---


class TokenBucket:
    """One token per message; refills continuously at `rate` tokens/s up
    to `capacity`. Starts with one token so the first send is immediate
    without an initial burst."""

    def __init__(self, rate: Optional[float], capacity: Optional[float] = None,
                 initial: float = 1.0):
        self.rate = rate
        if rate is not None and capacity is None:
            capacity = max(1.0, rate)  # one second of tokens
        self.capacity = capacity
        self.tokens = min(initial, capacity) if capacity is not None else initial
        self._last = time.perf_counter()

    def acquire(
        self,
        stop: Optional[threading.Event] = None,
        deadline: Optional[float] = None,
    ) -> bool:
        """Block until a token is available; False if stopped first or if
        `deadline` (perf_counter time) passes while waiting. Tokens are only
        granted strictly before the deadline, so a duration-bounded caller
        never sends past its budget."""
        if self.rate is None:
            return True
        while True:
            now = time.perf_counter()
            self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.rate)
            self._last = now
            if self.tokens >= 1.0 and (deadline is None or now < deadline):
                self.tokens -= 1.0
                return True
            if stop is not None and stop.is_set():
                return False
            if deadline is not None and now >= deadline:
                return False
            wait = (1.0 - self.tokens) / self.rate
            if deadline is not None:
                wait = min(wait, max(deadline - now, 0.0))
            time.sleep(min(wait, 0.05))


# --- production ---


@dataclass
class ProductionReport:
    topic: str
    producers: int
    target_rate: Optional[float]
    total_messages: int = 0
    total_bytes: int = 0
    elapsed_s: float = 0.0
    # second index (from run start) -> [messages, bytes], all producers
    seconds: dict[int, list[int]] = field(default_factory=dict)
    saturated: bool = False

    def achieved_rate(self) -> float:
        if self.elapsed_s <= 0:
            return 0.0
        return self.total_messages / self.elapsed_s

    def achieved_mb_per_s(self) -> float:
        if self.elapsed_s <= 0:
            return 0.0
        return self.total_bytes / 1e6 / self.elapsed_s


class _ProducerState:
    def __init__(self, config: SourceConfig, index: int, quota: Optional[int]):
        self.index = index
        self.quota = quota
        self.rng = None
        if config.plugin == "cluster":
            self.rng = np.random.default_rng(config.cluster.seed + index)
        share = None if config.target_rate is None else config.target_rate / config.producers
        self.bucket = TokenBucket(share)


class ProducerRunner:
    """Runs the producers of one SourceConfig against a broker.

    With a worker pool of at least `producers` workers the loops run as
    pilot compute units pinned to distinct workers; otherwise dedicated
    threads are used.
    """

    def __init__(self, broker, pool=None, metrics=None):
        self.broker = broker
        self.pool = pool
        self.metrics = metrics
        self._stop = threading.Event()

    def stop(self) -> None:
        self._stop.set()

    def run(self, config: SourceConfig) -> ProductionReport:
        config.validate()
        partitions = self.broker.topic_config(config.topic).partitions
        report = ProductionReport(
            topic=config.topic, producers=config.producers, target_rate=config.target_rate
        )
        report_lock = threading.Lock()
        start = time.perf_counter()
        deadline = None if config.duration_s is None else start + config.duration_s

        # split a total-message budget across producers
        quotas: list[Optional[int]] = [None] * config.producers
        if config.total_messages is not None:
            base, extra = divmod(config.total_messages, config.producers)
            quotas = [base + (1 if i < extra else 0) for i in range(config.producers)]

        if self.metrics is not None:
            for i in range(config.producers):
                self.metrics.register(f"producer-{i}", family="producer")

        def loop(state: _ProducerState) -> int:
            sent = 0
            while not self._stop.is_set():
                if state.quota is not None and sent >= state.quota:
                    break
                if deadline is not None and time.perf_counter() >= deadline:
                    break
                if not state.bucket.acquire(self._stop, deadline):
                    break
                if config.plugin == "cluster":
                    payload = generate_cluster_message(config.cluster, state.rng)
                else:
                    payload = config.template.payload
                partition = (state.index + sent) % partitions
                event_ms = int(time.time() * 1000)
                self.broker.append(config.topic, partition, payload, event_time=event_ms)
                sent += 1
                second = int(time.perf_counter() - start)
                with report_lock:
                    bucket = report.seconds.setdefault(second, [0, 0])
                    bucket[0] += 1
                    bucket[1] += len(payload)
                    report.total_messages += 1
                    report.total_bytes += len(payload)
                if self.metrics is not None:
                    self.metrics.record_throughput(
                        f"producer-{state.index}", 1, len(payload)
                    )
            return sent

        states = [_ProducerState(config, i, quotas[i]) for i in range(config.producers)]
        use_pool = self.pool is not None and self.pool.size >= config.producers
        if use_pool:
            workers = self.pool.worker_ids()
            units = [
                self.pool.submit(loop, st, worker=workers[i], name=f"producer-{i}")
                for i, st in enumerate(states)
            ]
            for u in units:
                u.wait()
        else:
            threads = [
                threading.Thread(target=loop, args=(st,), name=f"producer-{st.index}", daemon=True)
                for st in states
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()

        report.elapsed_s = time.perf_counter() - start
        if config.append_end_sentinel:
            now_ms = int(time.time() * 1000)
            for p in range(partitions):
                self.broker.append(config.topic, p, END_OF_STREAM, event_time=now_ms)
        self._evaluate_saturation(config, report)
        logger.info(
            "produced %d messages (%.2f MB) to %s in %.1fs",
            report.total_messages, report.total_bytes / 1e6, config.topic, report.elapsed_s,
        )
        return report

    @staticmethod
    def _evaluate_saturation(config: SourceConfig, report: ProductionReport) -> None:
        """Achieved < 95% of target for more than 3 consecutive full
        seconds marks the source saturated."""
        if config.target_rate is None:
            return
        full_seconds = int(report.elapsed_s)
        threshold = 0.95 * config.target_rate
        run = 0
        for s in range(full_seconds):
            msgs = report.seconds.get(s, [0, 0])[0]
            run = run + 1 if msgs < threshold else 0
            if run > 3:
                report.saturated = True
                return


def run_producers(broker, config: SourceConfig, metrics=None, pool=None) -> ProductionReport:
    """Blocking convenience wrapper around ProducerRunner.run."""
    return ProducerRunner(broker, pool=pool, metrics=metrics).run(config)


# --- scenario presets ---

SCENARIOS = ("kmeans-random", "kmeans-static", "light-mt", "light-cms")

_LIGHT_MT_BYTES = 2_000_000
_LIGHT_CMS_BYTES = 18_000_000


def _blob(size: int, seed: int) -> bytes:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=size, dtype=np.uint8).tobytes()


def make_scenario(name: str, seed: int = 42, sinogram: bool = False) -> SourceConfig:
    """Preset source configs for the four benchmark workloads.

    `sinogram=True` swaps the synthetic light-source blobs for real
    encoded sinograms of the same size class (usable by the
    reconstruction operators end to end).
    """
    cluster = ClusterSourceConfig(seed=seed)
    if name == "kmeans-random":
        return SourceConfig(
            plugin="cluster", topic="points", producers=1,
            total_messages=100, cluster=cluster,
        )
    if name == "kmeans-static":
        payload = generate_cluster_message(cluster, np.random.default_rng(seed))
        return SourceConfig(
            plugin="template", topic="points", producers=1,
            total_messages=100, template=TemplateSourceConfig(payload=payload),
        )
    if name == "light-mt":
        if sinogram:
            from .masa.tomo import sinogram_template

            payload = sinogram_template(_LIGHT_MT_BYTES, grid=128)
        else:
            payload = _blob(_LIGHT_MT_BYTES, seed)
        return SourceConfig(
            plugin="template", topic="light", producers=1,
            total_messages=20, template=TemplateSourceConfig(payload=payload),
        )
    if name == "light-cms":
        if sinogram:
            from .masa.tomo import sinogram_template

            payload = sinogram_template(_LIGHT_CMS_BYTES, grid=256)
        else:
            payload = _blob(_LIGHT_CMS_BYTES, seed)
        return SourceConfig(
            plugin="template", topic="light", producers=1,
            total_messages=4, template=TemplateSourceConfig(payload=payload),
        )
    raise UnknownScenario(name)
