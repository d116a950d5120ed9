"""Embedded log-based message broker.

Partitioned append-only logs with offset-addressed fetch, consumer-group
offset tracking and size/time retention. Runs fully in-process; an optional
disk-backed mode appends every record to one segment file per partition so
a broker can be closed and reopened without losing retained data.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .errors import (
    DuplicateTopic,
    InvalidConfig,
    OffsetAhead,
    OffsetOutOfRange,
    PartitionOutOfRange,
    PayloadTooLarge,
    StaleCommit,
    UnknownTopic,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_PAYLOAD_BYTES = 64 * 1024 * 1024

# Segment frame: magic byte, then u32 body length, then the body
# (u64 offset, u64 event_time_ms, u32 key length with 0xFFFFFFFF meaning
# "no key", key bytes, u32 payload length, payload bytes). Little-endian.
_MAGIC = 0x50
_NO_KEY = 0xFFFFFFFF
_HEAD = struct.Struct("<BI")
_BODY_FIXED = struct.Struct("<QQI")
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class Record:
    """One stored message. Offsets are assigned by the broker."""

    topic: str
    partition: int
    offset: int
    event_time: int
    key: Optional[bytes]
    payload: bytes


@dataclass(frozen=True)
class TopicConfig:
    name: str
    partitions: int = 1
    retention_bytes: Optional[int] = None
    retention_ms: Optional[int] = None


@dataclass
class FetchResult:
    records: list[Record]
    next_offset: int


def partition_for_key(key: bytes, partitions: int) -> int:
    """Deterministic key partitioner (stable across processes)."""
    return zlib.crc32(key) % partitions


def _encode_frame(record: Record) -> bytes:
    key = record.key
    body = bytearray(
        _BODY_FIXED.pack(
            record.offset,
            record.event_time,
            _NO_KEY if key is None else len(key),
        )
    )
    if key is not None:
        body += key
    body += _U32.pack(len(record.payload))
    body += record.payload
    return _HEAD.pack(_MAGIC, len(body)) + bytes(body)


def _decode_frames(raw: bytes, topic: str, partition: int) -> Iterable[Record]:
    pos = 0
    n = len(raw)
    while pos + _HEAD.size <= n:
        magic, length = _HEAD.unpack_from(raw, pos)
        if magic != _MAGIC:
            raise InvalidConfig(
                f"corrupt segment for {topic}/{partition} at byte {pos}"
            )
        pos += _HEAD.size
        if pos + length > n:
            # torn tail write; drop it
            logger.warning("truncated frame in %s/%d, dropping tail", topic, partition)
            return
        offset, event_time, key_len = _BODY_FIXED.unpack_from(raw, pos)
        cur = pos + _BODY_FIXED.size
        if key_len == _NO_KEY:
            key = None
        else:
            key = raw[cur : cur + key_len]
            cur += key_len
        (payload_len,) = _U32.unpack_from(raw, cur)
        cur += _U32.size
        payload = raw[cur : cur + payload_len]
        yield Record(topic, partition, offset, event_time, key, payload)
        pos += length


class _PartitionLog:
    """Append-only log for one partition. All mutation under self.lock."""

    def __init__(self, topic: str, partition: int, seg_path: Optional[Path]):
        self.topic = topic
        self.partition = partition
        self.lock = threading.Lock()
        self.base_offset = 0  # offset of records[0]; earliest retained
        self.records: list[Record] = []
        self.payload_bytes = 0
        self._seg_path = seg_path
        self._seg = None
        if seg_path is not None:
            self._load_segment()
            self._seg = open(seg_path, "ab")

    def _earliest_path(self) -> Path:
        return self._seg_path.with_suffix(".earliest")

    def _load_segment(self) -> None:
        earliest = 0
        epath = self._earliest_path()
        if epath.exists():
            earliest = int(epath.read_text().strip() or 0)
        self.base_offset = earliest
        if self._seg_path.exists():
            raw = self._seg_path.read_bytes()
            for rec in _decode_frames(raw, self.topic, self.partition):
                if rec.offset < earliest:
                    continue
                self.records.append(rec)
                self.payload_bytes += len(rec.payload)

    @property
    def latest(self) -> int:
        return self.base_offset + len(self.records)

    def append(self, event_time: int, key: Optional[bytes], payload: bytes) -> Record:
        with self.lock:
            rec = Record(self.topic, self.partition, self.latest, event_time, key, payload)
            self.records.append(rec)
            self.payload_bytes += len(payload)
            if self._seg is not None:
                self._seg.write(_encode_frame(rec))
                self._seg.flush()
            return rec

    def fetch(self, from_offset: int, max_bytes: int) -> FetchResult:
        with self.lock:
            earliest, latest = self.base_offset, self.latest
            if from_offset < earliest or from_offset > latest:
                raise OffsetOutOfRange(
                    f"{self.topic}/{self.partition}: offset {from_offset} outside "
                    f"[{earliest}, {latest}]"
                )
            out: list[Record] = []
            size = 0
            for rec in self.records[from_offset - earliest :]:
                if out and size + len(rec.payload) > max_bytes:
                    break
                out.append(rec)
                size += len(rec.payload)
            next_offset = out[-1].offset + 1 if out else from_offset
            return FetchResult(out, next_offset)

    def trim(self, retention_bytes: Optional[int], retention_ms: Optional[int], now_ms: int) -> int:
        """Drop oldest records until under both limits; returns new earliest."""
        with self.lock:
            drop = 0
            size = self.payload_bytes
            n = len(self.records)
            while drop < n:
                rec = self.records[drop]
                too_big = retention_bytes is not None and size > retention_bytes
                too_old = retention_ms is not None and now_ms - rec.event_time > retention_ms
                if not (too_big or too_old):
                    break
                size -= len(rec.payload)
                drop += 1
            if drop:
                del self.records[:drop]
                self.base_offset += drop
                self.payload_bytes = size
                if self._seg_path is not None:
                    self._earliest_path().write_text(f"{self.base_offset}\n")
            return self.base_offset

    def close(self) -> None:
        if self._seg is not None:
            self._seg.close()
            self._seg = None


class _Topic:
    def __init__(self, config: TopicConfig, topic_dir: Optional[Path]):
        self.config = config
        self.rr_lock = threading.Lock()
        self.rr_next = 0
        if topic_dir is not None:
            topic_dir.mkdir(parents=True, exist_ok=True)
            (topic_dir / "config.json").write_text(
                json.dumps(
                    {
                        "name": config.name,
                        "partitions": config.partitions,
                        "retention_bytes": config.retention_bytes,
                        "retention_ms": config.retention_ms,
                    }
                )
            )
        self.partitions = [
            _PartitionLog(
                config.name,
                p,
                (topic_dir / f"{p:05d}.seg") if topic_dir is not None else None,
            )
            for p in range(config.partitions)
        ]

    def next_round_robin(self) -> int:
        with self.rr_lock:
            p = self.rr_next
            self.rr_next = (p + 1) % self.config.partitions
            return p


class Broker:
    """In-process partitioned log broker.

    Thread-safe: appends to one partition serialize on that partition's
    lock, appends to different partitions run in parallel, and fetches copy
    a consistent snapshot of a partition slice.

    Passing ``data_dir`` enables the disk-backed mode: records are framed
    into one append-only segment file per partition and reloaded when a
    broker is constructed over the same directory.
    """

    def __init__(self, data_dir: Optional[str | Path] = None,
                 max_payload_bytes: int = DEFAULT_MAX_PAYLOAD_BYTES):
        self._dir = Path(data_dir) if data_dir is not None else None
        self.max_payload_bytes = max_payload_bytes
        self._lock = threading.Lock()
        self._topics: dict[str, _Topic] = {}
        self._groups: dict[str, dict[tuple[str, int], int]] = {}
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._load()

    # --- persistence ---

    def _topics_dir(self) -> Path:
        return self._dir / "topics"

    def _load(self) -> None:
        tdir = self._topics_dir()
        if tdir.exists():
            for sub in sorted(tdir.iterdir()):
                cfg_file = sub / "config.json"
                if not cfg_file.exists():
                    continue
                raw = json.loads(cfg_file.read_text())
                config = TopicConfig(
                    name=raw["name"],
                    partitions=raw["partitions"],
                    retention_bytes=raw.get("retention_bytes"),
                    retention_ms=raw.get("retention_ms"),
                )
                self._topics[config.name] = _Topic(config, sub)
                logger.info("reloaded topic %s (%d partitions)", config.name, config.partitions)
        gfile = self._dir / "groups.json"
        if gfile.exists():
            raw = json.loads(gfile.read_text())
            for group, topics in raw.items():
                committed = {}
                for topic, offsets in topics.items():
                    for p, off in offsets.items():
                        committed[(topic, int(p))] = off
                self._groups[group] = committed

    def _save_groups(self) -> None:
        if self._dir is None:
            return
        out: dict[str, dict[str, dict[str, int]]] = {}
        for group, committed in self._groups.items():
            by_topic: dict[str, dict[str, int]] = {}
            for (topic, p), off in committed.items():
                by_topic.setdefault(topic, {})[str(p)] = off
            out[group] = by_topic
        tmp = self._dir / "groups.json.tmp"
        tmp.write_text(json.dumps(out, sort_keys=True))
        os.replace(tmp, self._dir / "groups.json")

    # --- topic lifecycle ---

    def create_topic(self, config: TopicConfig) -> TopicConfig:
        if config.partitions < 1:
            raise InvalidConfig(f"topic {config.name!r}: partitions must be >= 1")
        with self._lock:
            if config.name in self._topics:
                raise DuplicateTopic(config.name)
            topic_dir = None
            if self._dir is not None:
                topic_dir = self._topics_dir() / config.name
            self._topics[config.name] = _Topic(config, topic_dir)
        logger.info("created topic %s (%d partitions)", config.name, config.partitions)
        return config

    def topic_config(self, topic: str) -> TopicConfig:
        return self._topic(topic).config

    def topics(self) -> list[str]:
        with self._lock:
            return sorted(self._topics)

    def _topic(self, name: str) -> _Topic:
        try:
            return self._topics[name]
        except KeyError:
            raise UnknownTopic(name) from None

    def _partition(self, topic: str, partition: int) -> _PartitionLog:
        t = self._topic(topic)
        if not 0 <= partition < t.config.partitions:
            raise PartitionOutOfRange(
                f"{topic}: partition {partition} not in [0, {t.config.partitions})"
            )
        return t.partitions[partition]

    # --- produce / consume ---

    def append(
        self,
        topic: str,
        partition_or_key: int | bytes | None,
        payload: bytes,
        event_time: Optional[int] = None,
    ) -> int:
        """Append one record; returns its assigned offset.

        ``partition_or_key`` selects the partition: an int is used directly,
        a bytes key is hashed, and None falls back to topic round-robin.
        """
        t = self._topic(topic)
        if len(payload) > self.max_payload_bytes:
            raise PayloadTooLarge(
                f"{len(payload)} bytes > max {self.max_payload_bytes}"
            )
        key: Optional[bytes] = None
        if isinstance(partition_or_key, bool):
            raise PartitionOutOfRange("partition must be an int, bytes key, or None")
        if isinstance(partition_or_key, int):
            partition = partition_or_key
        elif isinstance(partition_or_key, (bytes, bytearray)):
            key = bytes(partition_or_key)
            partition = partition_for_key(key, t.config.partitions)
        elif partition_or_key is None:
            partition = t.next_round_robin()
        else:
            raise PartitionOutOfRange(
                f"bad partition selector: {type(partition_or_key).__name__}"
            )
        log = self._partition(topic, partition)
        if event_time is None:
            event_time = int(time.time() * 1000)
        return log.append(event_time, key, payload).offset

    def fetch(
        self,
        topic: str,
        partition: int,
        from_offset: int,
        max_bytes: int = DEFAULT_MAX_PAYLOAD_BYTES,
    ) -> FetchResult:
        """Contiguous records starting at ``from_offset``.

        Total payload size stays under ``max_bytes`` except that the first
        available record is always returned.
        """
        return self._partition(topic, partition).fetch(from_offset, max_bytes)

    def latest_offsets(self, topic: str) -> list[int]:
        return [p.latest for p in self._topic(topic).partitions]

    def earliest_offsets(self, topic: str) -> list[int]:
        return [p.base_offset for p in self._topic(topic).partitions]

    # --- consumer groups ---

    def commit_offsets(self, group: str, offsets: Mapping[tuple[str, int], int]) -> None:
        """Atomically advance committed offsets; rejects the whole call on
        any stale or ahead-of-log entry."""
        with self._lock:
            committed = self._groups.setdefault(group, {})
            for (topic, partition), offset in offsets.items():
                log = self._partition(topic, partition)
                if offset > log.latest:
                    raise OffsetAhead(
                        f"{group}: {topic}/{partition} commit {offset} > latest {log.latest}"
                    )
                prev = committed.get((topic, partition), -1)
                if offset < prev:
                    raise StaleCommit(
                        f"{group}: {topic}/{partition} commit {offset} < committed {prev}"
                    )
            committed.update(offsets)
            self._save_groups()

    def fetch_committed(self, group: str) -> dict[tuple[str, int], int]:
        with self._lock:
            return dict(self._groups.get(group, {}))

    # --- retention ---

    def enforce_retention(self, topic: str, now_ms: Optional[int] = None) -> list[int]:
        """Apply size/time retention; returns per-partition earliest offsets.

        Latest offsets never move; a topic without limits is a no-op.
        """
        t = self._topic(topic)
        cfg = t.config
        if cfg.retention_bytes is None and cfg.retention_ms is None:
            return [p.base_offset for p in t.partitions]
        if now_ms is None:
            now_ms = int(time.time() * 1000)
        return [
            p.trim(cfg.retention_bytes, cfg.retention_ms, now_ms) for p in t.partitions
        ]

    # --- lifecycle ---

    def close(self) -> None:
        with self._lock:
            for t in self._topics.values():
                for p in t.partitions:
                    p.close()

    def __enter__(self) -> "Broker":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
