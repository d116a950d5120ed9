import random
import struct
import threading

import pytest

from pilotstream.broker import Broker, TopicConfig, partition_for_key
from pilotstream.errors import (
    DuplicateTopic,
    InvalidConfig,
    OffsetAhead,
    OffsetOutOfRange,
    PartitionOutOfRange,
    PayloadTooLarge,
    StaleCommit,
    UnknownTopic,
)


@pytest.fixture
def broker():
    b = Broker()
    yield b
    b.close()


def test_create_topic_empty_log(broker):
    broker.create_topic(TopicConfig("t", partitions=1))
    assert broker.latest_offsets("t") == [0]
    assert broker.earliest_offsets("t") == [0]


def test_create_topic_twelve_partitions(broker):
    broker.create_topic(TopicConfig("light", partitions=12))
    assert broker.latest_offsets("light") == [0] * 12


def test_create_topic_duplicate(broker):
    broker.create_topic(TopicConfig("t"))
    with pytest.raises(DuplicateTopic):
        broker.create_topic(TopicConfig("t"))


def test_create_topic_zero_partitions(broker):
    with pytest.raises(InvalidConfig):
        broker.create_topic(TopicConfig("t", partitions=0))


def test_append_monotone_offsets(broker):
    broker.create_topic(TopicConfig("t"))
    offs = [broker.append("t", 0, f"r{i}".encode()) for i in range(3)]
    assert offs == [0, 1, 2]


def test_append_large_payload_ok(broker):
    broker.create_topic(TopicConfig("t"))
    payload = b"x" * (18 * 1024 * 1024)  # large image-message class
    assert broker.append("t", 0, payload) == 0
    got = broker.fetch("t", 0, 0).records[0].payload
    assert got == payload


def test_append_payload_too_large():
    b = Broker(max_payload_bytes=1024)
    b.create_topic(TopicConfig("t"))
    with pytest.raises(PayloadTooLarge):
        b.append("t", 0, b"x" * 1025)


def test_append_partition_out_of_range(broker):
    broker.create_topic(TopicConfig("t", partitions=12))
    with pytest.raises(PartitionOutOfRange):
        broker.append("t", 12, b"x")


def test_append_unknown_topic(broker):
    with pytest.raises(UnknownTopic):
        broker.append("missing", 0, b"x")


def test_fetch_round_trip(broker):
    broker.create_topic(TopicConfig("t"))
    for p in (b"A", b"B", b"C"):
        broker.append("t", 0, p)
    got = broker.fetch("t", 0, 0)
    assert [r.payload for r in got.records] == [b"A", b"B", b"C"]
    assert [r.offset for r in got.records] == [0, 1, 2]
    assert got.next_offset == 3


def test_fetch_caught_up(broker):
    broker.create_topic(TopicConfig("t"))
    for i in range(3):
        broker.append("t", 0, b"x")
    got = broker.fetch("t", 0, 3)
    assert got.records == []
    assert got.next_offset == 3


def test_fetch_beyond_latest(broker):
    broker.create_topic(TopicConfig("t"))
    with pytest.raises(OffsetOutOfRange):
        broker.fetch("t", 0, 1)


def test_fetch_respects_max_bytes_but_returns_first(broker):
    broker.create_topic(TopicConfig("t"))
    for _ in range(4):
        broker.append("t", 0, b"y" * 100)
    got = broker.fetch("t", 0, 0, max_bytes=250)
    assert len(got.records) == 2  # third would exceed 250
    # a single record larger than the budget still comes back
    got = broker.fetch("t", 0, 0, max_bytes=10)
    assert len(got.records) == 1
    assert got.next_offset == 1


def test_round_robin_assignment(broker):
    broker.create_topic(TopicConfig("t", partitions=2))
    for i in range(5):
        broker.append("t", None, f"m{i}".encode())
    assert sorted(broker.latest_offsets("t")) == [2, 3]


def test_keyed_append_deterministic(broker):
    broker.create_topic(TopicConfig("t", partitions=12))
    key = b"sensor-17"
    p = partition_for_key(key, 12)
    for _ in range(5):
        broker.append("t", key, b"v")
    assert broker.latest_offsets("t")[p] == 5
    assert sum(broker.latest_offsets("t")) == 5


def test_keyed_partitioner_spreads(broker):
    counts = [0] * 8
    for i in range(800):
        counts[partition_for_key(f"key-{i}".encode(), 8)] += 1
    assert min(counts) > 0


def test_commit_and_fetch_committed(broker):
    broker.create_topic(TopicConfig("t"))
    for _ in range(5):
        broker.append("t", 0, b"x")
    broker.commit_offsets("g", {("t", 0): 3})
    assert broker.fetch_committed("g") == {("t", 0): 3}


def test_commit_stale_rejected(broker):
    broker.create_topic(TopicConfig("t"))
    for _ in range(5):
        broker.append("t", 0, b"x")
    broker.commit_offsets("g", {("t", 0): 3})
    with pytest.raises(StaleCommit):
        broker.commit_offsets("g", {("t", 0): 2})
    assert broker.fetch_committed("g") == {("t", 0): 3}
    broker.commit_offsets("g", {("t", 0): 3})  # equal re-commit is fine


def test_commit_beyond_latest(broker):
    broker.create_topic(TopicConfig("t"))
    broker.append("t", 0, b"x")
    with pytest.raises(OffsetAhead):
        broker.commit_offsets("g", {("t", 0): 2})


def test_commit_unknown_group_empty(broker):
    assert broker.fetch_committed("nobody") == {}


def test_retention_noop_without_limits(broker):
    broker.create_topic(TopicConfig("t"))
    for _ in range(10):
        broker.append("t", 0, b"x" * 1024)
    assert broker.enforce_retention("t") == [0]


def test_retention_by_size(broker):
    # 10 x 1 KiB with a 4 KiB budget: keep the newest 4, earliest = 6
    broker.create_topic(TopicConfig("t", retention_bytes=4 * 1024))
    for _ in range(10):
        broker.append("t", 0, b"x" * 1024)
    assert broker.enforce_retention("t") == [6]
    assert broker.latest_offsets("t") == [10]  # latest never moves
    got = broker.fetch("t", 0, 6)
    assert [r.offset for r in got.records] == [6, 7, 8, 9]
    with pytest.raises(OffsetOutOfRange):
        broker.fetch("t", 0, 5)


def test_retention_by_size_matches_cumulative_oracle(broker):
    rng = random.Random(11)
    sizes = [rng.randrange(1, 2000) for _ in range(200)]
    limit = 20_000
    broker.create_topic(TopicConfig("t", retention_bytes=limit))
    for s in sizes:
        broker.append("t", 0, b"z" * s)
    # oracle: walk from the tail until the budget is spent
    keep = 0
    total = 0
    for s in reversed(sizes):
        if total + s > limit:
            break
        total += s
        keep += 1
    assert broker.enforce_retention("t") == [len(sizes) - keep]


def test_retention_by_age_full_trim(broker):
    broker.create_topic(TopicConfig("t", retention_ms=1000))
    for i in range(5):
        broker.append("t", 0, b"x", event_time=1000 + i)
    assert broker.enforce_retention("t", now_ms=10_000) == [5]
    assert broker.latest_offsets("t") == [5]
    got = broker.fetch("t", 0, 5)
    assert got.records == []


def test_concurrent_appends_single_partition(broker):
    broker.create_topic(TopicConfig("t"))
    producers, per = 8, 250

    def work(pid):
        for i in range(per):
            broker.append("t", 0, f"{pid}:{i}".encode())

    threads = [threading.Thread(target=work, args=(p,)) for p in range(producers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert broker.latest_offsets("t") == [producers * per]
    got = broker.fetch("t", 0, 0, max_bytes=1 << 30)
    assert [r.offset for r in got.records] == list(range(producers * per))
    # every produced message present exactly once
    seen = sorted(r.payload for r in got.records)
    expect = sorted(f"{p}:{i}".encode() for p in range(producers) for i in range(per))
    assert seen == expect


def test_randomized_shadow_oracle(broker):
    rng = random.Random(1234)
    broker.create_topic(TopicConfig("t", partitions=3, retention_bytes=5000))
    shadow = [{"base": 0, "recs": []} for _ in range(3)]

    def shadow_trim():
        for s in shadow:
            total = sum(len(r) for r in s["recs"])
            while total > 5000:
                total -= len(s["recs"].pop(0))
                s["base"] += 1

    for _ in range(2000):
        op = rng.random()
        p = rng.randrange(3)
        s = shadow[p]
        if op < 0.55:
            payload = bytes([rng.randrange(256)]) * rng.randrange(1, 400)
            off = broker.append("t", p, payload)
            assert off == s["base"] + len(s["recs"])
            s["recs"].append(payload)
        elif op < 0.9:
            latest = s["base"] + len(s["recs"])
            start = rng.randint(s["base"], latest)
            got = broker.fetch("t", p, start, max_bytes=1 << 30)
            assert [r.payload for r in got.records] == s["recs"][start - s["base"]:]
        else:
            broker.enforce_retention("t")
            shadow_trim()
            assert broker.earliest_offsets("t") == [x["base"] for x in shadow]
        assert broker.latest_offsets("t") == [
            x["base"] + len(x["recs"]) for x in shadow
        ]


# --- disk-backed mode ---


def test_disk_reopen_bit_identical(tmp_path):
    payloads = [f"msg-{i}".encode() * (i + 1) for i in range(20)]
    with Broker(data_dir=tmp_path) as b:
        b.create_topic(TopicConfig("t", partitions=2))
        for i, p in enumerate(payloads):
            b.append("t", i % 2, p, event_time=777 + i)
        b.commit_offsets("g", {("t", 0): 5, ("t", 1): 2})
        before = {p: b.fetch("t", p, 0).records for p in (0, 1)}

    with Broker(data_dir=tmp_path) as b2:
        assert b2.topics() == ["t"]
        for p in (0, 1):
            after = b2.fetch("t", p, 0).records
            assert after == before[p]
        assert b2.fetch_committed("g") == {("t", 0): 5, ("t", 1): 2}


def test_disk_reopen_respects_trim(tmp_path):
    with Broker(data_dir=tmp_path) as b:
        b.create_topic(TopicConfig("t", retention_bytes=300))
        for i in range(10):
            b.append("t", 0, bytes([i]) * 100)
        assert b.enforce_retention("t") == [7]

    with Broker(data_dir=tmp_path) as b2:
        assert b2.earliest_offsets("t") == [7]
        assert b2.latest_offsets("t") == [10]
        got = b2.fetch("t", 0, 7)
        assert [r.payload for r in got.records] == [bytes([i]) * 100 for i in (7, 8, 9)]
        with pytest.raises(OffsetOutOfRange):
            b2.fetch("t", 0, 6)


def test_disk_frame_layout(tmp_path):
    # the segment bytes follow the documented little-endian frame exactly
    with Broker(data_dir=tmp_path) as b:
        b.create_topic(TopicConfig("t"))
        b.append("t", b"k1", b"hello", event_time=7777)
    seg = next((tmp_path / "topics" / "t").glob("*.seg"))
    raw = seg.read_bytes()
    magic, length = struct.unpack_from("<BI", raw, 0)
    assert magic == 0x50
    offset, event_time, key_len = struct.unpack_from("<QQI", raw, 5)
    assert (offset, event_time, key_len) == (0, 7777, 2)
    assert raw[25:27] == b"k1"
    (payload_len,) = struct.unpack_from("<I", raw, 27)
    assert payload_len == 5
    assert raw[31:36] == b"hello"
    assert len(raw) == 5 + length


def test_disk_no_key_marker(tmp_path):
    with Broker(data_dir=tmp_path) as b:
        b.create_topic(TopicConfig("t"))
        b.append("t", 0, b"p", event_time=1)
    seg = next((tmp_path / "topics" / "t").glob("*.seg"))
    raw = seg.read_bytes()
    _, _, key_len = struct.unpack_from("<QQI", raw, 5)
    assert key_len == 0xFFFFFFFF


def test_disk_torn_tail_dropped(tmp_path):
    with Broker(data_dir=tmp_path) as b:
        b.create_topic(TopicConfig("t"))
        b.append("t", 0, b"complete", event_time=1)
        b.append("t", 0, b"to-be-torn", event_time=2)
    seg = next((tmp_path / "topics" / "t").glob("*.seg"))
    raw = seg.read_bytes()
    seg.write_bytes(raw[:-4])  # simulate a torn final write
    with Broker(data_dir=tmp_path) as b2:
        got = b2.fetch("t", 0, 0)
        assert [r.payload for r in got.records] == [b"complete"]
        assert b2.latest_offsets("t") == [1]
