"""Experiment runner and benchmark console.

`run -c <config.json>` drives one experiment: broker pilot, source
pilot(s), engine pilot, optional scheduled extends, then drains and
writes the report bundle (pilots.csv, producer.csv, windows.csv,
latency.csv, summary.txt, plus rebalance/reconstruction CSVs when
populated).

`bench startup|produce|process` runs the three measurement matrices.

Exit codes: 0 clean, 1 config error (message names the offending field),
2 runtime failure. PILOTSTREAM_LOG sets log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .broker import TopicConfig
from .engine import StreamDefinition, registered_operators
from .errors import ConfigError, PilotStreamError, UnknownScenario
from .mass import (
    SCENARIOS,
    ClusterSourceConfig,
    SourceConfig,
    TemplateSourceConfig,
    generate_cluster_message,
    make_scenario,
    run_producers,
)
from .metrics import MetricsRegistry
from .pilot import PilotComputeDescription, PilotComputeService, PilotState
from . import masa  # registers the kmeans/gridrec/mlem operators

logger = logging.getLogger(__name__)


def _setup_logging() -> None:
    level = os.environ.get("PILOTSTREAM_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


# --- config loading ---


@dataclass
class ExperimentConfig:
    broker: dict[str, Any]
    pilots: list[PilotComputeDescription]
    source: SourceConfig
    stream: StreamDefinition
    schedule: list[tuple[float, int]] = field(default_factory=list)
    output_dir: str = "pilotstream-report"
    seed: int = 42


def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise ConfigError(f"{where}.{key}", "missing required field")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        names = (
            "/".join(k.__name__ for k in kind) if isinstance(kind, tuple) else kind.__name__
        )
        raise ConfigError(f"{where}.{key}", f"expected {names}, got {type(value).__name__}")
    return value


def _parse_source(obj: dict, seed: int) -> SourceConfig:
    if not isinstance(obj, dict):
        raise ConfigError("source", "must be an object")
    if "scenario" in obj:
        name = obj["scenario"]
        try:
            source = make_scenario(name, seed=seed, sinogram=bool(obj.get("sinogram", False)))
        except UnknownScenario:
            raise ConfigError(
                "source.scenario", f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}"
            ) from None
    else:
        plugin = _require(obj, "plugin", str, "source")
        cluster = None
        template = None
        if plugin == "cluster":
            cluster = ClusterSourceConfig(seed=seed)
        elif plugin == "template":
            tmpl = obj.get("template", {})
            path = tmpl.get("file") if isinstance(tmpl, dict) else None
            if not path:
                raise ConfigError("source.template.file", "template plugin needs a payload file")
            try:
                template = TemplateSourceConfig.from_file(path)
            except OSError as exc:
                raise ConfigError("source.template.file", str(exc)) from None
        else:
            raise ConfigError("source.plugin", f"unknown plugin {plugin!r}")
        source = SourceConfig(
            plugin=plugin, topic=obj.get("topic", "stream"),
            cluster=cluster, template=template, total_messages=100,
        )

    if "topic" in obj:
        source.topic = _require(obj, "topic", str, "source")
    if "producers" in obj:
        source.producers = _require(obj, "producers", int, "source")
    if "target_rate" in obj and obj["target_rate"] is not None:
        source.target_rate = _require(obj, "target_rate", (int, float), "source")
    if "total_messages" in obj and "duration_s" in obj:
        raise ConfigError("source.duration_s", "set either total_messages or duration_s, not both")
    if "total_messages" in obj:
        source.total_messages = _require(obj, "total_messages", int, "source")
        source.duration_s = None
    elif "duration_s" in obj:
        source.duration_s = _require(obj, "duration_s", (int, float), "source")
        source.total_messages = None
    if "cluster" in obj:
        if source.cluster is None:
            raise ConfigError("source.cluster", "cluster settings given for a non-cluster source")
        cobj = obj["cluster"]
        for key in ("num_centroids", "points_per_message", "dims", "seed"):
            if key in cobj:
                setattr(source.cluster, key, _require(cobj, key, int, "source.cluster"))
        for key in ("centroid_spread", "point_stddev"):
            if key in cobj:
                setattr(source.cluster, key, _require(cobj, key, (int, float), "source.cluster"))
    source.append_end_sentinel = True
    try:
        source.validate()
    except PilotStreamError as exc:
        raise ConfigError("source", str(exc)) from None
    return source


def load_config(path: str | Path, output_dir: Optional[str] = None,
                seed: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        bundled = resources.files("pilotstream").joinpath(f"configs/{path.name}")
        if bundled.is_file():
            path = Path(str(bundled))
        else:
            raise ConfigError("config", f"file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")

    seed = seed if seed is not None else int(raw.get("seed", 42))

    broker_obj = raw.get("broker", {})
    if not isinstance(broker_obj, dict):
        raise ConfigError("broker", "must be an object")
    partitions = broker_obj.get("partitions", 1)
    if not isinstance(partitions, int) or partitions < 1:
        raise ConfigError("broker.partitions", "must be an integer >= 1")

    pilots_obj = raw.get("pilots")
    if not isinstance(pilots_obj, list) or not pilots_obj:
        raise ConfigError("pilots", "must be a non-empty list")
    pilots = []
    for i, entry in enumerate(pilots_obj):
        if not isinstance(entry, dict):
            raise ConfigError(f"pilots[{i}]", "must be an object")
        stype = _require(entry, "service_type", str, f"pilots[{i}]")
        workers = entry.get("number_workers", 1)
        if not isinstance(workers, int) or workers < 1:
            raise ConfigError(f"pilots[{i}].number_workers", "must be an integer >= 1")
        pilots.append(
            PilotComputeDescription(
                service_type=stype,
                number_workers=workers,
                cores_per_worker=entry.get("cores_per_worker", 1),
                config=dict(entry.get("config", {})),
            )
        )
    types = [p.service_type for p in pilots]
    for needed in ("broker", "engine"):
        if needed not in types:
            raise ConfigError("pilots", f"needs a {needed} entry")
    for i, stype in enumerate(types):
        if stype not in ("broker", "engine", "source"):
            raise ConfigError(f"pilots[{i}].service_type", f"unknown service type {stype!r}")

    source = _parse_source(raw.get("source", {}), seed)

    stream_obj = raw.get("stream", {})
    if not isinstance(stream_obj, dict):
        raise ConfigError("stream", "must be an object")
    operator = stream_obj.get("operator", "identity")
    if operator not in registered_operators():
        raise ConfigError(
            "stream.operator",
            f"unknown operator {operator!r}; registered: {', '.join(registered_operators())}",
        )
    window_ms = stream_obj.get("window_ms", 1000)
    if not isinstance(window_ms, int) or window_ms <= 0:
        raise ConfigError("stream.window_ms", "must be an integer > 0")
    cap = stream_obj.get("max_records_per_window")
    if cap is not None and (not isinstance(cap, int) or cap < 1):
        raise ConfigError("stream.max_records_per_window", "must be an integer >= 1 or null")
    stream = StreamDefinition(
        topic=source.topic,
        group=stream_obj.get("group", "experiment"),
        window_ms=window_ms,
        operator=operator,
        operator_config=dict(stream_obj.get("operator_config", {})),
        max_records_per_window=cap,
    )

    schedule_obj = raw.get("schedule", [])
    if not isinstance(schedule_obj, list):
        raise ConfigError("schedule", "must be a list")
    schedule = []
    last = -1.0
    for i, entry in enumerate(schedule_obj):
        at_s = _require(entry, "at_s", (int, float), f"schedule[{i}]")
        extra = _require(entry, "extra_workers", int, f"schedule[{i}]")
        if at_s <= last:
            raise ConfigError(f"schedule[{i}].at_s", "times must be strictly increasing")
        if extra < 1:
            raise ConfigError(f"schedule[{i}].extra_workers", "must be >= 1")
        last = at_s
        schedule.append((float(at_s), extra))

    return ExperimentConfig(
        broker={
            "partitions": partitions,
            "retention_bytes": broker_obj.get("retention_bytes"),
            "retention_ms": broker_obj.get("retention_ms"),
            "persist_dir": broker_obj.get("persist_dir"),
        },
        pilots=pilots,
        source=source,
        stream=stream,
        schedule=schedule,
        output_dir=output_dir or raw.get("output_dir", "pilotstream-report"),
        seed=seed,
    )


# --- run ---


def _first(pilots: list[PilotComputeDescription], service_type: str):
    for desc in pilots:
        if desc.service_type == service_type:
            return desc
    return None


def _wait_running(pilot) -> None:
    state = pilot.wait()
    if state is not PilotState.RUNNING:
        raise PilotStreamError(
            f"pilot {pilot.pilot_id} reached {state.value}: {pilot.error}"
        )


def _retention_janitor(broker, topic: str, stop: threading.Event) -> threading.Thread:
    def loop():
        while not stop.wait(0.5):
            broker.enforce_retention(topic)

    t = threading.Thread(target=loop, name="retention", daemon=True)
    t.start()
    return t


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, output_dir=args.output, seed=args.seed)
    out_dir = Path(config.output_dir)
    metrics = MetricsRegistry()
    service = PilotComputeService(metrics)
    janitor_stop = threading.Event()
    try:
        broker_desc = _first(config.pilots, "broker")
        broker_desc.config.setdefault("data_dir", config.broker["persist_dir"])
        broker_pilot = service.create_pilot(broker_desc)
        _wait_running(broker_pilot)
        broker = broker_pilot.get_context()
        broker.create_topic(
            TopicConfig(
                name=config.source.topic,
                partitions=config.broker["partitions"],
                retention_bytes=config.broker["retention_bytes"],
                retention_ms=config.broker["retention_ms"],
            )
        )
        if config.broker["retention_bytes"] or config.broker["retention_ms"]:
            _retention_janitor(broker, config.source.topic, janitor_stop)

        source_desc = _first(config.pilots, "source") or PilotComputeDescription(
            service_type="source", number_workers=config.source.producers
        )
        source_desc.config.update({"broker": broker, "metrics": metrics})
        source_pilot = service.create_pilot(source_desc)
        _wait_running(source_pilot)
        runner = source_pilot.get_context()

        engine_desc = _first(config.pilots, "engine")
        engine_desc.config.update({"broker": broker, "metrics": metrics})
        engine_pilot = service.create_pilot(engine_desc)
        _wait_running(engine_pilot)
        engine = engine_pilot.get_context()

        config.stream.operator_config.setdefault("metrics", metrics)
        stream = engine.define_stream(config.stream)
        stream.start()

        produce_error: list[BaseException] = []

        def _produce():
            try:
                runner.run(config.source)
            except BaseException as exc:
                produce_error.append(exc)

        producer_thread = threading.Thread(target=_produce, name="source-run", daemon=True)
        t_start = time.monotonic()
        producer_thread.start()

        stop_schedule = threading.Event()

        def _schedule():
            for at_s, extra in config.schedule:
                delay = t_start + at_s - time.monotonic()
                if delay > 0 and stop_schedule.wait(delay):
                    return
                if stop_schedule.is_set():
                    return
                try:
                    engine_pilot.extend(extra)
                except PilotStreamError as exc:
                    logger.error("scheduled extend failed: %s", exc)

        schedule_thread = None
        if config.schedule:
            schedule_thread = threading.Thread(target=_schedule, name="schedule", daemon=True)
            schedule_thread.start()

        budget = (config.source.duration_s or 60.0) + 120.0
        producer_thread.join(budget)
        stream._thread.join(max(10.0, budget - (time.monotonic() - t_start)))
        stop_schedule.set()
        if schedule_thread is not None:
            schedule_thread.join()

        failed = False
        reason = ""
        if produce_error:
            failed, reason = True, f"source failed: {produce_error[0]}"
        elif producer_thread.is_alive():
            failed, reason = True, "source did not finish within its budget"
        elif stream._thread.is_alive():
            stream.stop()
            stream._thread.join(30)
            failed, reason = True, "stream did not drain within its budget"
        elif stream.state == "failed":
            failed, reason = True, f"stream failed: {stream.error}"

        janitor_stop.set()
        for pilot in (engine_pilot, source_pilot, broker_pilot):
            pilot.complete()

        metrics.export_csv(out_dir)
        extra_lines = [
            f"config: {args.config}",
            f"seed: {config.seed}",
            f"operator: {config.stream.operator}",
            f"stream_state: {stream.state}",
            f"status: {'FAILED: ' + reason if failed else 'ok'}",
        ]
        metrics.write_summary(out_dir / "summary.txt", extra_lines)
        print(f"report written to {out_dir}")
        if failed:
            print(f"runtime failure: {reason}", file=sys.stderr)
            return 2
        return 0
    finally:
        janitor_stop.set()
        service.cancel_all()


# --- bench ---


def _parse_workers(text: str) -> list[int]:
    try:
        sizes = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError("--workers", f"not an integer list: {text!r}") from None
    if not sizes or any(w < 1 for w in sizes):
        raise ConfigError("--workers", "worker counts must be integers >= 1")
    return sizes


def cmd_bench_startup(args: argparse.Namespace) -> int:
    sizes = _parse_workers(args.workers)
    metrics = MetricsRegistry()
    service = PilotComputeService(metrics)
    print("workers,startup_ms")
    for size in sizes:
        pilot = service.create_pilot(
            PilotComputeDescription(service_type="broker", number_workers=size)
        )
        _wait_running(pilot)
        startup_ms = pilot.transitions[-1][1]
        print(f"{size},{startup_ms:.2f}")
        pilot.cancel()
    if args.output:
        metrics.export_csv(args.output)
    return 0


def cmd_bench_produce(args: argparse.Namespace) -> int:
    sizes = _parse_workers(args.workers)
    if args.scenario not in SCENARIOS:
        raise ConfigError("--scenario", f"choose from {', '.join(SCENARIOS)}")
    metrics = MetricsRegistry()
    service = PilotComputeService(metrics)
    print("broker_workers,scenario,producers,messages,msgs_per_s,mb_per_s,saturated")
    try:
        for size in sizes:
            pilot = service.create_pilot(
                PilotComputeDescription(service_type="broker", number_workers=size)
            )
            _wait_running(pilot)
            broker = pilot.get_context()
            source = make_scenario(args.scenario, seed=args.seed)
            source.producers = args.producers
            source.target_rate = args.rate
            source.total_messages = None
            source.duration_s = args.duration
            broker.create_topic(
                TopicConfig(source.topic, partitions=12, retention_bytes=256_000_000)
            )
            stop = threading.Event()
            _retention_janitor(broker, source.topic, stop)
            report = run_producers(broker, source, metrics=metrics)
            stop.set()
            print(
                f"{size},{args.scenario},{source.producers},{report.total_messages},"
                f"{report.achieved_rate():.2f},{report.achieved_mb_per_s():.3f},"
                f"{int(report.saturated)}"
            )
            pilot.cancel()
        if args.output:
            metrics.export_csv(args.output)
        return 0
    finally:
        service.cancel_all()


def _bench_payload(operator: str, seed: int) -> bytes:
    if operator == "kmeans":
        rng = np.random.default_rng(seed)
        return generate_cluster_message(ClusterSourceConfig(seed=seed), rng)
    from .masa.tomo import sinogram_template

    return sinogram_template(2_000_000, grid=128)


def process_run(
    operator: str,
    workers: int,
    messages: int,
    payload: bytes,
    partitions: int = 2,
    cap: int = 1,
    window_ms: int = 10,
    operator_config: Optional[dict] = None,
    metrics: Optional[MetricsRegistry] = None,
) -> dict[str, float]:
    """One processing benchmark run: preload `messages` copies of
    `payload`, drain them through the operator, report throughput."""
    service = PilotComputeService(metrics)
    try:
        broker_pilot = service.create_pilot(
            PilotComputeDescription(service_type="broker", number_workers=1)
        )
        _wait_running(broker_pilot)
        broker = broker_pilot.get_context()
        broker.create_topic(TopicConfig("bench", partitions=partitions))
        source = SourceConfig(
            plugin="template", topic="bench", producers=1,
            total_messages=messages, append_end_sentinel=True,
            template=TemplateSourceConfig(payload=payload),
        )
        run_producers(broker, source, metrics=metrics)

        engine_pilot = service.create_pilot(
            PilotComputeDescription(
                service_type="engine", number_workers=workers,
                config={"broker": broker, "metrics": metrics},
            )
        )
        _wait_running(engine_pilot)
        engine = engine_pilot.get_context()
        opconf = dict(operator_config or {})
        if metrics is not None:
            opconf.setdefault("metrics", metrics)
        stream = engine.define_stream(
            StreamDefinition(
                topic="bench", group=f"bench-{operator}-{workers}", window_ms=window_ms,
                operator=operator, operator_config=opconf,
                max_records_per_window=cap,
            )
        )
        t0 = time.perf_counter()
        stream.run()
        wall = time.perf_counter() - t0
        rates = [
            w.record_count / (max(w.completed_at - w.planned_at, 1e-6) / 1000.0)
            for w in stream.windows
            if w.record_count > 0 and w.completed_at is not None
        ]
        return {
            "messages": float(messages),
            "wall_s": wall,
            "msgs_per_s": messages / wall if wall > 0 else 0.0,
            "median_window_msgs_per_s": statistics.median(rates) if rates else 0.0,
            "windows": float(len(stream.windows)),
        }
    finally:
        service.cancel_all()


def cmd_bench_process(args: argparse.Namespace) -> int:
    sizes = _parse_workers(args.workers)
    if args.operator not in registered_operators():
        raise ConfigError(
            "--operator", f"registered operators: {', '.join(registered_operators())}"
        )
    payload = _bench_payload(args.operator, args.seed)
    metrics = MetricsRegistry()
    print("engine_workers,operator,messages,wall_s,msgs_per_s,median_window_msgs_per_s")
    for size in sizes:
        result = process_run(
            args.operator, size, args.messages, payload, metrics=metrics
        )
        print(
            f"{size},{args.operator},{args.messages},{result['wall_s']:.2f},"
            f"{result['msgs_per_s']:.3f},{result['median_window_msgs_per_s']:.3f}"
        )
    if args.output:
        metrics.export_csv(args.output)
    return 0


# --- entry point ---


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; flag misuse is a config error
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pilotstream", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a JSON config")
    p_run.add_argument("-c", "--config", required=True, help="experiment config file")
    p_run.add_argument("-o", "--output", default=None, help="report output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.set_defaults(func=cmd_run)

    p_bench = sub.add_parser("bench", help="benchmark matrices")
    bench_sub = p_bench.add_subparsers(dest="bench_command", required=True)

    p_startup = bench_sub.add_parser("startup", help="pilot startup times by size")
    p_startup.add_argument("--workers", default="1,2,4,8")
    p_startup.add_argument("-o", "--output", default=None)
    p_startup.set_defaults(func=cmd_bench_startup)

    p_produce = bench_sub.add_parser("produce", help="producer throughput by scenario")
    p_produce.add_argument("--scenario", default="kmeans-random")
    p_produce.add_argument("--workers", default="1", help="broker worker counts")
    p_produce.add_argument("--producers", type=int, default=1)
    p_produce.add_argument("--rate", type=float, default=None, help="target msgs/s (default unlimited)")
    p_produce.add_argument("--duration", type=float, default=10.0)
    p_produce.add_argument("--seed", type=int, default=42)
    p_produce.add_argument("-o", "--output", default=None)
    p_produce.set_defaults(func=cmd_bench_produce)

    p_process = bench_sub.add_parser("process", help="operator throughput by worker count")
    p_process.add_argument("--operator", default="kmeans")
    p_process.add_argument("--workers", default="1,2")
    p_process.add_argument("--messages", type=int, default=20)
    p_process.add_argument("--seed", type=int, default=42)
    p_process.add_argument("-o", "--output", default=None)
    p_process.set_defaults(func=cmd_bench_process)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PilotStreamError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2


if __name__ == "__main__":
    sys.exit(main())
