"""Pilot-style resource management over in-process worker pools.

A pilot is a placeholder allocation: a pool of workers started for one
service type (broker, engine, source) through a small plugin interface.
Work is submitted as named Compute-Units; allocations grow at runtime via
extend() or child pilots and shrink by cancelling a child, whose workers
drain before leaving the pool.

Plugins implement five behaviors: submit_job, wait, extend, get_context,
get_config_data. New service types can be registered at runtime.
"""

from __future__ import annotations

import itertools
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

from .errors import (
    InvalidConfig,
    NotRunning,
    SpawnFailure,
    TimedOut,
    UnknownFunction,
    UnknownServiceType,
)

logger = logging.getLogger(__name__)

DEFAULT_WAIT_TIMEOUT_S = 60.0


class PilotState(Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


TERMINAL_STATES = {PilotState.DONE, PilotState.FAILED, PilotState.CANCELED}


class UnitState(Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"


@dataclass
class PilotComputeDescription:
    service_type: str
    number_workers: int = 1
    cores_per_worker: int = 1
    parent_pilot: Optional[str] = None
    config: dict[str, Any] = field(default_factory=dict)


class ComputeUnit:
    """Handle for one submitted task; result readable only once DONE."""

    def __init__(self, name: str, fn: Callable, args: tuple, kwargs: dict):
        self.name = name
        self._fn = fn
        self._args = args
        self._kwargs = kwargs
        self._state = UnitState.PENDING
        self._result: Any = None
        self._error: Optional[BaseException] = None
        self._done = threading.Event()

    @property
    def state(self) -> UnitState:
        return self._state

    @property
    def error(self) -> Optional[BaseException]:
        return self._error

    @property
    def result(self) -> Any:
        if self._state is not UnitState.DONE:
            raise NotRunning(f"unit {self.name!r} is {self._state.value}, not DONE")
        return self._result

    def _run(self) -> None:
        self._state = UnitState.RUNNING
        try:
            self._result = self._fn(*self._args, **self._kwargs)
            self._state = UnitState.DONE
        except BaseException as exc:  # surfaced through wait()
            self._error = exc
            self._state = UnitState.FAILED
        finally:
            self._done.set()

    def wait(self, timeout: Optional[float] = None) -> Any:
        if not self._done.wait(timeout):
            raise TimedOut(f"unit {self.name!r} still {self._state.value}")
        if self._state is UnitState.FAILED:
            raise self._error
        return self._result


_STOP = object()


class _Worker:
    def __init__(self, worker_id: str):
        self.worker_id = worker_id
        self.inbox: queue.Queue = queue.Queue()
        self.retired = False
        self.thread = threading.Thread(target=self._loop, name=worker_id, daemon=True)
        self.thread.start()

    def _loop(self) -> None:
        while True:
            item = self.inbox.get()
            if item is _STOP:
                return
            item._run()


class WorkerPool:
    """Fixed set of worker threads, each with its own task queue.

    Tasks can be pinned to a worker id (engine partition tasks) or left
    unpinned (round-robin). Removal drains: the worker finishes everything
    already queued, then exits.
    """

    _pool_seq = itertools.count()

    def __init__(self, name: Optional[str] = None, workers: int = 0):
        self.name = name or f"pool-{next(self._pool_seq)}"
        self._lock = threading.Lock()
        self._workers: dict[str, _Worker] = {}
        self._next_id = 0
        self._rr = 0
        self.on_change: list[Callable[[list[str]], None]] = []
        if workers:
            self.add_workers(workers)

    def worker_ids(self) -> list[str]:
        with self._lock:
            return sorted(w for w, obj in self._workers.items() if not obj.retired)

    @property
    def size(self) -> int:
        return len(self.worker_ids())

    def _notify(self) -> None:
        ids = self.worker_ids()
        for cb in list(self.on_change):
            cb(ids)

    def add_workers(self, count: int) -> list[str]:
        added = []
        with self._lock:
            for _ in range(count):
                wid = f"{self.name}-w{self._next_id}"
                self._next_id += 1
                self._workers[wid] = _Worker(wid)
                added.append(wid)
        if added:
            self._notify()
        return added

    def remove_workers(self, ids: list[str], drain_timeout: Optional[float] = None) -> None:
        """Retire workers: no new tasks, queued tasks finish, thread exits."""
        victims = []
        with self._lock:
            for wid in ids:
                w = self._workers.get(wid)
                if w is not None and not w.retired:
                    w.retired = True
                    victims.append(w)
        if not victims:
            return
        self._notify()  # listeners must stop targeting these ids
        for w in victims:
            w.inbox.put(_STOP)
        for w in victims:
            w.thread.join(drain_timeout)
        with self._lock:
            for w in victims:
                self._workers.pop(w.worker_id, None)

    def submit(
        self,
        fn: Callable,
        *args,
        worker: Optional[str] = None,
        name: str = "task",
        **kwargs,
    ) -> ComputeUnit:
        unit = ComputeUnit(name, fn, args, kwargs)
        with self._lock:
            live = [w for w in self._workers.values() if not w.retired]
            if not live:
                raise NotRunning(f"pool {self.name} has no workers")
            target = None
            if worker is not None:
                cand = self._workers.get(worker)
                if cand is not None and not cand.retired:
                    target = cand
            if target is None:
                # unpinned, or the pinned worker left: round-robin fallback
                live.sort(key=lambda w: w.worker_id)
                target = live[self._rr % len(live)]
                self._rr += 1
            target.inbox.put(unit)
        return unit

    def shutdown(self, drain: bool = True) -> None:
        ids = list(self._workers)
        if drain:
            self.remove_workers(ids)
        else:
            with self._lock:
                for w in self._workers.values():
                    w.retired = True
                    w.inbox.put(_STOP)


# --- compute-unit function registry ---

_functions: dict[str, Callable] = {}
_functions_lock = threading.Lock()


def register_function(name: str, fn: Callable) -> None:
    with _functions_lock:
        _functions[name] = fn


def resolve_function(name_or_fn: str | Callable) -> tuple[str, Callable]:
    if callable(name_or_fn):
        return getattr(name_or_fn, "__name__", "callable"), name_or_fn
    with _functions_lock:
        fn = _functions.get(name_or_fn)
    if fn is None:
        raise UnknownFunction(name_or_fn)
    return name_or_fn, fn


# --- plugin SPI ---


class ServicePlugin:
    """Base plugin: the five SPI behaviors over one worker pool.

    Subclasses override _start (build and return the native context),
    _extra_config, and optionally _workers_changed / shutdown.
    """

    def __init__(self, description: PilotComputeDescription, pool: WorkerPool):
        self.description = description
        self.pool = pool
        self._context: Any = None
        self._ready = threading.Event()

    # SPI 1/5
    def submit_job(self) -> None:
        cfg = self.description.config
        delay = float(cfg.get("bootstrap_delay_s", 0) or 0)
        if delay > 0:
            time.sleep(delay)
        if str(cfg.get("fail_bootstrap", "")).lower() in ("1", "true", "yes"):
            raise SpawnFailure("bootstrap failure injected by config")
        self.pool.add_workers(self.description.number_workers)
        self._context = self._start()
        self._ready.set()

    # SPI 2/5
    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._ready.wait(timeout)

    # SPI 3/5
    def extend(self, extra_workers: int) -> int:
        if extra_workers > 0:
            self.pool.add_workers(extra_workers)
        return self.pool.size

    # SPI 4/5
    def get_context(self) -> Any:
        return self._context

    # SPI 5/5
    def get_config_data(self) -> dict[str, str]:
        data = {
            "service": self.description.service_type,
            "workers": str(self.pool.size),
            "cores_per_worker": str(self.description.cores_per_worker),
        }
        data.update(self._extra_config())
        return data

    def _start(self) -> Any:
        return self.pool

    def _extra_config(self) -> dict[str, str]:
        return {}

    def shutdown(self) -> None:
        pass


class BrokerPlugin(ServicePlugin):
    """Starts an embedded broker; context is the broker client itself.

    Config keys: data_dir (enables persistence), max_payload_bytes.
    """

    def _start(self):
        from .broker import DEFAULT_MAX_PAYLOAD_BYTES, Broker

        cfg = self.description.config
        broker = cfg.get("broker")
        if broker is None:
            broker = Broker(
                data_dir=cfg.get("data_dir"),
                max_payload_bytes=int(cfg.get("max_payload_bytes", DEFAULT_MAX_PAYLOAD_BYTES)),
            )
        self._broker = broker
        return broker

    def _extra_config(self) -> dict[str, str]:
        return {"topics": ",".join(self._broker.topics())}

    def shutdown(self) -> None:
        if self.description.config.get("broker") is None:
            self._broker.close()


class EnginePlugin(ServicePlugin):
    """Starts a stream engine on this pilot's workers.

    Config keys: broker (required: broker client or a pilot owning one),
    metrics (optional registry). Pool growth triggers engine rebalance.
    """

    def _start(self):
        from .engine import StreamEngine

        cfg = self.description.config
        broker = cfg.get("broker")
        if hasattr(broker, "get_context"):
            broker = broker.get_context()
        if broker is None:
            raise SpawnFailure("engine pilot needs a 'broker' config entry")
        engine = StreamEngine(
            broker,
            self.pool,
            metrics=cfg.get("metrics"),
            engine_id=cfg.get("engine_id", "engine"),
        )
        self.pool.on_change.append(engine.workers_changed)
        return engine

    def shutdown(self) -> None:
        if self._context is not None:
            self._context.stop_all()


class SourcePlugin(ServicePlugin):
    """Hosts stream producers; context is a producer runner bound to the
    broker. Config keys: broker (client or pilot), metrics (optional).
    """

    def _start(self):
        from .mass import ProducerRunner

        cfg = self.description.config
        broker = cfg.get("broker")
        if hasattr(broker, "get_context"):
            broker = broker.get_context()
        if broker is None:
            raise SpawnFailure("source pilot needs a 'broker' config entry")
        return ProducerRunner(broker, pool=self.pool, metrics=cfg.get("metrics"))


_plugins: dict[str, Callable[[PilotComputeDescription, WorkerPool], ServicePlugin]] = {}
_plugins_lock = threading.Lock()


def register_plugin(service_type: str, factory: Callable[..., ServicePlugin]) -> None:
    with _plugins_lock:
        _plugins[service_type] = factory


register_plugin("broker", BrokerPlugin)
register_plugin("engine", EnginePlugin)
register_plugin("source", SourcePlugin)


# --- pilots ---


class Pilot:
    """Handle over one allocation; all mutation goes through the methods.

    Child pilots (parent_pilot set) add workers to the parent's pool and
    share its context: cancel() retires exactly the workers they added.
    """

    def __init__(
        self,
        pilot_id: str,
        description: PilotComputeDescription,
        plugin: Optional[ServicePlugin],
        pool: WorkerPool,
        parent: Optional["Pilot"] = None,
        metrics=None,
    ):
        self.pilot_id = pilot_id
        self.description = description
        self.plugin = plugin
        self.pool = pool
        self.parent = parent
        self._metrics = metrics
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)
        self._created_ms = time.time() * 1000
        self._state = PilotState.PENDING
        self.transitions: list[tuple[PilotState, float]] = [(PilotState.PENDING, 0.0)]
        self._error: Optional[BaseException] = None
        self._my_workers: list[str] = []
        self._boot = threading.Thread(target=self._bootstrap, name=pilot_id, daemon=True)
        self._boot.start()

    # --- state machine ---

    @property
    def state(self) -> PilotState:
        with self._lock:
            return self._state

    @property
    def error(self) -> Optional[BaseException]:
        return self._error

    def _transition(self, new: PilotState) -> None:
        with self._changed:
            if self._state in TERMINAL_STATES:
                return
            self._state = new
            self.transitions.append((new, time.time() * 1000 - self._created_ms))
            self._changed.notify_all()

    def _bootstrap(self) -> None:
        try:
            if self.parent is not None:
                cfg = self.description.config
                delay = float(cfg.get("bootstrap_delay_s", 0) or 0)
                if delay > 0:
                    time.sleep(delay)
                if str(cfg.get("fail_bootstrap", "")).lower() in ("1", "true", "yes"):
                    raise SpawnFailure("bootstrap failure injected by config")
                self._my_workers = self.pool.add_workers(self.description.number_workers)
            else:
                self.plugin.submit_job()
        except BaseException as exc:
            self._error = exc
            logger.error("pilot %s failed to start: %s", self.pilot_id, exc)
            self._transition(PilotState.FAILED)
            return
        self._transition(PilotState.RUNNING)
        if self._metrics is not None:
            startup_ms = self.transitions[-1][1]
            self._metrics.record_pilot(
                self.pilot_id, self.description.service_type, self.workers, startup_ms
            )

    def wait(self, timeout: Optional[float] = DEFAULT_WAIT_TIMEOUT_S) -> PilotState:
        """Block until RUNNING or terminal; TimedOut if still PENDING."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._changed:
            while self._state is PilotState.PENDING:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimedOut(f"pilot {self.pilot_id} still PENDING after {timeout}s")
                self._changed.wait(remaining)
            return self._state

    # --- capacity ---

    @property
    def workers(self) -> int:
        if self.parent is not None:
            return len(self._my_workers)
        return self.pool.size

    def _require_running(self) -> None:
        if self.state is not PilotState.RUNNING:
            raise NotRunning(f"pilot {self.pilot_id} is {self.state.value}")

    def extend(self, extra_workers: int) -> int:
        """Grow this allocation; returns the updated worker count."""
        self._require_running()
        if extra_workers < 0:
            raise InvalidConfig("extra_workers must be >= 0")
        if extra_workers == 0:
            return self.workers
        if self.parent is not None:
            self._my_workers.extend(self.pool.add_workers(extra_workers))
        else:
            self.plugin.extend(extra_workers)
        logger.info("pilot %s extended by %d to %d workers",
                    self.pilot_id, extra_workers, self.workers)
        return self.workers

    # --- work ---

    def submit(self, fn_or_name: str | Callable, *args, **kwargs) -> ComputeUnit:
        self._require_running()
        name, fn = resolve_function(fn_or_name)
        return self.pool.submit(fn, *args, name=name, **kwargs)

    def get_context(self) -> Any:
        self._require_running()
        if self.parent is not None:
            return self.parent.get_context()
        return self.plugin.get_context()

    def get_config_data(self) -> dict[str, str]:
        if self.parent is not None:
            data = dict(self.parent.get_config_data())
            data["workers"] = str(len(self._my_workers))
            data["parent"] = self.parent.pilot_id
            return data
        return self.plugin.get_config_data()

    # --- teardown ---

    def _teardown(self, final: PilotState) -> None:
        with self._lock:
            if self._state in TERMINAL_STATES:
                return
        self._boot.join()
        if self.state in TERMINAL_STATES:
            return
        if self.parent is not None:
            self.pool.remove_workers(self._my_workers)
        else:
            if self.plugin is not None:
                self.plugin.shutdown()
            self.pool.shutdown()
        self._transition(final)

    def cancel(self) -> None:
        """Stop this allocation; queued work drains first."""
        self._teardown(PilotState.CANCELED)

    def complete(self) -> None:
        """Clean shutdown after a finished run."""
        self._teardown(PilotState.DONE)


class PilotComputeService:
    """Factory and registry for pilots in this process."""

    def __init__(self, metrics=None):
        self._lock = threading.Lock()
        self._pilots: dict[str, Pilot] = {}
        self._seq = itertools.count()
        self.metrics = metrics

    def create_pilot(self, description: PilotComputeDescription) -> Pilot:
        if description.number_workers < 1:
            raise InvalidConfig("number_workers must be >= 1")
        if description.cores_per_worker < 1:
            raise InvalidConfig("cores_per_worker must be >= 1")
        with _plugins_lock:
            factory = _plugins.get(description.service_type)
        if factory is None:
            raise UnknownServiceType(description.service_type)

        parent: Optional[Pilot] = None
        if description.parent_pilot is not None:
            parent = self.get_pilot(description.parent_pilot)
            if parent is None:
                raise InvalidConfig(f"parent_pilot {description.parent_pilot!r} not found")
            if parent.description.service_type != description.service_type:
                raise InvalidConfig(
                    f"parent service_type {parent.description.service_type!r} "
                    f"!= {description.service_type!r}"
                )

        with self._lock:
            pilot_id = f"pilot-{next(self._seq):04d}-{description.service_type}"
        if parent is not None:
            pilot = Pilot(pilot_id, description, None, parent.pool, parent=parent,
                          metrics=self.metrics)
        else:
            pool = WorkerPool(name=pilot_id)
            plugin = factory(description, pool)
            pilot = Pilot(pilot_id, description, plugin, pool, metrics=self.metrics)
        with self._lock:
            self._pilots[pilot_id] = pilot
        return pilot

    def get_pilot(self, pilot_id: str) -> Optional[Pilot]:
        with self._lock:
            return self._pilots.get(pilot_id)

    def list_pilots(self) -> list[Pilot]:
        with self._lock:
            return list(self._pilots.values())

    def cancel_all(self) -> None:
        for pilot in reversed(self.list_pilots()):
            if pilot.state not in TERMINAL_STATES:
                pilot.cancel()
