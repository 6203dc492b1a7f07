"""A small task runtime with data-dependency clauses.

Tasks declare how they access named resources (``In``, ``Out``, ``InOut``,
``Commutative``).  The runtime derives the dependency graph from submission
order and runs ready tasks on a fixed pool of worker threads with
per-worker FIFO queues and work stealing.

Dependency rules, per resource:

* ``In`` waits for the last writer (or the last group of commutative tasks).
* ``Out``/``InOut`` also wait for every reader since that writer.
* Consecutive ``Commutative`` accesses form a group: each member waits for
  what preceded the group but not for its peers; peers exclude each other at
  dispatch through a per-resource try-lock, so they run one at a time in
  whatever order the scheduler finds them.

Example::

    with TaskRuntime(4) as rt:
        rt.spawn(produce, [Out("a")])
        rt.spawn(consume, [In("a")])
        rt.taskwait()
"""
from __future__ import annotations

import enum
import itertools
import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Optional

ENV_WORKERS = "EMPIC_NUM_WORKERS"


class Mode(enum.Enum):
    IN = "in"
    OUT = "out"
    INOUT = "inout"
    COMMUTATIVE = "commutative"

    @property
    def writes(self) -> bool:
        return self is not Mode.IN


@dataclass(frozen=True)
class AccessClause:
    resource: Hashable
    mode: Mode


def In(resource) -> AccessClause:
    return AccessClause(resource, Mode.IN)


def Out(resource) -> AccessClause:
    return AccessClause(resource, Mode.OUT)


def InOut(resource) -> AccessClause:
    return AccessClause(resource, Mode.INOUT)


def Commutative(resource) -> AccessClause:
    return AccessClause(resource, Mode.COMMUTATIVE)


class TaskingError(RuntimeError):
    pass


class DuplicateResourceInClause(TaskingError):
    pass


class PoolAlreadyRunning(TaskingError):
    pass


class PoolNotRunning(TaskingError):
    pass


def default_workers() -> int:
    """Worker count: ``EMPIC_NUM_WORKERS`` or one per physical core."""
    env = os.environ.get(ENV_WORKERS)
    if env:
        return max(1, int(env))
    try:
        import psutil

        n = psutil.cpu_count(logical=False)
    except ImportError:  # pragma: no cover
        n = None
    return n or os.cpu_count() or 1


class TaskHandle:
    __slots__ = ("id", "clauses", "body", "label", "_pending", "_successors",
                 "done", "commutative", "worker", "t_start", "t_end")

    def __init__(self, tid: int, body: Callable, clauses: tuple, label: str = ""):
        self.id = tid
        self.body = body
        self.clauses = clauses
        self.label = label
        self._pending = 0
        self._successors: list[TaskHandle] = []
        self.done = False
        self.commutative = tuple(c.resource for c in clauses if c.mode is Mode.COMMUTATIVE)
        self.worker = -1
        self.t_start = 0.0
        self.t_end = 0.0

    def __repr__(self) -> str:
        return f"TaskHandle(id={self.id}, label={self.label!r}, done={self.done})"


class _ResourceState:
    __slots__ = ("writers", "readers", "group", "group_deps")

    def __init__(self):
        self.writers: list[TaskHandle] = []
        self.readers: list[TaskHandle] = []
        self.group: Optional[list[TaskHandle]] = None
        self.group_deps: list[TaskHandle] = []


class TaskRuntime:
    """Worker pool plus dependency tracker.

    Parameters
    ----------
    n_workers : int, optional
        Pool size; defaults to :func:`default_workers`.
    trace : path, optional
        Write one NDJSON record per finished task (id, label, clauses,
        worker, start/end seconds) when the pool shuts down.
    instrument : bool
        Track per-resource entry/exit of running bodies and record any
        overlap that the clauses should have prevented.
    """

    def __init__(self, n_workers: Optional[int] = None, trace=None, instrument: bool = False):
        self.n_workers = n_workers if n_workers is not None else default_workers()
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        self.trace_path = trace
        self.instrument = instrument
        self._ids = itertools.count()
        self._lock = threading.Lock()
        self._resources: dict = {}
        self._queues = [deque() for _ in range(self.n_workers)]
        self._ready = threading.Semaphore(0)
        self._rr = itertools.count()
        self._held: set = set()
        self._parked: dict = {}
        self._outstanding = 0
        self._idle = threading.Condition(self._lock)
        self._threads: list[threading.Thread] = []
        self._running = False
        self._errors: list[BaseException] = []
        self._finished: list[TaskHandle] = []
        self._t0 = time.perf_counter()
        self._active_writers: dict = {}
        self._active_readers: dict = {}
        self.violations: list[str] = []

    # -- pool lifecycle ---------------------------------------------------

    def run_pool(self) -> "TaskRuntime":
        if self._running:
            raise PoolAlreadyRunning("pool is already running")
        self._running = True
        self._threads = [
            threading.Thread(target=self._worker, args=(w,), name=f"empic-worker-{w}", daemon=True)
            for w in range(self.n_workers)
        ]
        for t in self._threads:
            t.start()
        return self

    start = run_pool

    def shutdown(self) -> None:
        if not self._running:
            return
        self.taskwait(raise_errors=False)
        self._running = False
        for _ in self._threads:
            self._ready.release()
        for t in self._threads:
            t.join()
        self._threads = []
        if self.trace_path:
            self._write_trace()
        if self._errors:
            err, self._errors = self._errors[0], []
            raise err

    def __enter__(self) -> "TaskRuntime":
        return self.run_pool()

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.shutdown()
        else:
            try:
                self.shutdown()
            except Exception:
                pass

    # -- submission -------------------------------------------------------

    def spawn(self, body: Callable, clauses: Iterable[AccessClause] = (), label: str = "") -> TaskHandle:
        """Register ``body`` with its access clauses; returns its handle."""
        if not self._running:
            raise PoolNotRunning("call run_pool() before spawning tasks")
        clauses = tuple(clauses)
        seen = set()
        for c in clauses:
            if c.resource in seen:
                raise DuplicateResourceInClause(f"resource {c.resource!r} listed twice")
            seen.add(c.resource)
        task = TaskHandle(next(self._ids), body, clauses, label)
        with self._lock:
            deps = {}
            for c in clauses:
                for d in self._register(task, c):
                    if not d.done:
                        deps[d.id] = d
            task._pending = len(deps)
            for d in deps.values():
                d._successors.append(task)
            self._outstanding += 1
            ready = task._pending == 0
        if ready:
            self._push(task, next(self._rr) % self.n_workers)
        return task

    def _register(self, task: TaskHandle, clause: AccessClause) -> list:
        st = self._resources.get(clause.resource)
        if st is None:
            st = self._resources[clause.resource] = _ResourceState()
        mode = clause.mode
        if mode is Mode.IN:
            if st.group is not None:
                st.writers, st.group = st.group, None
                st.readers = []
            st.readers.append(task)
            return list(st.writers)
        if mode is Mode.COMMUTATIVE:
            if st.group is None:
                st.group_deps = st.writers + st.readers
                st.group = []
            st.group.append(task)
            return list(st.group_deps)
        deps = st.writers + st.readers + (st.group or [])
        st.writers, st.readers, st.group = [task], [], None
        return deps

    def taskwait(self, raise_errors: bool = True) -> None:
        """Block until every task spawned so far has finished."""
        with self._idle:
            while self._outstanding:
                self._idle.wait()
            self._resources.clear()
        if raise_errors and self._errors:
            err, self._errors = self._errors[0], []
            raise err

    def wait(self, tasks: Iterable[TaskHandle]) -> None:
        """Block until the given tasks have finished."""
        tasks = list(tasks)
        with self._idle:
            while not all(t.done for t in tasks):
                self._idle.wait()
        if self._errors:
            err, self._errors = self._errors[0], []
            raise err

    # -- scheduling -------------------------------------------------------

    def _push(self, task: TaskHandle, worker: int) -> None:
        self._queues[worker].append(task)
        self._ready.release()

    def _take(self, me: int) -> Optional[TaskHandle]:
        try:
            return self._queues[me].popleft()
        except IndexError:
            pass
        n = self.n_workers
        for k in range(1, n):
            try:
                return self._queues[(me + k) % n].pop()
            except IndexError:
                continue
        return None

    def _try_acquire(self, task: TaskHandle) -> bool:
        """All-or-nothing acquisition of the task's commutative resources."""
        with self._lock:
            for r in task.commutative:
                if r in self._held:
                    self._parked.setdefault(r, []).append(task)
                    return False
            self._held.update(task.commutative)
            return True

    def _worker(self, me: int) -> None:
        while True:
            self._ready.acquire()
            if not self._running and not any(self._queues):
                return
            task = None
            while task is None:
                task = self._take(me)
                if task is None:
                    if not self._running:
                        return
                    time.sleep(0)
            if task.commutative and not self._try_acquire(task):
                continue
            self._execute(task, me)

    def _execute(self, task: TaskHandle, me: int) -> None:
        task.worker = me
        if self.instrument:
            self._enter(task)
        task.t_start = time.perf_counter() - self._t0
        try:
            task.body()
        except BaseException as exc:  # noqa: BLE001 - reported at taskwait
            with self._lock:
                self._errors.append(exc)
        task.t_end = time.perf_counter() - self._t0
        if self.instrument:
            self._exit(task)
        released = []
        with self._lock:
            for r in task.commutative:
                self._held.discard(r)
                released.extend(self._parked.pop(r, ()))
            task.done = True
            for s in task._successors:
                s._pending -= 1
                if s._pending == 0:
                    released.append(s)
            task._successors = []
            if self.trace_path:
                self._finished.append(task)
            self._outstanding -= 1
            self._idle.notify_all()
        for s in released:
            self._push(s, me)

    # -- instrumentation --------------------------------------------------

    def _enter(self, task: TaskHandle) -> None:
        with self._lock:
            for c in task.clauses:
                r = c.resource
                w = self._active_writers.get(r, 0)
                if c.mode.writes:
                    if w or self._active_readers.get(r, 0):
                        self.violations.append(f"task {task.id} writes {r!r} while it is in use")
                    self._active_writers[r] = w + 1
                else:
                    if w:
                        self.violations.append(f"task {task.id} reads {r!r} during a write")
                    self._active_readers[r] = self._active_readers.get(r, 0) + 1

    def _exit(self, task: TaskHandle) -> None:
        with self._lock:
            for c in task.clauses:
                if c.mode.writes:
                    self._active_writers[c.resource] -= 1
                else:
                    self._active_readers[c.resource] -= 1

    def _write_trace(self) -> None:
        with open(self.trace_path, "a") as fh:
            for t in sorted(self._finished, key=lambda t: t.id):
                rec = {
                    "id": t.id,
                    "label": t.label,
                    "clauses": [[str(c.resource), c.mode.value] for c in t.clauses],
                    "worker": t.worker,
                    "start": t.t_start,
                    "end": t.t_end,
                }
                fh.write(json.dumps(rec) + "\n")
        self._finished = []


def dedupe(clauses: Iterable[AccessClause]) -> list[AccessClause]:
    """Merge clauses naming the same resource.

    Identical modes collapse; mixed modes become ``InOut``.  Needed when
    neighbour indices coincide on one- or two-region rings.
    """
    merged: dict = {}
    for c in clauses:
        prev = merged.get(c.resource)
        merged[c.resource] = c.mode if prev in (None, c.mode) else Mode.INOUT
    return [AccessClause(r, m) for r, m in merged.items()]
