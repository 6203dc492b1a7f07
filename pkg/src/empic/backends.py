"""Time-loop drivers: serial, particle-decomposed parallel-for, and the
region-decomposed task variants.

Every backend runs the same kernels in the same stage order per step:
interpolate/push/deposit, current reduction, filter, field advance, guard
exchange (plus particle migration for region backends).  They differ only
in how work is split and synchronized.
"""
from __future__ import annotations

import enum
import math
import threading
import time
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels as K
from . import regions as R
from .core import (
    GUARD_LO,
    J_DTYPE,
    EMFields,
    SimConfig,
    VecGrid,
    init_laser,
    species_streams,
    validate_config,
)
from .tasking import Commutative, In, InOut, Out, TaskRuntime, dedupe

G = GUARD_LO


class BackendKind(str, enum.Enum):
    SERIAL = "serial"
    PARALLEL_FOR = "parallel-for"
    TASKLIKE = "tasklike"
    REDUCTION_SYNC = "reduction-sync"
    REDUCTION_ASYNC = "reduction-async"
    COMMUTATIVE_SYNC = "commutative-sync"
    COMMUTATIVE_ASYNC = "commutative-async"

    @property
    def spatial(self) -> bool:
        return self not in (BackendKind.SERIAL, BackendKind.PARALLEL_FOR)

    @property
    def commutative(self) -> bool:
        return self in (BackendKind.COMMUTATIVE_SYNC, BackendKind.COMMUTATIVE_ASYNC)

    @property
    def asynchronous(self) -> bool:
        return self in (BackendKind.REDUCTION_ASYNC, BackendKind.COMMUTATIVE_ASYNC)


BACKENDS = tuple(k.value for k in BackendKind)
TASK_BACKENDS = tuple(k.value for k in BackendKind if k.spatial)


class UnknownBackend(ValueError):
    pass


def backend_kind(name) -> BackendKind:
    try:
        return BackendKind(name)
    except ValueError:
        raise UnknownBackend(f"unknown backend {name!r}; choose from {', '.join(BACKENDS)}") from None


@dataclass
class SimState:
    """Everything a backend needs to advance a simulation."""

    cfg: SimConfig
    regions: list
    streams: list
    iter: int = 0
    n_move: int = 0
    clock: dict = field(default_factory=lambda: defaultdict(float))
    j_shared: Optional[VecGrid] = None
    # step -> array (n_regions, 2 + n_species): electric, magnetic, kinetic sums
    energy_partials: dict = field(default_factory=dict)
    _clock_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def create(cls, cfg: SimConfig, n_regions: Optional[int] = None) -> "SimState":
        """Validate ``cfg``, build initial fields/plasma and partition them."""
        validate_config(cfg)
        emf = EMFields.zeros(cfg.nx, cfg.ny)
        if cfg.laser is not None:
            init_laser(emf, cfg.laser, cfg)
        streams = species_streams(cfg)
        regions = R.partition(cfg, emf, n_regions, streams)
        return cls(cfg, regions, streams)

    @property
    def periodic_x(self) -> bool:
        return not self.cfg.moving_window

    def tick(self, stage: str, seconds: float) -> None:
        with self._clock_lock:
            self.clock[stage] += seconds

    def n_particles(self) -> int:
        return R.total_particles(self.regions)

    def window_due(self, step: int) -> bool:
        """Whether a moving-window shift happens at the start of ``step``."""
        cfg = self.cfg
        return cfg.moving_window and step * cfg.dt > cfg.dx * (self.n_move + 1)


def create_state(cfg: SimConfig, kind="serial", n_regions: Optional[int] = None) -> SimState:
    """State partitioned as ``kind`` expects (one region for global backends)."""
    kind = backend_kind(kind)
    if not kind.spatial:
        n_regions = 1
    return SimState.create(cfg, n_regions)


# --------------------------------------------------------------------------
# per-region stage bodies shared by the region backends


class _Stopwatch:
    __slots__ = ("state", "stage", "t0")

    def __init__(self, state: SimState, stage: str):
        self.state = state
        self.stage = stage

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.state.tick(self.stage, time.perf_counter() - self.t0)


def advance_region(state: SimState, r: R.Region, target=None) -> None:
    """Stages 1-3 for one region, staging row-leavers for migration.

    Deposits into ``r.j_local`` (zeroed first) or, when ``target`` is given,
    accumulates into that shared-buffer view without zeroing.
    """
    cfg = state.cfg
    if target is None:
        j = r.j_local.j.data
        j[...] = 0.0
    else:
        j = target
    e, b = r.emf.e.data, r.emf.b.data
    for s, sp in enumerate(cfg.species):
        buf, lo, hi = r.particles[s], r.outgoing_lo[s], r.outgoing_hi[s]
        lo.clear()
        hi.clear()
        lo.reserve(buf.n)
        hi.reserve(buf.n)
        n, nlo, nhi = K.advance_extract(buf.data, buf.n, e, b, j, sp.q, sp.m_q, cfg.dt,
                                        cfg.dx, cfg.dy, cfg.nx, r.n_rows, state.periodic_x,
                                        lo.data, hi.data)
        buf.n, lo.n, hi.n = n, nlo, nhi
    K.fold_x_guards(j, cfg.nx, state.periodic_x, 0, j.shape[1])


def filter_region(state: SimState, r: R.Region) -> None:
    j = r.j_local.j.data
    K.filter_rows(j, r.nx, G, G + r.n_rows, state.cfg.filter, state.periodic_x)
    K.fill_x_guards(j, r.nx, state.periodic_x, G, G + r.n_rows)


def field_region(state: SimState, r: R.Region, upper: R.Region) -> None:
    cfg = state.cfg
    K.yee_advance_arrays(r.emf.e.data, r.emf.b.data, r.j_local.j.data,
                         upper.j_local.j.data[:, G, :], cfg.dt, cfg.dx, cfg.dy,
                         r.n_rows, r.nx)


def region_energy_partial(state: SimState, r: R.Region) -> np.ndarray:
    """Electric, magnetic and per-species kinetic energy of one region."""
    cfg = state.cfg
    out = np.zeros(2 + len(cfg.species))
    area = cfg.dx * cfg.dy
    n = r.n_rows
    e = r.emf.e.data[:, G:G + n, G:G + cfg.nx].astype(np.float64)
    b = r.emf.b.data[:, G:G + n, G:G + cfg.nx].astype(np.float64)
    out[0] = 0.5 * np.sum(e * e) * area
    out[1] = 0.5 * np.sum(b * b) * area
    for s, sp in enumerate(cfg.species):
        buf = r.particles[s]
        out[2 + s] = abs(sp.q * sp.m_q) * K.kinetic_energy(buf.data, buf.n) * area
    return out


def _record_energy(state: SimState, step: int, k: int, n_regions: int, r: R.Region) -> None:
    part = region_energy_partial(state, r)
    with state._clock_lock:
        arr = state.energy_partials.get(step)
        if arr is None:
            arr = state.energy_partials[step] = np.zeros((n_regions, len(part)))
    arr[k] = part


def move_window(state: SimState) -> None:
    """Shift every region one cell towards -x and inject a fresh plasma column."""
    state.n_move += 1
    for r in state.regions:
        R.shift_region_window(r, state.cfg, state.streams, state.n_move)


# --------------------------------------------------------------------------
# serial and parallel-for (one region spanning the grid)


def _chunks(start: int, stop: int, n: int) -> list[tuple[int, int]]:
    size = stop - start
    return [(start + size * k // n, start + size * (k + 1) // n) for k in range(n)]


class _GlobalStepper:
    """Single-region step with optional static thread chunking."""

    def __init__(self, state: SimState, n_threads: int = 1):
        if len(state.regions) != 1:
            raise ValueError("global backends need a single-region state")
        self.state = state
        self.r = state.regions[0]
        self.n = n_threads
        self.pool = ThreadPoolExecutor(n_threads) if n_threads > 1 else None
        j = self.r.j_local.j.data
        self.copies = [j] + [np.zeros_like(j) for _ in range(n_threads - 1)]

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown()

    def _map(self, fn, items) -> None:
        if self.pool is None:
            for it in items:
                fn(it)
        else:
            list(self.pool.map(fn, items))

    def step(self, step: int) -> None:
        state, r, cfg = self.state, self.r, self.state.cfg
        nx, ny = cfg.nx, r.n_rows
        px = state.periodic_x
        if state.window_due(step):
            with _Stopwatch(state, "window"):
                move_window(state)

        e, b = r.emf.e.data, r.emf.b.data
        chunks = {s: _chunks(0, buf.n, self.n) for s, buf in enumerate(r.particles)}

        def push(t):
            j = self.copies[t]
            j[...] = 0.0
            for s, sp in enumerate(cfg.species):
                a, z = chunks[s][t]
                K.advance_range(r.particles[s].data, a, z, e, b, j, sp.q, sp.m_q, cfg.dt,
                                cfg.dx, cfg.dy, nx, ny, px)

        with _Stopwatch(state, "advance"):
            self._map(push, range(self.n))
            if not px:
                for buf in r.particles:
                    buf.n = K.compact_open_x(buf.data, buf.n, nx)

        j = self.copies[0]
        n_arr = j.shape[1]
        with _Stopwatch(state, "reduce"):
            if self.n > 1:
                def reduce_rows(rows):
                    for c in self.copies[1:]:
                        K.sum_into(j, c, rows[0], rows[1])
                self._map(reduce_rows, _chunks(0, n_arr, self.n))
            self._map(lambda rows: K.fold_x_guards(j, nx, px, rows[0], rows[1]),
                      _chunks(0, n_arr, self.n))
            R.reduce_ghost_current(r, r, r)

        with _Stopwatch(state, "filter"):
            def filt(rows):
                K.filter_rows(j, nx, rows[0], rows[1], cfg.filter, px)
                K.fill_x_guards(j, nx, px, rows[0], rows[1])
            self._map(filt, _chunks(G, G + ny, self.n))

        with _Stopwatch(state, "field"):
            j_next = j[:, G, :]
            self._map(lambda rows: K.yee_b(e, b, 0.5 * cfg.dt, cfg.dx, cfg.dy, rows[0], rows[1], -1, nx + 1),
                      _chunks(-1, ny + 1, self.n))
            self._map(lambda rows: K.yee_e(e, b, j, j_next, cfg.dt, cfg.dx, cfg.dy, rows[0], rows[1],
                                           0, nx + 1, ny),
                      _chunks(0, ny + 1, self.n))
            self._map(lambda rows: K.yee_b(e, b, 0.5 * cfg.dt, cfg.dx, cfg.dy, rows[0], rows[1], 0, nx),
                      _chunks(0, ny, self.n))

        with _Stopwatch(state, "exchange"):
            R.exchange_ghost_fields(r, r, r, px)


def _run_global(state, n_steps, n_threads, on_step, every, energy_every):
    stepper = _GlobalStepper(state, n_threads)
    try:
        for s in range(n_steps):
            stepper.step(state.iter)
            state.iter += 1
            if energy_every and state.iter % energy_every == 0:
                _record_energy(state, state.iter, 0, 1, stepper.r)
            if on_step is not None and every and state.iter % every == 0:
                on_step(state, state.iter)
    finally:
        stepper.close()
    return state


def run_serial(state: SimState, n_steps: int, *, on_step=None, every: int = 0,
               energy_every: int = 0) -> SimState:
    """Reference backend: the stages in order over the global grid."""
    return _run_global(state, n_steps, 1, on_step, every, energy_every)


def run_parallel_for(state: SimState, n_steps: int, n_threads: int, *, on_step=None,
                     every: int = 0, energy_every: int = 0) -> SimState:
    """Particle decomposition with per-thread current copies.

    Particles are split evenly (static chunks) across threads for stages
    1-3, each thread depositing into a private full-grid copy; copies are
    summed row-striped, then rows are split across threads for the filter
    and each field sub-step, with a barrier after every stage.
    """
    if n_threads < 1:
        raise ValueError("n_threads must be >= 1")
    return _run_global(state, n_steps, n_threads, on_step, every, energy_every)


# --------------------------------------------------------------------------
# region task backends


def _res(kind: str, k: int):
    return (kind, k)


class _RegionGraph:
    """Spawns the per-region task chain of one time step."""

    def __init__(self, state: SimState, rt: TaskRuntime, kind: BackendKind):
        self.state = state
        self.rt = rt
        self.kind = kind
        regs = state.regions
        self.N = len(regs)
        self.nbr = [R.neighbours(regs, k) for k in range(self.N)]
        # per-region count of filtered steps; checked by field tasks when the
        # runtime is instrumented
        self.check = rt.instrument
        self.filtered = [0] * self.N
        self.step0 = state.iter
        self.stage_errors: list[str] = []
        if kind.commutative:
            if self.N > 1 and min(r.n_rows for r in regs) < 3:
                raise R.RegionTooThin(
                    "commutative backends need regions of at least 3 rows so that only"
                    " adjacent regions share current rows")
            cfg = state.cfg
            state.j_shared = VecGrid(cfg.nx, cfg.ny, dtype=J_DTYPE)

    # region-local bodies ------------------------------------------------

    def _advance_body(self, k: int, shift_n: int):
        state, r = self.state, self.state.regions[k]

        def body():
            if shift_n:
                with _Stopwatch(state, "window"):
                    R.shift_region_window(r, state.cfg, state.streams, shift_n)
            with _Stopwatch(state, "advance"):
                if self.kind.commutative:
                    g = state.j_shared.data
                    advance_region(state, r, g[:, r.y0:r.y0 + r.n_rows + 3, :])
                else:
                    advance_region(state, r)
        return body

    def _reduce_body(self, k: int):
        state, r = self.state, self.state.regions[k]
        lower, upper = self.nbr[k]

        def body():
            with _Stopwatch(state, "reduce"):
                R.reduce_ghost_current(r, lower, upper)
        return body

    def _filter_body(self, k: int):
        state, r = self.state, self.state.regions[k]

        def body():
            with _Stopwatch(state, "filter"):
                filter_region(state, r)
            self.filtered[k] += 1
        return body

    def _gather_filter_body(self, k: int):
        """Commutative variant: pull the region's rows out of the shared
        buffer (zeroing them for the next step), then filter."""
        state, r = self.state, self.state.regions[k]

        def body():
            with _Stopwatch(state, "filter"):
                g = state.j_shared.data
                rows = slice(G + r.y0, G + r.y0 + r.n_rows)
                r.j_local.j.data[:, G:G + r.n_rows, :] = g[:, rows, :]
                g[:, rows, :] = 0.0
                filter_region(state, r)
            self.filtered[k] += 1
        return body

    def _fold_body(self):
        state = self.state

        def body():
            with _Stopwatch(state, "reduce"):
                g = state.j_shared.data
                ny, nx = state.cfg.ny, state.cfg.nx
                cols = slice(G, G + nx)
                g[:, G + ny - 1, cols] += g[:, G - 1, cols]
                g[:, G, cols] += g[:, G + ny, cols]
                g[:, G + 1, cols] += g[:, G + ny + 1, cols]
                g[:, G - 1, :] = 0.0
                g[:, G + ny:, :] = 0.0
        return body

    def _field_body(self, k: int, step: int):
        state, r = self.state, self.state.regions[k]
        upper = self.nbr[k][1]
        ku = (k + 1) % self.N

        def body():
            if self.check and not (self.filtered[k] == self.filtered[ku] == step - self.step0 + 1):
                self.stage_errors.append(
                    f"field advance of region {k} at step {step} saw filtered counts"
                    f" {self.filtered[k]}/{self.filtered[ku]}")
            with _Stopwatch(state, "field"):
                field_region(state, r, upper)
        return body

    def _exchange_body(self, k: int):
        state, r = self.state, self.state.regions[k]
        lower, upper = self.nbr[k]

        def body():
            with _Stopwatch(state, "exchange"):
                R.exchange_ghost_fields(r, lower, upper, state.periodic_x)
        return body

    def _migrate_body(self, k: int):
        state, r = self.state, self.state.regions[k]
        lower, upper = self.nbr[k]

        def body():
            with _Stopwatch(state, "migrate"):
                R.migrate_particles(r, lower, upper)
        return body

    # clause sets ---------------------------------------------------------

    def _lo(self, k):
        return (k - 1) % self.N

    def _hi(self, k):
        return (k + 1) % self.N

    def advance_clauses(self, k):
        field_mode = InOut if self.state.cfg.moving_window else In
        cl = [InOut(_res("P", k)), InOut(_res("OLO", k)), InOut(_res("OHI", k)),
              field_mode(_res("EB", k)), field_mode(_res("EBG", k))]
        if self.kind.commutative:
            cl += [Commutative(_res("JB", k)), Commutative(_res("JB", self._hi(k)))]
        else:
            cl += [Out(_res("J", k)), Out(_res("JG", k))]
        return dedupe(cl)

    def reduce_clauses(self, k):
        return dedupe([InOut(_res("J", k)), In(_res("JG", self._lo(k))), In(_res("JG", self._hi(k)))])

    def gather_clauses(self, k):
        return dedupe([In(_res("JB", k)), In(_res("JB", self._hi(k))), InOut(_res("J", k))])

    def field_clauses(self, k):
        return dedupe([InOut(_res("EB", k)), InOut(_res("EBG", k)), In(_res("J", k)),
                       In(_res("J", self._hi(k)))])

    def exchange_clauses(self, k):
        return dedupe([InOut(_res("EBG", k)), In(_res("EB", self._lo(k))), In(_res("EB", self._hi(k)))])

    def migrate_clauses(self, k):
        return dedupe([InOut(_res("P", k)), InOut(_res("OHI", self._lo(k))),
                       InOut(_res("OLO", self._hi(k)))])

    def all_clauses(self, mode=In):
        out = []
        for k in range(self.N):
            out += [mode(_res("EB", k)), mode(_res("J", k)), mode(_res("P", k))]
        return out

    # spawning -------------------------------------------------------------

    def _shift_for(self, step: int) -> int:
        state = self.state
        if state.window_due(step):
            state.n_move += 1
            return state.n_move
        return 0

    def spawn_step(self, step: int) -> list:
        """Spawn the full dependency graph of one step; returns its handles."""
        rt, N = self.rt, self.N
        shift_n = self._shift_for(step)
        tasks = []
        for k in range(N):
            tasks.append(rt.spawn(self._advance_body(k, shift_n), self.advance_clauses(k),
                                  label=f"advance:{k}"))
        if self.kind.commutative:
            tasks.append(rt.spawn(self._fold_body(), [InOut(_res("JB", 0))], label="fold"))
            for k in range(N):
                tasks.append(rt.spawn(self._gather_filter_body(k), self.gather_clauses(k),
                                      label=f"filter:{k}"))
        else:
            for k in range(N):
                tasks.append(rt.spawn(self._reduce_body(k), self.reduce_clauses(k),
                                      label=f"reduce:{k}"))
            for k in range(N):
                tasks.append(rt.spawn(self._filter_body(k), [InOut(_res("J", k))],
                                      label=f"filter:{k}"))
        for k in range(N):
            tasks.append(rt.spawn(self._field_body(k, step), self.field_clauses(k), label=f"field:{k}"))
        for k in range(N):
            tasks.append(rt.spawn(self._exchange_body(k), self.exchange_clauses(k),
                                  label=f"exchange:{k}"))
        for k in range(N):
            tasks.append(rt.spawn(self._migrate_body(k), self.migrate_clauses(k),
                                  label=f"migrate:{k}"))
        return tasks

    def barrier_step(self, step: int) -> None:
        """``tasklike``: one dynamically scheduled loop per stage, barriers between."""
        rt, N = self.rt, self.N
        shift_n = self._shift_for(step)
        for k in range(N):
            rt.spawn(self._advance_body(k, shift_n), label=f"advance:{k}")
        rt.taskwait()
        for k in range(N):
            reduce_, filt = self._reduce_body(k), self._filter_body(k)
            rt.spawn(lambda a=reduce_, b=filt: (a(), b()), label=f"reduce+filter:{k}")
            rt.spawn(self._migrate_body(k), label=f"migrate:{k}")
        rt.taskwait()
        for k in range(N):
            rt.spawn(self._field_body(k, step), label=f"field:{k}")
        rt.taskwait()
        for k in range(N):
            rt.spawn(self._exchange_body(k), label=f"exchange:{k}")
        rt.taskwait()

    def spawn_energy(self, step: int) -> list:
        state = self.state
        out = []
        for k, r in enumerate(state.regions):
            out.append(self.rt.spawn(
                lambda k=k, r=r: _record_energy(state, step, k, self.N, r),
                [In(_res("P", k)), In(_res("EB", k))], label=f"energy:{k}"))
        return out

    def spawn_probe(self, step: int, on_step: Callable) -> object:
        state = self.state
        return self.rt.spawn(lambda: on_step(state, step), dedupe(self.all_clauses()),
                             label=f"probe:{step}")


def run_task_backend(state: SimState, n_steps: int, kind, n_workers: Optional[int] = None, *,
                     runtime: Optional[TaskRuntime] = None, lookahead: int = 4,
                     on_step=None, every: int = 0, energy_every: int = 0,
                     instrument: bool = False, trace=None) -> SimState:
    """Run ``n_steps`` with one of the region-decomposed variants.

    ``sync`` variants wait for every task at the end of each step; ``async``
    variants keep spawning and only throttle once more than ``lookahead``
    steps are in flight.  ``tasklike`` uses no clauses, only barriers.
    ``on_step(state, step)`` runs every ``every`` steps at a point where all
    regions are consistent (a task reading every region in async mode).
    """
    kind = backend_kind(kind)
    if not kind.spatial:
        raise UnknownBackend(f"{kind.value!r} is not a task backend")
    rt = runtime or TaskRuntime(n_workers, trace=trace, instrument=instrument).run_pool()
    graph = _RegionGraph(state, rt, kind)
    inflight: deque = deque()
    try:
        for _ in range(n_steps):
            step = state.iter
            if kind is BackendKind.TASKLIKE:
                graph.barrier_step(step)
            else:
                tasks = graph.spawn_step(step)
                if kind.asynchronous:
                    inflight.append(tasks)
                    if len(inflight) > lookahead:
                        rt.wait(inflight.popleft())
                else:
                    rt.taskwait()
            state.iter += 1
            done = state.iter
            if energy_every and done % energy_every == 0:
                graph.spawn_energy(done)
                if not kind.asynchronous:
                    rt.taskwait()
            if on_step is not None and every and done % every == 0:
                if kind.asynchronous:
                    graph.spawn_probe(done, on_step)
                else:
                    on_step(state, done)
        rt.taskwait()
    finally:
        if runtime is None:
            rt.shutdown()
    if graph.stage_errors:
        raise RuntimeError(graph.stage_errors[0])
    return state


def run_backend(state: SimState, n_steps: int, kind="serial", n_workers: int = 1, **kw) -> SimState:
    """Dispatch to the driver for ``kind``."""
    kind = backend_kind(kind)
    if kind is BackendKind.SERIAL:
        kw = {k: v for k, v in kw.items() if k in ("on_step", "every", "energy_every")}
        return run_serial(state, n_steps, **kw)
    if kind is BackendKind.PARALLEL_FOR:
        kw = {k: v for k, v in kw.items() if k in ("on_step", "every", "energy_every")}
        return run_parallel_for(state, n_steps, n_workers, **kw)
    return run_task_backend(state, n_steps, kind, n_workers, **kw)


def simulate(cfg: SimConfig, kind="serial", n_workers: int = 1, n_regions: Optional[int] = None,
             n_steps: Optional[int] = None, **kw) -> SimState:
    """Build a state for ``kind`` and run it (``cfg.n_steps`` by default)."""
    state = create_state(cfg, kind, n_regions)
    steps = cfg.n_steps if n_steps is None else n_steps
    return run_backend(state, steps, kind, n_workers, **kw)
