"""Row-band spatial decomposition: partition, ghost exchange, current
reduction and particle migration.

Regions form a periodic ring in y.  Each owns ``n_rows`` consecutive grid
rows plus one guard row below and two above; particle ``iy`` is local to
the owning region.  Nothing here locks: callers (backends) guarantee that
neighbour-touching operations do not overlap conflicting work.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import kernels as K
from .core import (
    GUARD_HI,
    GUARD_LO,
    CurrentDensity,
    EMFields,
    ParticleBuffer,
    SimConfig,
    ThermalStream,
    VecGrid,
    inject_uniform,
)

G = GUARD_LO
# a particle or stencil must never skip a whole region
MIN_REGION_ROWS = GUARD_HI


class RegionTooThin(ValueError):
    pass


class MigrationOverflow(RuntimeError):
    pass


class Region:
    """A band of grid rows, its fields, local current and resident particles."""

    def __init__(self, rid: int, y0: int, n_rows: int, nx: int, n_species: int):
        self.id = rid
        self.y0 = y0
        self.n_rows = n_rows
        self.nx = nx
        self.emf = EMFields(VecGrid(nx, n_rows), VecGrid(nx, n_rows))
        self.j_local = CurrentDensity.zeros(nx, n_rows)
        self.particles = [ParticleBuffer() for _ in range(n_species)]
        self.outgoing_lo = [ParticleBuffer() for _ in range(n_species)]
        self.outgoing_hi = [ParticleBuffer() for _ in range(n_species)]

    @property
    def rows(self) -> range:
        return range(self.y0, self.y0 + self.n_rows)

    def n_particles(self) -> int:
        return sum(len(p) for p in self.particles)

    def __repr__(self) -> str:
        return f"Region(id={self.id}, rows=[{self.y0}, {self.y0 + self.n_rows}), np={self.n_particles()})"


def split_rows(ny: int, n_regions: int) -> list[int]:
    """Balanced heights: the first ``ny % n`` regions get one extra row."""
    base, extra = divmod(ny, n_regions)
    return [base + 1 if k < extra else base for k in range(n_regions)]


def neighbours(regions: Sequence[Region], k: int) -> tuple[Region, Region]:
    n = len(regions)
    return regions[(k - 1) % n], regions[(k + 1) % n]


def partition(cfg: SimConfig, emf: Optional[EMFields] = None, n_regions: Optional[int] = None,
              streams: Optional[Sequence[ThermalStream]] = None) -> list[Region]:
    """Split the grid into ``n_regions`` row bands (default ``cfg.n_regions``).

    Each region receives its share of the initial plasma and a copy of the
    global fields ``emf`` (if given) with periodic-in-y guard rows.
    """
    n = cfg.n_regions if n_regions is None else n_regions
    heights = split_rows(cfg.ny, n)
    if min(heights) < MIN_REGION_ROWS and n > 1:
        raise RegionTooThin(
            f"{n} regions over {cfg.ny} rows leaves regions of {min(heights)} rows;"
            f" at least {MIN_REGION_ROWS} are required"
        )
    if cfg.ny < MIN_REGION_ROWS:
        raise RegionTooThin(f"ny={cfg.ny} is below the minimum of {MIN_REGION_ROWS} rows")
    if streams is None:
        streams = [ThermalStream(cfg.seed, k) for k in range(len(cfg.species))]
    regions = []
    y0 = 0
    for k, h in enumerate(heights):
        r = Region(k, y0, h, cfg.nx, len(cfg.species))
        for s, sp in enumerate(cfg.species):
            r.particles[s].append(inject_uniform(sp, cfg, streams[s], rows=(y0, y0 + h)))
        regions.append(r)
        y0 += h
    if emf is not None:
        periodic_x = not cfg.moving_window
        for r in regions:
            for src, dst in ((emf.e, r.emf.e), (emf.b, r.emf.b)):
                rows = (np.arange(-G, r.n_rows + GUARD_HI) + r.y0) % cfg.ny + G
                dst.data[:, :, G:G + cfg.nx] = src.data[:, rows, G:G + cfg.nx]
                K.fill_x_guards(dst.data, cfg.nx, periodic_x, 0, dst.data.shape[1])
    return regions


def migrate_particles(r: Region, lower: Region, upper: Region) -> int:
    """Move particles that left ``lower`` upwards or ``upper`` downwards into ``r``.

    Each staging buffer has exactly one consumer (the region on that side),
    so the consumed buffers are emptied here.  Returns the number received.
    """
    received = 0
    for s in range(len(r.particles)):
        up = lower.outgoing_hi[s]
        if up.n:
            arr = up.active
            if np.any(arr["iy"] != lower.n_rows):
                raise MigrationOverflow(
                    f"particle left region {lower.id} by more than one row")
            arr["iy"] -= lower.n_rows
            r.particles[s].append(arr)
            received += up.n
            up.clear()
        down = upper.outgoing_lo[s]
        if down.n:
            arr = down.active
            if np.any(arr["iy"] != -1):
                raise MigrationOverflow(
                    f"particle left region {upper.id} by more than one row")
            arr["iy"] += r.n_rows
            r.particles[s].append(arr)
            received += down.n
            down.clear()
    return received


def reduce_ghost_current(r: Region, lower: Region, upper: Region) -> None:
    """Add the neighbours' guard-row deposits onto ``r``'s boundary rows.

    ``lower``'s two high guard rows overlap ``r``'s rows 0 and 1; ``upper``'s
    low guard row overlaps ``r``'s last row.  The x guards of those rows must
    already be folded by their owner.
    """
    j = r.j_local.j.data
    nl = lower.n_rows
    K.add_rows(j, G, lower.j_local.j.data, G + nl, r.nx)
    K.add_rows(j, G + 1, lower.j_local.j.data, G + nl + 1, r.nx)
    K.add_rows(j, G + r.n_rows - 1, upper.j_local.j.data, G - 1, r.nx)


def exchange_ghost_fields(r: Region, lower: Region, upper: Region, periodic_x: bool = True) -> None:
    """Refresh ``r``'s guard rows of E and B from the neighbours' interiors.

    Only interior columns are read from the neighbours; x guards are then
    rebuilt locally (periodic copy, or zero for an open/moving window).
    """
    nx = r.nx
    cols = slice(G, G + nx)
    n = r.n_rows
    for mine, low, up in ((r.emf.e, lower.emf.e, upper.emf.e),
                          (r.emf.b, lower.emf.b, upper.emf.b)):
        d = mine.data
        d[:, G - 1, cols] = low.data[:, G + lower.n_rows - 1, cols]
        d[:, G + n, cols] = up.data[:, G, cols]
        d[:, G + n + 1, cols] = up.data[:, G + 1, cols]
        K.fill_x_guards(d, nx, periodic_x, 0, d.shape[1])


def shift_region_window(r: Region, cfg: SimConfig, streams: Sequence[ThermalStream],
                        n_move: int) -> None:
    """One-cell moving-window shift of a region's fields and particles.

    ``n_move`` is the shift count including this one; it labels the fresh
    column for the counter-based thermal sampler.
    """
    K.shift_fields_left(r.emf.e.data)
    K.shift_fields_left(r.emf.b.data)
    for s, sp in enumerate(cfg.species):
        buf = r.particles[s]
        act = buf.active
        act["ix"] -= 1
        buf.n = K.compact_open_x(buf.data, buf.n, r.nx)
        fresh = streams[s].sample(sp, r.nx - 1, r.nx, 0, r.n_rows,
                                  abs_x0=n_move, abs_y0=r.y0)
        buf.append(fresh)


def total_particles(regions: Sequence[Region]) -> int:
    return sum(r.n_particles() for r in regions)
