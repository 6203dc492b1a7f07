"""The four PIC stages as numba kernels, plus current filtering and window shift.

Kernels operate on raw arrays laid out like ``VecGrid.data``: shape
``(3, rows + 3, nx + 3)`` with one low and two high guard cells per axis, so
local cell ``(i, j)`` is at ``[:, j + 1, i + 1]``.  Every kernel releases the
GIL and only touches the buffers passed to it.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numba
import numpy as np

from .core import GUARD_LO, PARTICLE_DTYPE, CurrentDensity, EMFields, FilterSpec

G = GUARD_LO
# largest float32 strictly below 1
_ONE_MINUS = np.float32(np.nextafter(np.float32(1.0), np.float32(0.0)))

njit = numba.njit(cache=True, nogil=True)
njit_inline = numba.njit(cache=True, nogil=True, inline="always")


class InterpolatedField(NamedTuple):
    ep: tuple
    bp: tuple


# --------------------------------------------------------------------------
# stage 1: field interpolation


@njit_inline
def _interp(e, b, ix, iy, x, y):
    i = ix + G
    j = iy + G
    if x < 0.5:
        ih = i - 1
        w1h = x + 0.5
    else:
        ih = i
        w1h = x - 0.5
    if y < 0.5:
        jh = j - 1
        w2h = y + 0.5
    else:
        jh = j
        w2h = y - 0.5
    w1 = x
    w2 = y

    ex = ((e[0, j, ih] * (1 - w1h) + e[0, j, ih + 1] * w1h) * (1 - w2)
          + (e[0, j + 1, ih] * (1 - w1h) + e[0, j + 1, ih + 1] * w1h) * w2)
    ey = ((e[1, jh, i] * (1 - w1) + e[1, jh, i + 1] * w1) * (1 - w2h)
          + (e[1, jh + 1, i] * (1 - w1) + e[1, jh + 1, i + 1] * w1) * w2h)
    ez = ((e[2, j, i] * (1 - w1) + e[2, j, i + 1] * w1) * (1 - w2)
          + (e[2, j + 1, i] * (1 - w1) + e[2, j + 1, i + 1] * w1) * w2)

    bx = ((b[0, jh, i] * (1 - w1) + b[0, jh, i + 1] * w1) * (1 - w2h)
          + (b[0, jh + 1, i] * (1 - w1) + b[0, jh + 1, i + 1] * w1) * w2h)
    by = ((b[1, j, ih] * (1 - w1h) + b[1, j, ih + 1] * w1h) * (1 - w2)
          + (b[1, j + 1, ih] * (1 - w1h) + b[1, j + 1, ih + 1] * w1h) * w2)
    bz = ((b[2, jh, ih] * (1 - w1h) + b[2, jh, ih + 1] * w1h) * (1 - w2h)
          + (b[2, jh + 1, ih] * (1 - w1h) + b[2, jh + 1, ih + 1] * w1h) * w2h)
    return ex, ey, ez, bx, by, bz


@njit
def _interp_one(e, b, ix, iy, x, y):
    return _interp(e, b, ix, iy, np.float64(x), np.float64(y))


def interpolate_emf(emf: EMFields, p) -> InterpolatedField:
    """Bilinear E and B at particle ``p`` honouring each Yee offset."""
    ex, ey, ez, bx, by, bz = _interp_one(emf.e.data, emf.b.data, int(p["ix"]), int(p["iy"]),
                                         float(p["x"]), float(p["y"]))
    return InterpolatedField((ex, ey, ez), (bx, by, bz))


# --------------------------------------------------------------------------
# stage 2: Boris push


@njit_inline
def _boris(ux, uy, uz, ex, ey, ez, bx, by, bz, tem):
    """Half E kick, magnetic rotation, half E kick.  ``tem = dt / (2 m_q)``."""
    ex *= tem
    ey *= tem
    ez *= tem
    utx = ux + ex
    uty = uy + ey
    utz = uz + ez
    gtem = tem / math.sqrt(1.0 + utx * utx + uty * uty + utz * utz)
    bx *= gtem
    by *= gtem
    bz *= gtem
    otsq = 2.0 / (1.0 + bx * bx + by * by + bz * bz)
    ux1 = utx + uty * bz - utz * by
    uy1 = uty + utz * bx - utx * bz
    uz1 = utz + utx * by - uty * bx
    bx *= otsq
    by *= otsq
    bz *= otsq
    utx += uy1 * bz - uz1 * by
    uty += uz1 * bx - ux1 * bz
    utz += ux1 * by - uy1 * bx
    return utx + ex, uty + ey, utz + ez


@njit_inline
def _renorm(x):
    """Split a position in (-1, 2) into a cell shift in {-1,0,1} and offset in [0,1)."""
    if x < 0.0:
        d = -1
    elif x >= 1.0:
        d = 1
    else:
        d = 0
    return d, x - d


@njit_inline
def _store_offset(x):
    xf = np.float32(x)
    if xf >= 1.0:
        xf = _ONE_MINUS
    elif xf < 0.0:
        xf = np.float32(0.0)
    return xf


@njit
def _boris_one(ux, uy, uz, ex, ey, ez, bx, by, bz, m_q, dt):
    return _boris(np.float64(ux), np.float64(uy), np.float64(uz),
                  np.float64(ex), np.float64(ey), np.float64(ez),
                  np.float64(bx), np.float64(by), np.float64(bz), 0.5 * dt / m_q)


def boris_advance(p, f: InterpolatedField, m_q: float, dt: float, dx: float = 1.0,
                  dy: float = 1.0):
    """Advance one particle record (momentum then position); returns a new record."""
    ux, uy, uz = _boris_one(float(p["ux"]), float(p["uy"]), float(p["uz"]),
                            *map(float, f.ep), *map(float, f.bp), m_q, dt)
    out = np.array(p, dtype=PARTICLE_DTYPE).copy()
    rg = 1.0 / math.sqrt(1.0 + ux * ux + uy * uy + uz * uz)
    x1 = float(p["x"]) + ux * rg * dt / dx
    y1 = float(p["y"]) + uy * rg * dt / dy
    di, x1 = _renorm(x1)
    dj, y1 = _renorm(y1)
    out["ix"] = int(p["ix"]) + di
    out["iy"] = int(p["iy"]) + dj
    out["x"] = _store_offset(x1)
    out["y"] = _store_offset(y1)
    out["ux"], out["uy"], out["uz"] = ux, uy, uz
    return out


# --------------------------------------------------------------------------
# stage 3: charge-conserving current deposit


@njit_inline
def _dep_segment(j, cx, cy, xa, ya, xb, yb, qnx, qny, qvz):
    """Deposit one straight sub-segment lying inside cell (cx, cy).

    jx/jy use linear weights at the segment mid-point, which is exactly what
    the bilinear charge change requires; jz is q*vz scaled by the fraction of
    the step (``qvz`` already carries it) at the same mid-point.
    """
    i = cx + G
    k = cy + G
    wx = qnx * (xb - xa)
    wy = qny * (yb - ya)
    xm = 0.5 * (xa + xb)
    ym = 0.5 * (ya + yb)
    j[0, k, i] += wx * (1.0 - ym)
    j[0, k + 1, i] += wx * ym
    j[1, k, i] += wy * (1.0 - xm)
    j[1, k, i + 1] += wy * xm
    j[2, k, i] += qvz * (1.0 - xm) * (1.0 - ym)
    j[2, k, i + 1] += qvz * xm * (1.0 - ym)
    j[2, k + 1, i] += qvz * (1.0 - xm) * ym
    j[2, k + 1, i + 1] += qvz * xm * ym


@njit_inline
def _deposit(j, ix, iy, x0, y0, dxc, dyc, qnx, qny, qvz):
    """Split the move from (x0,y0) by (dxc,dyc) at cell edges (at most 3 parts)."""
    x1 = x0 + dxc
    y1 = y0 + dyc
    di = -1 if x1 < 0.0 else (1 if x1 >= 1.0 else 0)
    dj = -1 if y1 < 0.0 else (1 if y1 >= 1.0 else 0)
    if di == 0 and dj == 0:
        _dep_segment(j, ix, iy, x0, y0, x1, y1, qnx, qny, qvz)
    elif dj == 0:
        xb = 1.0 if di == 1 else 0.0
        f = (xb - x0) / dxc
        yb = y0 + f * dyc
        _dep_segment(j, ix, iy, x0, y0, xb, yb, qnx, qny, qvz * f)
        _dep_segment(j, ix + di, iy, xb - di, yb, x1 - di, y1, qnx, qny, qvz * (1.0 - f))
    elif di == 0:
        yb = 1.0 if dj == 1 else 0.0
        f = (yb - y0) / dyc
        xb = x0 + f * dxc
        _dep_segment(j, ix, iy, x0, y0, xb, yb, qnx, qny, qvz * f)
        _dep_segment(j, ix, iy + dj, xb, yb - dj, x1, y1 - dj, qnx, qny, qvz * (1.0 - f))
    else:
        xb = 1.0 if di == 1 else 0.0
        yb = 1.0 if dj == 1 else 0.0
        fx = (xb - x0) / dxc
        fy = (yb - y0) / dyc
        if fx < fy:
            # x edge first
            ym = y0 + fx * dyc
            xm = x0 + fy * dxc
            _dep_segment(j, ix, iy, x0, y0, xb, ym, qnx, qny, qvz * fx)
            _dep_segment(j, ix + di, iy, xb - di, ym, xm - di, yb, qnx, qny, qvz * (fy - fx))
            _dep_segment(j, ix + di, iy + dj, xm - di, yb - dj, x1 - di, y1 - dj,
                         qnx, qny, qvz * (1.0 - fy))
        else:
            xm = x0 + fy * dxc
            ym = y0 + fx * dyc
            _dep_segment(j, ix, iy, x0, y0, xm, yb, qnx, qny, qvz * fy)
            _dep_segment(j, ix, iy + dj, xm, yb - dj, xb, ym - dj, qnx, qny, qvz * (fx - fy))
            _dep_segment(j, ix + di, iy + dj, xb - di, ym - dj, x1 - di, y1 - dj,
                         qnx, qny, qvz * (1.0 - fx))


@njit
def _deposit_one(j, ix, iy, x0, y0, x1, y1, qnx, qny, qvz):
    _deposit(j, ix, iy, x0, y0, x1 - x0, y1 - y0, qnx, qny, qvz)


def deposit_current(p_old, p_new, q: float, j: CurrentDensity, dt: float,
                    dx: float = 1.0, dy: float = 1.0) -> None:
    """Accumulate the current of one particle moving from ``p_old`` to ``p_new``.

    ``p_new`` may be in a neighbour cell; positions are compared in the old
    cell's frame.  jz uses the new momentum.
    """
    x1 = float(p_new["x"]) + (int(p_new["ix"]) - int(p_old["ix"]))
    y1 = float(p_new["y"]) + (int(p_new["iy"]) - int(p_old["iy"]))
    ux, uy, uz = float(p_new["ux"]), float(p_new["uy"]), float(p_new["uz"])
    vz = uz / math.sqrt(1.0 + ux * ux + uy * uy + uz * uz)
    _deposit_one(j.j.data, int(p_old["ix"]), int(p_old["iy"]), float(p_old["x"]),
                 float(p_old["y"]), x1, y1, q * dx / dt, q * dy / dt, q * vz)


# --------------------------------------------------------------------------
# stages 1-3 fused over a particle buffer


@njit_inline
def _advance_one(parts, k, e, b, j, tem, dtdx, dtdy, qnx, qny, q, nx, wrap_x):
    p = parts[k]
    x0 = np.float64(p.x)
    y0 = np.float64(p.y)
    ex, ey, ez, bx, by, bz = _interp(e, b, p.ix, p.iy, x0, y0)
    ux, uy, uz = _boris(np.float64(p.ux), np.float64(p.uy), np.float64(p.uz),
                        ex, ey, ez, bx, by, bz, tem)
    rg = 1.0 / math.sqrt(1.0 + ux * ux + uy * uy + uz * uz)
    dxc = dtdx * rg * ux
    dyc = dtdy * rg * uy
    _deposit(j, p.ix, p.iy, x0, y0, dxc, dyc, qnx, qny, q * uz * rg)
    di, x1 = _renorm(x0 + dxc)
    dj, y1 = _renorm(y0 + dyc)
    p.ux = ux
    p.uy = uy
    p.uz = uz
    p.x = _store_offset(x1)
    p.y = _store_offset(y1)
    ix = p.ix + di
    if wrap_x:
        if ix < 0:
            ix += nx
        elif ix >= nx:
            ix -= nx
    p.ix = ix
    p.iy = p.iy + dj


@njit
def advance_range(parts, start, stop, e, b, j, q, m_q, dt, dx, dy, nx, n_rows, wrap_x):
    """Interpolate, push and deposit particles ``[start, stop)`` in place.

    Rows wrap periodically over ``n_rows`` (a single region spanning the
    whole grid).  With ``wrap_x`` false, particles leaving ``[0, nx)`` keep
    their out-of-range ``ix`` and must be removed by :func:`compact_open_x`.
    """
    tem = 0.5 * dt / m_q
    dtdx = dt / dx
    dtdy = dt / dy
    qnx = q * dx / dt
    qny = q * dy / dt
    for k in range(start, stop):
        _advance_one(parts, k, e, b, j, tem, dtdx, dtdy, qnx, qny, q, nx, wrap_x)
        p = parts[k]
        if p.iy < 0:
            p.iy += n_rows
        elif p.iy >= n_rows:
            p.iy -= n_rows


@njit
def advance_extract(parts, n, e, b, j, q, m_q, dt, dx, dy, nx, n_rows, wrap_x,
                    out_lo, out_hi):
    """Advance ``parts[:n]`` of one region, moving row-leavers to staging buffers.

    A particle that ends below row 0 goes to ``out_lo``, above the last row
    to ``out_hi``; its slot is refilled from the tail and processed next, so
    every particle is visited once.  Open-x leavers are discarded.
    Returns ``(n_remaining, n_lo, n_hi)``.
    """
    tem = 0.5 * dt / m_q
    dtdx = dt / dx
    dtdy = dt / dy
    qnx = q * dx / dt
    qny = q * dy / dt
    n_lo = 0
    n_hi = 0
    k = 0
    while k < n:
        _advance_one(parts, k, e, b, j, tem, dtdx, dtdy, qnx, qny, q, nx, wrap_x)
        p = parts[k]
        if p.ix < 0 or p.ix >= nx:
            pass
        elif p.iy < 0:
            out_lo[n_lo] = parts[k]
            n_lo += 1
        elif p.iy >= n_rows:
            out_hi[n_hi] = parts[k]
            n_hi += 1
        else:
            k += 1
            continue
        n -= 1
        parts[k] = parts[n]
    return n, n_lo, n_hi


@njit
def compact_open_x(parts, n, nx):
    """Drop particles with ``ix`` outside ``[0, nx)``, preserving order."""
    m = 0
    for k in range(n):
        if parts[k].ix >= 0 and parts[k].ix < nx:
            if m != k:
                parts[m] = parts[k]
            m += 1
    return m


@njit
def kinetic_energy(parts, n):
    """Sum of (gamma - 1) over particles, evaluated as u^2 / (gamma + 1)."""
    s = 0.0
    for k in range(n):
        p = parts[k]
        u2 = np.float64(p.ux) ** 2 + np.float64(p.uy) ** 2 + np.float64(p.uz) ** 2
        s += u2 / (math.sqrt(1.0 + u2) + 1.0)
    return s


@njit
def deposit_charge(rho, parts, n, q):
    """Bilinear charge at grid nodes into a (rows+3, nx+3) array."""
    for k in range(n):
        p = parts[k]
        i = p.ix + G
        jj = p.iy + G
        x = np.float64(p.x)
        y = np.float64(p.y)
        rho[jj, i] += q * (1 - x) * (1 - y)
        rho[jj, i + 1] += q * x * (1 - y)
        rho[jj + 1, i] += q * (1 - x) * y
        rho[jj + 1, i + 1] += q * x * y


# --------------------------------------------------------------------------
# guard-cell bookkeeping


@njit
def fold_x_guards(a, nx, periodic, row0, row1):
    """Add x-guard columns of rows ``[row0, row1)`` onto their periodic images.

    Guards are zeroed afterwards.  With ``periodic`` false the guard
    contributions are simply discarded (open boundary).
    """
    for c in range(a.shape[0]):
        for r in range(row0, row1):
            if periodic:
                a[c, r, G + nx - 1] += a[c, r, G - 1]
                a[c, r, G] += a[c, r, G + nx]
                a[c, r, G + 1] += a[c, r, G + nx + 1]
            a[c, r, G - 1] = 0.0
            a[c, r, G + nx] = 0.0
            a[c, r, G + nx + 1] = 0.0


@njit
def fill_x_guards(a, nx, periodic, row0, row1):
    """Copy periodic images into x-guard columns (zero them when open)."""
    for c in range(a.shape[0]):
        for r in range(row0, row1):
            if periodic:
                a[c, r, G - 1] = a[c, r, G + nx - 1]
                a[c, r, G + nx] = a[c, r, G]
                a[c, r, G + nx + 1] = a[c, r, G + 1]
            else:
                a[c, r, G - 1] = 0.0
                a[c, r, G + nx] = 0.0
                a[c, r, G + nx + 1] = 0.0


@njit
def add_rows(dst, dst_row, src, src_row, nx):
    """``dst[:, dst_row] += src[:, src_row]`` over interior columns."""
    for c in range(dst.shape[0]):
        for i in range(G, G + nx):
            dst[c, dst_row, i] += src[c, src_row, i]


@njit
def sum_into(dst, src, row0, row1):
    """``dst += src`` for array rows ``[row0, row1)``."""
    for c in range(dst.shape[0]):
        for r in range(row0, row1):
            for i in range(dst.shape[2]):
                dst[c, r, i] += src[c, r, i]


# --------------------------------------------------------------------------
# current filter


# Binomial (1/4, 1/2, 1/4) has transfer cos^2(k/2) = 1 - k^2/4 + O(k^4); n
# passes give 1 - n k^2/4.  The compensator (s, c, s) with s = -n/4 and
# c = 1 + n/2 sums to 1 and has transfer 1 + n k^2/4 + O(k^4), so the
# product is flat to second order at k = 0.
def compensator_weights(n_passes: int) -> tuple[float, float]:
    return -n_passes / 4.0, 1.0 + n_passes / 2.0


@njit
def _filter_rows(a, nx, row0, row1, side, center, periodic, tmp):
    for c in range(a.shape[0]):
        for r in range(row0, row1):
            for i in range(nx):
                tmp[i + 1] = a[c, r, G + i]
            if periodic:
                tmp[0] = tmp[nx]
                tmp[nx + 1] = tmp[1]
            else:
                tmp[0] = 0.0
                tmp[nx + 1] = 0.0
            for i in range(nx):
                a[c, r, G + i] = side * tmp[i] + center * tmp[i + 1] + side * tmp[i + 2]


def filter_rows(a, nx, row0, row1, spec: FilterSpec, periodic=True):
    """Filter array rows ``[row0, row1)`` along x in place."""
    if spec.kind == "none":
        return
    tmp = np.zeros(nx + 2, dtype=np.float64)
    for _ in range(spec.n_passes):
        _filter_rows(a, nx, row0, row1, 0.25, 0.5, periodic, tmp)
    if spec.kind == "compensated":
        side, center = compensator_weights(spec.n_passes)
        _filter_rows(a, nx, row0, row1, side, center, periodic, tmp)


def filter_current(j: CurrentDensity, spec: FilterSpec, periodic: bool = True) -> None:
    """Smooth every current component along x over the interior rows."""
    g = j.j
    filter_rows(g.data, g.nx, g.gy_lo, g.gy_lo + g.ny, spec, periodic)


# --------------------------------------------------------------------------
# stage 4: Yee field advance


@njit
def yee_b(e, b, dt, dx, dy, row0, row1, col0, col1):
    """B -= dt * curl E over local rows/cols [row0,row1) x [col0,col1)."""
    dtdx = dt / dx
    dtdy = dt / dy
    for jl in range(row0, row1):
        r = jl + G
        for il in range(col0, col1):
            c = il + G
            b[0, r, c] += -dtdy * (e[2, r + 1, c] - e[2, r, c])
            b[1, r, c] += dtdx * (e[2, r, c + 1] - e[2, r, c])
            b[2, r, c] += (-dtdx * (e[1, r, c + 1] - e[1, r, c])
                           + dtdy * (e[0, r + 1, c] - e[0, r, c]))


@njit
def yee_e(e, b, j, j_next, dt, dx, dy, row0, row1, col0, col1, n_rows):
    """E += dt * (curl B - J); local row ``n_rows`` takes J from ``j_next``."""
    dtdx = dt / dx
    dtdy = dt / dy
    for jl in range(row0, row1):
        r = jl + G
        for il in range(col0, col1):
            c = il + G
            if jl == n_rows:
                jx = j_next[0, c]
                jy = j_next[1, c]
                jz = j_next[2, c]
            else:
                jx = j[0, r, c]
                jy = j[1, r, c]
                jz = j[2, r, c]
            e[0, r, c] += dtdy * (b[2, r, c] - b[2, r - 1, c]) - dt * jx
            e[1, r, c] += -dtdx * (b[2, r, c] - b[2, r, c - 1]) - dt * jy
            e[2, r, c] += (dtdx * (b[1, r, c] - b[1, r, c - 1])
                           - dtdy * (b[0, r, c] - b[0, r - 1, c]) - dt * jz)


def yee_advance_arrays(e, b, j, j_next, dt, dx, dy, n_rows, nx):
    """Leapfrog B(dt/2), E(dt), B(dt/2) over one region's arrays.

    Guards must hold valid copies on entry.  The first half step also covers
    the guard ring and E covers one extra high row/column, so the interior
    ends up exact without exchanging guards mid-step; guard cells are left
    stale.  ``j_next`` is the current row just above the region (its
    ``[:, row]`` slice with x guards filled).
    """
    yee_b(e, b, 0.5 * dt, dx, dy, -1, n_rows + 1, -1, nx + 1)
    yee_e(e, b, j, j_next, dt, dx, dy, 0, n_rows + 1, 0, nx + 1, n_rows)
    yee_b(e, b, 0.5 * dt, dx, dy, 0, n_rows, 0, nx)


def yee_advance(emf: EMFields, j: CurrentDensity, dt: float, dx: float, dy: float,
                j_next=None) -> None:
    """Advance a whole-grid (single region) EMFields by one step.

    With ``j_next`` unset the grid is treated as periodic in y, i.e. the row
    above the top is row 0.
    """
    n_rows = emf.e.ny
    if j_next is None:
        j_next = j.j.data[:, G, :]
    yee_advance_arrays(emf.e.data, emf.b.data, j.j.data, j_next, dt, dx, dy, n_rows, emf.e.nx)


def shift_fields_left(a) -> None:
    """Shift a grid array one cell towards -x; zero fill at the +x side."""
    a[:, :, :-1] = a[:, :, 1:]
    nx = a.shape[2] - 3
    a[:, :, G + nx - 1 :] = 0.0
