"""Domain types, configuration and scenario construction.

All quantities use normalized units: time in 1/wp, length in c/wp,
momentum in m*c and c = 1.  Field and particle storage is single precision.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numba
import numpy as np

# Guard cells per side for every field grid: stencils reach one cell below
# and two cells above the owner cell.
GUARD_LO = 1
GUARD_HI = 2
J_DTYPE = np.float64

PARTICLE_DTYPE = np.dtype(
    [
        ("ix", np.int32),
        ("iy", np.int32),
        ("x", np.float32),
        ("y", np.float32),
        ("ux", np.float32),
        ("uy", np.float32),
        ("uz", np.float32),
    ]
)


class ConfigError(ValueError):
    """Invalid simulation configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class CflViolation(ConfigError):
    pass


class EmptyGrid(ConfigError):
    pass


class RegionCountExceedsRows(ConfigError):
    pass


class UnknownConfigKey(ConfigError):
    pass


class LaserWiderThanBox(ValueError):
    pass


@dataclass
class FilterSpec:
    kind: str = "none"  # none | binomial | compensated
    n_passes: int = 1


@dataclass
class SpeciesSpec:
    name: str
    m_q: float
    ppc_x: int = 2
    ppc_y: int = 2
    u_fl: tuple = (0.0, 0.0, 0.0)
    u_th: tuple = (0.0, 0.0, 0.0)
    density: float = 1.0

    @property
    def ppc(self) -> int:
        return self.ppc_x * self.ppc_y

    @property
    def q(self) -> float:
        """Macro-particle charge so that the species density is ``density``."""
        return math.copysign(1.0, self.m_q) * self.density / self.ppc


@dataclass
class LaserSpec:
    """Plane-wave laser pulse with a sin^2 longitudinal envelope.

    If ``fwhm`` is given it overrides ``rise``/``flat``/``fall`` with
    ``rise = fall = fwhm`` and ``flat = 0``.
    """

    a0: float
    omega0: float
    start_x: float
    fwhm: Optional[float] = None
    rise: float = 0.0
    flat: float = 0.0
    fall: float = 0.0
    polarization: float = 0.0

    def lengths(self) -> tuple[float, float, float]:
        if self.fwhm is not None:
            return self.fwhm, 0.0, self.fwhm
        return self.rise, self.flat, self.fall

    def envelope(self, x):
        """Longitudinal envelope evaluated at positions ``x`` (vectorized)."""
        rise, flat, fall = self.lengths()
        x = np.asarray(x, dtype=np.float64)
        env = np.zeros_like(x)
        start = self.start_x
        m = (x <= start) & (x > start - rise)
        env[m] = np.sin(0.5 * np.pi * (start - x[m]) / rise) ** 2
        m = (x <= start - rise) & (x > start - rise - flat)
        env[m] = 1.0
        tail = start - rise - flat - fall
        m = (x <= start - rise - flat) & (x > tail)
        env[m] = np.sin(0.5 * np.pi * (x[m] - tail) / fall) ** 2
        return env


@dataclass
class SimConfig:
    nx: int
    ny: int
    box_x: float
    box_y: float
    dt: float
    n_steps: int = 0
    n_regions: int = 1
    seed: int = 0
    filter: FilterSpec = field(default_factory=FilterSpec)
    moving_window: bool = False
    species: list = field(default_factory=list)
    laser: Optional[LaserSpec] = None

    @property
    def dx(self) -> float:
        return self.box_x / self.nx

    @property
    def dy(self) -> float:
        return self.box_y / self.ny

    def cfl_limit(self) -> float:
        return 1.0 / math.sqrt(1.0 / self.dx**2 + 1.0 / self.dy**2)

    def replace(self, **changes) -> "SimConfig":
        data = config_to_dict(self)
        data.update(changes)
        return config_from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        return config_from_dict(data)

    def to_dict(self) -> dict:
        return config_to_dict(self)


def _check_keys(data: dict, cls, where: str) -> None:
    allowed = {f.name for f in fields(cls)}
    for key in data:
        if key not in allowed:
            raise UnknownConfigKey(f"{where}{key}", "unknown key")


def config_from_dict(data: dict) -> SimConfig:
    """Build a SimConfig from a JSON-style mapping; unknown keys are rejected."""
    _check_keys(data, SimConfig, "")
    data = dict(data)
    flt = data.get("filter") or {}
    if isinstance(flt, dict):
        _check_keys(flt, FilterSpec, "filter.")
        data["filter"] = FilterSpec(**flt)
    species = []
    for i, sp in enumerate(data.get("species", [])):
        if isinstance(sp, SpeciesSpec):
            species.append(sp)
            continue
        _check_keys(sp, SpeciesSpec, f"species[{i}].")
        sp = dict(sp)
        for key in ("u_fl", "u_th"):
            if key in sp:
                sp[key] = tuple(float(v) for v in sp[key])
        species.append(SpeciesSpec(**sp))
    data["species"] = species
    laser = data.get("laser")
    if isinstance(laser, dict):
        _check_keys(laser, LaserSpec, "laser.")
        data["laser"] = LaserSpec(**laser)
    return SimConfig(**data)


def config_to_dict(cfg: SimConfig) -> dict:
    data = asdict(cfg)
    for sp in data["species"]:
        sp["u_fl"] = list(sp["u_fl"])
        sp["u_th"] = list(sp["u_th"])
    return data


def load_config(path) -> SimConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: SimConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")


def validate_config(cfg: SimConfig) -> SimConfig:
    if cfg.nx < 1:
        raise EmptyGrid("nx", f"must be >= 1, got {cfg.nx}")
    if cfg.ny < 1:
        raise EmptyGrid("ny", f"must be >= 1, got {cfg.ny}")
    if not cfg.box_x > 0 or not cfg.box_y > 0:
        raise EmptyGrid("box_x" if not cfg.box_x > 0 else "box_y", "box size must be > 0")
    if not cfg.dt > 0:
        raise CflViolation("dt", f"must be > 0, got {cfg.dt}")
    limit = cfg.cfl_limit()
    if cfg.dt >= limit:
        raise CflViolation("dt", f"{cfg.dt} violates the Courant limit {limit:.6g}")
    if cfg.n_steps < 0:
        raise ConfigError("n_steps", "must be >= 0")
    if cfg.n_regions < 1:
        raise ConfigError("n_regions", "must be >= 1")
    if cfg.n_regions > cfg.ny:
        raise RegionCountExceedsRows(
            "n_regions", f"{cfg.n_regions} regions cannot share {cfg.ny} rows"
        )
    if cfg.filter.kind not in ("none", "binomial", "compensated"):
        raise ConfigError("filter.kind", f"unknown filter {cfg.filter.kind!r}")
    if cfg.filter.kind != "none" and cfg.filter.n_passes < 1:
        raise ConfigError("filter.n_passes", "must be >= 1")
    for i, sp in enumerate(cfg.species):
        if sp.ppc_x < 1 or sp.ppc_y < 1:
            raise ConfigError(f"species[{i}].ppc", "particles per cell must be >= 1")
        if len(sp.u_fl) != 3 or len(sp.u_th) != 3:
            raise ConfigError(f"species[{i}]", "u_fl and u_th need three components")
        if any(u < 0 for u in sp.u_th):
            raise ConfigError(f"species[{i}].u_th", "thermal spread must be >= 0")
        if sp.m_q == 0:
            raise ConfigError(f"species[{i}].m_q", "must be nonzero")
    if cfg.laser is not None:
        if not cfg.laser.a0 > 0:
            raise ConfigError("laser.a0", "must be > 0")
        if not cfg.laser.omega0 > 0:
            raise ConfigError("laser.omega0", "must be > 0")
    return cfg


# --------------------------------------------------------------------------
# grids


class VecGrid:
    """Three-component single-precision grid with guard cells.

    ``data`` has shape ``(3, gy_lo + ny + gy_hi, gx_lo + nx + gx_hi)``;
    interior cell ``(i, j)`` lives at ``data[:, j + gy_lo, i + gx_lo]``.
    """

    def __init__(self, nx, ny, gx=(GUARD_LO, GUARD_HI), gy=(GUARD_LO, GUARD_HI), data=None,
                 dtype=np.float32):
        self.nx, self.ny = nx, ny
        self.gx_lo, self.gx_hi = gx
        self.gy_lo, self.gy_hi = gy
        shape = (3, self.gy_lo + ny + self.gy_hi, self.gx_lo + nx + self.gx_hi)
        if data is None:
            data = np.zeros(shape, dtype=dtype)
        elif data.shape != shape:
            raise ValueError(f"data shape {data.shape} != {shape}")
        self.data = data

    @property
    def x(self):
        return self.data[0]

    @property
    def y(self):
        return self.data[1]

    @property
    def z(self):
        return self.data[2]

    def interior(self, comp=None):
        sl = (
            slice(self.gy_lo, self.gy_lo + self.ny),
            slice(self.gx_lo, self.gx_lo + self.nx),
        )
        if comp is None:
            return self.data[(slice(None),) + sl]
        return self.data[(comp,) + sl]

    def zero(self):
        self.data[...] = 0.0

    def copy(self) -> "VecGrid":
        return VecGrid(self.nx, self.ny, (self.gx_lo, self.gx_hi),
                       (self.gy_lo, self.gy_hi), self.data.copy(), self.data.dtype)


@dataclass
class EMFields:
    """E and B on a Yee mesh (cell units, cell (i,j) spans [i,i+1)x[j,j+1)).

    Ex (i+1/2, j)   Ey (i, j+1/2)   Ez (i, j)
    Bx (i, j+1/2)   By (i+1/2, j)   Bz (i+1/2, j+1/2)
    """

    e: VecGrid
    b: VecGrid

    @classmethod
    def zeros(cls, nx, ny) -> "EMFields":
        return cls(VecGrid(nx, ny), VecGrid(nx, ny))


@dataclass
class CurrentDensity:
    """Deposited current.  Accumulated in double precision so the result
    does not depend on the order particles are deposited in."""

    j: VecGrid

    @classmethod
    def zeros(cls, nx, ny) -> "CurrentDensity":
        return cls(VecGrid(nx, ny, dtype=J_DTYPE))


# --------------------------------------------------------------------------
# particles


class ParticleBuffer:
    """Growable array of particle records; ``active`` is the live prefix."""

    def __init__(self, capacity: int = 0):
        self.data = np.zeros(max(capacity, 16), dtype=PARTICLE_DTYPE)
        self.n = 0

    @classmethod
    def from_array(cls, arr) -> "ParticleBuffer":
        buf = cls(len(arr))
        buf.append(arr)
        return buf

    @property
    def active(self):
        return self.data[: self.n]

    @property
    def capacity(self) -> int:
        return len(self.data)

    def reserve(self, capacity: int) -> None:
        if capacity > len(self.data):
            new = np.zeros(max(capacity, 2 * len(self.data)), dtype=PARTICLE_DTYPE)
            new[: self.n] = self.data[: self.n]
            self.data = new

    def append(self, arr) -> None:
        k = len(arr)
        if k == 0:
            return
        self.reserve(self.n + k)
        self.data[self.n : self.n + k] = arr
        self.n += k

    def clear(self) -> None:
        self.n = 0

    def __len__(self) -> int:
        return self.n


# Counter-based normal deviates: every (seed, stream, cell, particle, axis)
# tuple maps to a fixed value, so injection is independent of the order in
# which regions or cells are visited.

@numba.njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, inline="always")
def _uniform(key, counter):
    h = _mix64(key + np.uint64(counter) * np.uint64(0x9E3779B97F4A7C15))
    # (0, 1]: never zero, so log() below is finite
    return ((h >> np.uint64(11)) + np.uint64(1)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True, nogil=True)
def _inject_cells(out, i0, i1, j0, j1, ppc_x, ppc_y, abs_x0, abs_y0,
                  ufl, uth, key):
    """Fill ``out`` with particles for cells [i0,i1) x [j0,j1).

    ``abs_x0``/``abs_y0`` convert local cell indices into the absolute cell
    coordinates that seed the thermal sampler.
    """
    k = 0
    for j in range(j0, j1):
        for i in range(i0, i1):
            cell = np.uint64(i + abs_x0) * np.uint64(0x100000) + np.uint64(j + abs_y0)
            for py in range(ppc_y):
                for px in range(ppc_x):
                    p = out[k]
                    p.ix = i
                    p.iy = j
                    p.x = (px + 0.5) / ppc_x
                    p.y = (py + 0.5) / ppc_y
                    sub = np.uint64(py * ppc_x + px)
                    base = _mix64(key ^ (cell * np.uint64(0x10001) + sub))
                    u1 = _uniform(base, 0)
                    u2 = _uniform(base, 1)
                    u3 = _uniform(base, 2)
                    u4 = _uniform(base, 3)
                    r1 = math.sqrt(-2.0 * math.log(u1))
                    r2 = math.sqrt(-2.0 * math.log(u3))
                    p.ux = ufl[0] + uth[0] * r1 * math.cos(2.0 * math.pi * u2)
                    p.uy = ufl[1] + uth[1] * r1 * math.sin(2.0 * math.pi * u2)
                    p.uz = ufl[2] + uth[2] * r2 * math.cos(2.0 * math.pi * u4)
                    k += 1
    return k


class ThermalStream:
    """Seeded, counter-based source of thermal momenta for one species."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        mixed = (self.seed * 0x632BE59BD9B4E019 + self.stream * 0x85EBCA77C2B2AE63 + 1)
        self.key = np.uint64(mixed & 0xFFFFFFFFFFFFFFFF)

    def sample(self, spec: SpeciesSpec, i0, i1, j0, j1, abs_x0=0, abs_y0=0):
        n = max(i1 - i0, 0) * max(j1 - j0, 0) * spec.ppc
        out = np.zeros(n, dtype=PARTICLE_DTYPE)
        if n:
            _inject_cells(out, i0, i1, j0, j1, spec.ppc_x, spec.ppc_y, abs_x0, abs_y0,
                          np.asarray(spec.u_fl, dtype=np.float64),
                          np.asarray(spec.u_th, dtype=np.float64), self.key)
        return out


def inject_uniform(spec: SpeciesSpec, cfg: SimConfig, rng: ThermalStream, rows=None):
    """Uniform plasma on a regular ppc_x x ppc_y sub-lattice of every cell.

    ``rows`` restricts injection to global rows ``[r0, r1)``; particle ``iy``
    is then relative to ``r0``.  Momenta are ``u_fl + N(0, u_th)``.
    """
    r0, r1 = (0, cfg.ny) if rows is None else rows
    return rng.sample(spec, 0, cfg.nx, 0, r1 - r0, abs_x0=0, abs_y0=r0)


def species_streams(cfg: SimConfig) -> list[ThermalStream]:
    return [ThermalStream(cfg.seed, k) for k in range(len(cfg.species))]


# --------------------------------------------------------------------------
# laser


def init_laser(emf: EMFields, laser: LaserSpec, cfg: SimConfig) -> EMFields:
    """Add a linearly polarized plane-wave pulse travelling in +x.

    E = A f(x) (cos p, sin p) in (y, z) and B = x_hat cross E, with
    A = a0 * omega0, sampled at each component's Yee position.
    """
    rise, flat, fall = laser.lengths()
    length = rise + flat + fall
    if laser.start_x > cfg.box_x or laser.start_x - length < 0:
        raise LaserWiderThanBox(
            f"pulse [{laser.start_x - length:g}, {laser.start_x:g}] exceeds box [0, {cfg.box_x:g}]"
        )
    amp = laser.a0 * laser.omega0
    cp, sp = math.cos(laser.polarization), math.sin(laser.polarization)
    dx = cfg.dx
    x_node = np.arange(emf.e.nx) * dx
    x_half = x_node + 0.5 * dx

    def wave(x):
        return amp * laser.envelope(x) * np.cos(laser.omega0 * (x - laser.start_x))

    f_node = wave(x_node).astype(np.float32)
    f_half = wave(x_half).astype(np.float32)
    emf.e.interior(1)[...] += cp * f_node
    emf.e.interior(2)[...] += sp * f_node
    emf.b.interior(2)[...] += cp * f_half
    emf.b.interior(1)[...] += -sp * f_half
    return emf


def field_energy(emf: EMFields, dx: float, dy: float) -> float:
    e = emf.e.interior().astype(np.float64)
    b = emf.b.interior().astype(np.float64)
    return 0.5 * float((e**2).sum() + (b**2).sum()) * dx * dy


def scenario_dir() -> Path:
    return Path(__file__).parent / "scenarios"


def builtin_scenarios() -> list[str]:
    return sorted(p.stem for p in scenario_dir().glob("*.json"))


def resolve_scenario(name_or_path) -> SimConfig:
    """Load a built-in scenario by name, or a JSON file by path."""
    path = Path(name_or_path)
    if path.suffix != ".json" or not path.exists():
        builtin = scenario_dir() / f"{name_or_path}.json"
        if builtin.exists():
            path = builtin
    return load_config(path)


def total_particles(cfg: SimConfig, species: Sequence[SpeciesSpec] = None) -> int:
    species = cfg.species if species is None else species
    return sum(cfg.nx * cfg.ny * sp.ppc for sp in species)
