"""Field and energy reports, the binary dump format and map comparison."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels as K
from .backends import region_energy_partial
from .core import GUARD_LO

G = GUARD_LO

MAGIC = b"ZPICDUMP"
VERSION = 1
HEADER = struct.Struct("<8sHHIII8x")
assert HEADER.size == 32

_FIELD_CODES = {"Ex": 0, "Ey": 1, "Ez": 2, "Bx": 3, "By": 4, "Bz": 5, "Jx": 6, "Jy": 7, "Jz": 8}
# charge density of species k is "rho<k>" with code RHO_BASE + k
RHO_BASE = 16


class ShapeMismatch(ValueError):
    pass


class DumpFormatError(ValueError):
    pass


def quantity_code(quantity: str) -> int:
    if quantity in _FIELD_CODES:
        return _FIELD_CODES[quantity]
    if quantity.startswith("rho") and quantity[3:].isdigit():
        return RHO_BASE + int(quantity[3:])
    raise ValueError(f"unknown quantity {quantity!r}")


def quantity_name(code: int) -> str:
    for name, c in _FIELD_CODES.items():
        if c == code:
            return name
    if code >= RHO_BASE:
        return f"rho{code - RHO_BASE}"
    raise DumpFormatError(f"unknown quantity code {code}")


@dataclass
class FieldReport:
    """One scalar map over the whole grid, ``data`` shaped ``(ny, nx)``."""

    quantity: str
    iter: int
    nx: int
    ny: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.shape != (self.ny, self.nx):
            raise ShapeMismatch(f"data shape {self.data.shape} != ({self.ny}, {self.nx})")

    def to_bytes(self) -> bytes:
        head = HEADER.pack(MAGIC, VERSION, quantity_code(self.quantity), self.iter, self.nx, self.ny)
        return head + self.data.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FieldReport":
        if len(raw) < HEADER.size:
            raise DumpFormatError("file shorter than the dump header")
        magic, version, code, it, nx, ny = HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise DumpFormatError("bad magic, not a field dump")
        if version != VERSION:
            raise DumpFormatError(f"unsupported dump version {version}")
        body = raw[HEADER.size:]
        if len(body) != 4 * nx * ny:
            raise DumpFormatError(f"expected {4 * nx * ny} data bytes, found {len(body)}")
        data = np.frombuffer(body, dtype="<f4").reshape(ny, nx).astype(np.float32)
        return cls(quantity_name(code), it, nx, ny, data)


def _component(quantity: str):
    return {"E": "e", "B": "b", "J": "j"}[quantity[0]], "xyz".index(quantity[1])


def field_map(state, quantity: str) -> np.ndarray:
    """Stitch one quantity's interior values from every region, in y order."""
    cfg = state.cfg
    out = np.zeros((cfg.ny, cfg.nx), dtype=np.float32)
    if quantity.startswith("rho"):
        return charge_density(state, int(quantity[3:]))
    which, comp = _component(quantity)
    for r in state.regions:
        grid = r.j_local.j if which == "j" else getattr(r.emf, which)
        out[r.y0:r.y0 + r.n_rows] = grid.data[comp, G:G + r.n_rows, G:G + cfg.nx]
    return out


def charge_density(state, species: int) -> np.ndarray:
    """Bilinear node charge of one species, periodic in y (and x unless open)."""
    cfg = state.cfg
    sp = cfg.species[species]
    total = np.zeros((cfg.ny, cfg.nx), dtype=np.float64)
    for r in state.regions:
        rho = np.zeros((r.n_rows + 3, cfg.nx + 3), dtype=np.float64)
        buf = r.particles[species]
        K.deposit_charge(rho, buf.data, buf.n, sp.q)
        if not cfg.moving_window:
            rho[:, G] += rho[:, G + cfg.nx]
        rows = (np.arange(r.n_rows + 3) - G + r.y0) % cfg.ny
        np.add.at(total, rows, rho[:, G:G + cfg.nx])
    return total.astype(np.float32)


def field_report(state, quantity: str, it: Optional[int] = None) -> FieldReport:
    """Report of ``quantity``; ``it`` labels it (default ``state.iter``).

    Asynchronous backends run probes behind the submitting loop, so they
    must pass the step they were spawned for.
    """
    quantity_code(quantity)
    it = state.iter if it is None else it
    return FieldReport(quantity, it, state.cfg.nx, state.cfg.ny, field_map(state, quantity))


def dump_path(out_dir, quantity: str, it: int) -> Path:
    return Path(out_dir) / f"{quantity}-{it}.zdump"


def write_report(report: FieldReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(report.to_bytes())
    return path


def dump_field(state, quantity: str, path) -> FieldReport:
    """Write ``quantity`` of ``state`` to ``path``; returns the report.

    A directory ``path`` gets the standard ``<quantity>-<iter>.zdump`` name.
    """
    rep = field_report(state, quantity)
    path = Path(path)
    if path.is_dir():
        path = dump_path(path, quantity, rep.iter)
    write_report(rep, path)
    return rep


def load_dump(path) -> FieldReport:
    return FieldReport.from_bytes(Path(path).read_bytes())


def compare_field_maps(a: FieldReport, b: FieldReport, eps: float = 1e-30) -> tuple[float, float]:
    """Max and L2 relative difference of ``b`` against reference ``a``.

    The max error is normalized by the global max-abs of ``a`` so cells
    where the field crosses zero do not dominate.
    """
    if (a.nx, a.ny) != (b.nx, b.ny) or a.quantity != b.quantity:
        raise ShapeMismatch(
            f"cannot compare {a.quantity} {a.nx}x{a.ny} with {b.quantity} {b.nx}x{b.ny}")
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    diff = np.abs(x - y)
    scale = max(float(np.abs(x).max()), eps)
    max_rel = float(diff.max()) / scale
    l2 = float(np.sqrt((diff**2).sum()) / max(np.sqrt((x**2).sum()), eps))
    return max_rel, l2


# --------------------------------------------------------------------------
# energy


@dataclass
class EnergyReport:
    """Energies at one step; ``field_energy`` is electric plus magnetic."""

    iter: int
    field_energy: float
    magnetic_energy: float
    kinetic_energy: float
    species: dict = field(default_factory=dict)

    @property
    def electric_energy(self) -> float:
        return self.field_energy - self.magnetic_energy

    @property
    def total(self) -> float:
        return self.field_energy + self.kinetic_energy

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _report_from_partial(cfg, it: int, part: np.ndarray) -> EnergyReport:
    sums = part.sum(axis=0)
    kin = {sp.name: float(v) for sp, v in zip(cfg.species, sums[2:])}
    return EnergyReport(it, float(sums[0] + sums[1]), float(sums[1]),
                        float(sum(kin.values())), kin)


def energy_report(state) -> EnergyReport:
    """Energies of ``state`` at its current step."""
    part = np.stack([region_energy_partial(state, r) for r in state.regions])
    return _report_from_partial(state.cfg, state.iter, part)


def energy_series(state) -> list[EnergyReport]:
    """Reports assembled from the per-region partial sums a run recorded."""
    return [_report_from_partial(state.cfg, it, state.energy_partials[it])
            for it in sorted(state.energy_partials)]


def magnetic_energy(state) -> float:
    """Sum of B^2 / 2 over the grid (cell-area weighted)."""
    return energy_report(state).magnetic_energy


def write_ndjson(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for rec in records:
            fh.write((rec.to_json() if hasattr(rec, "to_json") else json.dumps(rec)) + "\n")
    return path


def read_ndjson(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
