"""Command-line entry point: ``empic run | bench | compare | weakscale``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import diagnostics as D
from .backends import BACKENDS, SimState, backend_kind, create_state, run_backend
from .core import ConfigError, SimConfig, builtin_scenarios, resolve_scenario, validate_config
from .tasking import ENV_WORKERS, TaskRuntime, default_workers

log = logging.getLogger("empic")

BENCH_COLUMNS = ("backend", "workers", "regions", "mean_s", "std_s", "speedup")
WEAK_COLUMNS = ("backend", "workers", "ny", "regions", "mean_s", "std_s", "efficiency",
                "particles_start", "particles_end")
NOISE_LIMIT = 0.05


class ScenarioNotScalable(ValueError):
    pass


# --------------------------------------------------------------------------
# timing helpers shared by bench, weakscale and the acceptance tests


def timed_run(cfg: SimConfig, backend: str, workers: int = 1, regions: Optional[int] = None,
              steps: Optional[int] = None) -> tuple[float, SimState]:
    """Wall time of the time loop only (state setup and pool start excluded)."""
    kind = backend_kind(backend)
    state = create_state(cfg, kind, regions)
    steps = cfg.n_steps if steps is None else steps
    if kind.spatial:
        with TaskRuntime(workers) as rt:
            t0 = time.perf_counter()
            run_backend(state, steps, kind, workers, runtime=rt)
            elapsed = time.perf_counter() - t0
    else:
        t0 = time.perf_counter()
        run_backend(state, steps, kind, workers)
        elapsed = time.perf_counter() - t0
    return elapsed, state


def repeat_timing(cfg, backend, workers=1, regions=None, steps=None, repetitions=5) -> list[float]:
    return [timed_run(cfg, backend, workers, regions, steps)[0] for _ in range(repetitions)]


def _mean_std(times: Sequence[float]) -> tuple[float, float]:
    mean = statistics.fmean(times)
    std = statistics.stdev(times) if len(times) > 1 else 0.0
    return mean, std


def _append_csv(path: Path, columns: Sequence[str], rows: list[dict]) -> Path:
    """Append rows, writing the header only for a new or empty file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    if not new:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), [])
        if tuple(header) != tuple(columns):
            raise ValueError(f"{path} has columns {header}, expected {list(columns)}")
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        if new:
            w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in columns})
    return path


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


# --------------------------------------------------------------------------
# run


def cmd_run(scenario, backend="serial", workers=None, regions=None, dump_interval=0,
            steps=None, seed=None, out="runs", run_id=None, quantities=("Bz",),
            energy_interval=1) -> int:
    """Run a scenario, write dumps and the energy series, print stage times."""
    cfg = resolve_scenario(scenario)
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if regions is not None:
        changes["n_regions"] = regions
    if changes:
        cfg = cfg.replace(**changes)
    validate_config(cfg)
    kind = backend_kind(backend)
    workers = workers or default_workers()
    steps = cfg.n_steps if steps is None else steps
    run_id = run_id or f"{Path(str(scenario)).stem}-{kind.value}"
    out_dir = Path(out) / run_id
    quantities = list(quantities)
    for q in quantities:
        D.quantity_code(q)

    reports: list[D.FieldReport] = []

    def snapshot(state, step):
        reports.extend(D.field_report(state, q, step) for q in quantities)

    every = dump_interval if dump_interval and dump_interval > 0 else 0
    state = create_state(cfg, kind)
    kw = dict(on_step=snapshot, every=every, energy_every=energy_interval)
    if kind.spatial:
        with TaskRuntime(workers) as rt:
            t0 = time.perf_counter()
            run_backend(state, steps, kind, workers, runtime=rt, **kw)
            total = time.perf_counter() - t0
    else:
        t0 = time.perf_counter()
        run_backend(state, steps, kind, workers, **kw)
        total = time.perf_counter() - t0
    if not reports or reports[-1].iter != state.iter:
        snapshot(state, state.iter)

    out_dir.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        D.write_report(rep, D.dump_path(out_dir, rep.quantity, rep.iter))
    energy_file = out_dir / "energy.ndjson"
    energy_file.unlink(missing_ok=True)
    D.write_ndjson(D.energy_series(state), energy_file)
    timing = {"backend": kind.value, "workers": workers, "regions": len(state.regions),
              "steps": steps, "total_s": total, "stages": dict(state.clock)}
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")

    print(f"{run_id}: {steps} steps, backend {kind.value}, {workers} workers, "
          f"{len(state.regions)} regions, {state.n_particles()} particles")
    for stage, secs in sorted(state.clock.items(), key=lambda kv: -kv[1]):
        print(f"  {stage:<10s} {secs:10.3f} s")
    print(f"  {'total':<10s} {total:10.3f} s (wall)")
    print(f"output: {out_dir}")
    return 0


# --------------------------------------------------------------------------
# bench


@dataclass
class BenchPlan:
    scenario: str
    backends: list = field(default_factory=lambda: ["serial"])
    workers: list = field(default_factory=lambda: [1])
    # ints, or "<k>x" meaning k regions per worker
    regions: list = field(default_factory=lambda: ["3x"])
    repetitions: int = 5
    output: str = "bench"
    steps: Optional[int] = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions", "must be >= 1")
        for w in self.workers:
            if int(w) < 1:
                raise ConfigError("workers", "counts must be >= 1")
        for b in self.backends:
            backend_kind(b)
        for r in self.regions:
            if isinstance(r, str):
                if not r.endswith("x") or float(r[:-1]) <= 0:
                    raise ConfigError("regions", f"bad region spec {r!r}")
            elif int(r) < 1:
                raise ConfigError("regions", "counts must be >= 1")

    @classmethod
    def load(cls, path) -> "BenchPlan":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown bench plan key")
        return cls(**data)

    def region_counts(self, workers: int) -> list[int]:
        out = []
        for r in self.regions:
            n = max(1, round(float(r[:-1]) * workers)) if isinstance(r, str) else int(r)
            if n not in out:
                out.append(n)
        return out


def run_bench(plan: BenchPlan, echo=print) -> list[dict]:
    """Measure every (backend, workers, regions) cell of ``plan``.

    The serial baseline is always timed first in the same session and on
    the same scenario; speedups are relative to its mean.
    """
    cfg = resolve_scenario(plan.scenario)
    serial = repeat_timing(cfg, "serial", 1, None, plan.steps, plan.repetitions)
    base, base_std = _mean_std(serial)
    rows = []

    def add(backend, workers, regions, times):
        mean, std = _mean_std(times)
        row = dict(backend=backend, workers=workers, regions=regions, mean_s=f"{mean:.6f}",
                   std_s=f"{std:.6f}", speedup=f"{base / mean:.4f}")
        if mean > 0 and std / mean > NOISE_LIMIT:
            log.warning("noisy timing: %s workers=%d regions=%d std/mean=%.1f%%",
                        backend, workers, regions, 100 * std / mean)
        echo(",".join(str(row[c]) for c in BENCH_COLUMNS))
        rows.append(row)

    echo(",".join(BENCH_COLUMNS))
    for backend in plan.backends:
        kind = backend_kind(backend)
        if kind.value == "serial":
            add("serial", 1, 1, serial)
            continue
        for w in plan.workers:
            w = int(w)
            counts = plan.region_counts(w) if kind.spatial else [1]
            for nreg in counts:
                times = repeat_timing(cfg, kind.value, w, nreg, plan.steps, plan.repetitions)
                add(kind.value, w, nreg, times)
    _append_csv(Path(plan.output) / "bench.csv", BENCH_COLUMNS, rows)
    return rows


def cmd_bench(plan: BenchPlan) -> int:
    rows = run_bench(plan)
    print(f"wrote {len(rows)} rows to {Path(plan.output) / 'bench.csv'}")
    return 0


# --------------------------------------------------------------------------
# compare


def cmd_compare(path_a, path_b, threshold=1e-3) -> int:
    a, b = D.load_dump(path_a), D.load_dump(path_b)
    max_rel, l2 = D.compare_field_maps(a, b)
    ok = max_rel <= threshold
    print(f"max_rel={max_rel:.6e} l2_rel={l2:.6e} threshold={threshold:g} "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# --------------------------------------------------------------------------
# weak scaling


def scaled_config(cfg: SimConfig, factor: int) -> SimConfig:
    """``cfg`` with ny and box_y multiplied by ``factor`` (dy, ppc unchanged)."""
    if cfg.moving_window or cfg.laser is not None:
        raise ScenarioNotScalable(
            "laser / moving-window scenarios concentrate work near the pulse and"
            " cannot be weak-scaled by extending y")
    return cfg.replace(ny=cfg.ny * factor, box_y=cfg.box_y * factor)


def run_weakscale(scenario, workers: Sequence[int], backend="reduction-async",
                  regions_per_worker=3, steps=None, repetitions=1, output="weak",
                  echo=print) -> list[dict]:
    """Efficiency T(1 worker, base) / T(n workers, n-times taller grid)."""
    cfg = resolve_scenario(scenario) if not isinstance(scenario, SimConfig) else scenario
    scaled_config(cfg, 1)
    rows = []
    base = None
    echo(",".join(WEAK_COLUMNS))
    for w in workers:
        w = int(w)
        c = scaled_config(cfg, w)
        regions = max(1, regions_per_worker * w)
        times, counts = [], None
        for _ in range(repetitions):
            t, state = timed_run(c, backend, w, regions, steps)
            times.append(t)
            counts = (sum(c.nx * c.ny * sp.ppc for sp in c.species), state.n_particles())
        mean, std = _mean_std(times)
        if base is None:
            if w != 1:
                base = _mean_std([timed_run(cfg, backend, 1, regions_per_worker, steps)[0]
                                  for _ in range(repetitions)])[0]
            else:
                base = mean
        row = dict(backend=backend_kind(backend).value, workers=w, ny=c.ny, regions=regions,
                   mean_s=f"{mean:.6f}", std_s=f"{std:.6f}", efficiency=f"{base / mean:.4f}",
                   particles_start=counts[0], particles_end=counts[1])
        echo(",".join(str(row[k]) for k in WEAK_COLUMNS))
        rows.append(row)
    _append_csv(Path(output) / "weak.csv", WEAK_COLUMNS, rows)
    return rows


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="empic",
        description="2D3V electromagnetic PIC with interchangeable parallel backends.",
        epilog=f"Built-in scenarios: {', '.join(builtin_scenarios())}. "
               f"{ENV_WORKERS} overrides the default worker count.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("scenario", help="built-in scenario name or JSON path")
    r.add_argument("--backend", choices=BACKENDS, default="serial")
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--regions", type=int, default=None)
    r.add_argument("--steps", type=int, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--dump-interval", type=int, default=0,
                   help="dump every N steps (the final step is always dumped)")
    r.add_argument("--quantities", default="Bz",
                   help="comma-separated, e.g. Ex,Ey,Bz,Jz,rho0")
    r.add_argument("--energy-interval", type=int, default=1)
    r.add_argument("--run-id", default=None)
    r.add_argument("--out", default="runs")

    b = sub.add_parser("bench", help="strong-scaling sweep, writes bench.csv")
    b.add_argument("plan", nargs="?", help="bench plan JSON (overrides the flags below)")
    b.add_argument("--scenario", default="weibel-small")
    b.add_argument("--backend", default="serial,reduction-async",
                   help="comma-separated backend names")
    b.add_argument("--workers", default="1")
    b.add_argument("--regions", default="3x", help="comma-separated counts or '<k>x' per worker")
    b.add_argument("--repetitions", type=int, default=5)
    b.add_argument("--steps", type=int, default=None)
    b.add_argument("--out", default="bench")

    c = sub.add_parser("compare", help="compare two field dumps")
    c.add_argument("dump_a")
    c.add_argument("dump_b")
    c.add_argument("--threshold", type=float, default=1e-3)

    w = sub.add_parser("weakscale", help="weak-scaling sweep, writes weak.csv")
    w.add_argument("scenario")
    w.add_argument("--workers", default="1")
    w.add_argument("--backend", choices=BACKENDS, default="reduction-async")
    w.add_argument("--regions", type=int, default=3, help="regions per worker")
    w.add_argument("--steps", type=int, default=None)
    w.add_argument("--repetitions", type=int, default=1)
    w.add_argument("--out", default="weak")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.scenario, args.backend, args.workers, args.regions,
                           args.dump_interval, args.steps, args.seed, args.out, args.run_id,
                           [q.strip() for q in args.quantities.split(",") if q.strip()],
                           args.energy_interval)
        if args.command == "bench":
            if args.plan:
                plan = BenchPlan.load(args.plan)
            else:
                regions = [v if v.endswith("x") else int(v) for v in args.regions.split(",")]
                plan = BenchPlan(args.scenario, args.backend.split(","),
                                 _parse_int_list(args.workers), regions, args.repetitions,
                                 args.out, args.steps)
            return cmd_bench(plan)
        if args.command == "compare":
            return cmd_compare(args.dump_a, args.dump_b, args.threshold)
        if args.command == "weakscale":
            run_weakscale(args.scenario, _parse_int_list(args.workers), args.backend,
                          args.regions, args.steps, args.repetitions, args.out)
            return 0
    except (ConfigError, ScenarioNotScalable, D.ShapeMismatch, D.DumpFormatError,
            OSError, ValueError) as exc:
        print(f"empic: error: {exc}", file=sys.stderr)
        return 2
    return 1  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
