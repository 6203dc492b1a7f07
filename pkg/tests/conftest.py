import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from empic.core import SimConfig, SpeciesSpec

settings.register_profile(
    "empic", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("empic")


def weibel_config(nx=32, ny=24, steps=30, seed=3, ppc=2, n_regions=1):
    return SimConfig(
        nx=nx, ny=ny, box_x=0.1 * nx, box_y=0.1 * ny, dt=0.07, n_steps=steps,
        n_regions=n_regions, seed=seed,
        species=[SpeciesSpec("electrons", -1.0, ppc, ppc, (0, 0, 0.6), (0.1, 0.1, 0.1)),
                 SpeciesSpec("positrons", 1.0, ppc, ppc, (0, 0, -0.6), (0.1, 0.1, 0.1))])


def stitched(state, which="e"):
    """Interior E or B of every region stitched into a (3, ny, nx) array."""
    cfg = state.cfg
    out = np.zeros((3, cfg.ny, cfg.nx), np.float32)
    for r in state.regions:
        out[:, r.y0:r.y0 + r.n_rows] = getattr(r.emf, which).data[:, 1:1 + r.n_rows, 1:1 + cfg.nx]
    return out


def max_rel(a, b):
    scale = float(np.abs(a).max())
    return float(np.abs(a.astype(np.float64) - b).max()) / (scale if scale else 1.0)


@pytest.fixture
def small_weibel():
    return weibel_config()


# acceptance outcomes, filled in by test_acceptance and echoed at the end of the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
