import csv
import json

import pytest

from empic import cli
from empic import diagnostics as D
from empic.core import save_config
from conftest import weibel_config


@pytest.fixture
def scenario(tmp_path):
    path = tmp_path / "tiny.json"
    save_config(weibel_config(nx=24, ny=18, steps=8, n_regions=3), path)
    return path


def test_run_writes_outputs(scenario, tmp_path, capsys):
    out = tmp_path / "runs"
    rc = cli.main(["run", str(scenario), "--backend", "reduction-async", "--workers", "2",
                   "--dump-interval", "4", "--quantities", "Bz,Ex,rho0", "--out", str(out),
                   "--run-id", "a"])
    assert rc == 0
    d = out / "a"
    names = sorted(p.name for p in d.glob("*.zdump"))
    assert names == sorted(f"{q}-{i}.zdump" for q in ("Bz", "Ex", "rho0") for i in (4, 8))
    assert D.load_dump(d / "Bz-8.zdump").iter == 8
    energy = D.read_ndjson(d / "energy.ndjson")
    assert [r["iter"] for r in energy] == list(range(1, 9))
    timing = json.loads((d / "timing.json").read_text())
    assert timing["regions"] == 3 and timing["stages"]["advance"] > 0
    assert "advance" in capsys.readouterr().out


def test_run_then_compare(scenario, tmp_path):
    out = tmp_path / "runs"
    assert cli.main(["run", str(scenario), "--out", str(out), "--run-id", "s"]) == 0
    assert cli.main(["run", str(scenario), "--backend", "commutative-sync", "--workers", "2",
                     "--out", str(out), "--run-id", "c"]) == 0
    a, b = out / "s" / "Bz-8.zdump", out / "c" / "Bz-8.zdump"
    assert cli.main(["compare", str(a), str(a)]) == 0
    assert cli.main(["compare", str(a), str(b)]) == 0
    assert cli.main(["compare", str(a), str(b), "--threshold", "0"]) in (0, 1)


def test_compare_fails_on_difference(tmp_path):
    import numpy as np
    a = D.write_report(D.FieldReport("Ex", 1, 2, 2, np.ones((2, 2))), tmp_path / "a.zdump")
    b = D.write_report(D.FieldReport("Ex", 1, 2, 2, np.full((2, 2), 1.01)), tmp_path / "b.zdump")
    c = D.write_report(D.FieldReport("Ex", 1, 3, 2, np.ones((2, 3))), tmp_path / "c.zdump")
    assert cli.main(["compare", str(a), str(b)]) == 1
    assert cli.main(["compare", str(a), str(b), "--threshold", "0.02"]) == 0
    assert cli.main(["compare", str(a), str(c)]) == 2


def test_bench_serial_only(scenario, tmp_path):
    out = tmp_path / "bench"
    rc = cli.main(["bench", "--scenario", str(scenario), "--backend", "serial",
                   "--repetitions", "2", "--out", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(open(out / "bench.csv")))
    assert len(rows) == 1 and float(rows[0]["speedup"]) == 1.0
    # a second sweep appends without a second header
    cli.main(["bench", "--scenario", str(scenario), "--backend", "serial",
              "--repetitions", "1", "--out", str(out)])
    assert len(list(csv.DictReader(open(out / "bench.csv")))) == 2


def test_bench_plan_file(scenario, tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"scenario": str(scenario),
                                "backends": ["serial", "reduction-sync", "parallel-for"],
                                "workers": [1, 2], "regions": ["3x", 2], "repetitions": 1,
                                "steps": 2, "output": str(tmp_path / "b")}))
    assert cli.main(["bench", str(plan)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "b" / "bench.csv")))
    cells = {(r["backend"], r["workers"], r["regions"]) for r in rows}
    assert cells == {("serial", "1", "1"), ("reduction-sync", "1", "3"),
                     ("reduction-sync", "1", "2"), ("reduction-sync", "2", "6"),
                     ("reduction-sync", "2", "2"), ("parallel-for", "1", "1"),
                     ("parallel-for", "2", "1")}


def test_bench_plan_errors(tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"scenario": "cold", "bogus": 1}))
    assert cli.main(["bench", str(plan)]) == 2
    with pytest.raises(ValueError):
        cli.BenchPlan("cold", backends=["mpi"])
    with pytest.raises(ValueError):
        cli.BenchPlan("cold", regions=["x3"])


def test_weakscale_single_worker(scenario, tmp_path):
    out = tmp_path / "weak"
    assert cli.main(["weakscale", str(scenario), "--workers", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "weak.csv")))
    assert len(rows) == 1
    assert float(rows[0]["efficiency"]) == 1.0
    assert rows[0]["particles_start"] == rows[0]["particles_end"]


def test_weakscale_scales_grid(scenario, tmp_path):
    rows = cli.run_weakscale(str(scenario), [1, 2], "reduction-sync", steps=2,
                             output=tmp_path, echo=lambda *_: None)
    assert [r["ny"] for r in rows] == [18, 36]
    assert [r["regions"] for r in rows] == [3, 6]
    assert rows[1]["particles_start"] == 2 * rows[0]["particles_start"]


def test_weakscale_rejects_laser(tmp_path, capsys):
    assert cli.main(["weakscale", "lwfa-small", "--out", str(tmp_path)]) == 2
    assert "weak-scaled" in capsys.readouterr().err


def test_unknown_backend_exits_nonzero(scenario):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", str(scenario), "--backend", "mpi"])
    assert exc.value.code != 0


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nx": 8, "ny": 8, "box_x": 0.8, "box_y": 0.8, "dt": 5.0}))
    assert cli.main(["run", str(bad), "--out", str(tmp_path)]) == 2
    assert "dt" in capsys.readouterr().err
    assert cli.main(["run", "no-such-scenario", "--out", str(tmp_path)]) == 2
    assert cli.main(["run", "cold", "--quantities", "Q", "--out", str(tmp_path)]) == 2


def test_builtin_scenarios_validate():
    from empic.core import builtin_scenarios, resolve_scenario, validate_config
    names = builtin_scenarios()
    for n in ("weibel-small", "weibel", "lwfa-small", "lwfa", "cold", "warm"):
        assert n in names
    for n in names:
        validate_config(resolve_scenario(n))
