import threading
import time

import pytest

from empic.tasking import (
    ENV_WORKERS,
    Commutative,
    DuplicateResourceInClause,
    In,
    InOut,
    Mode,
    Out,
    PoolAlreadyRunning,
    PoolNotRunning,
    TaskRuntime,
    dedupe,
    default_workers,
)


def test_flow_dependence():
    log = []
    with TaskRuntime(4) as rt:
        for _ in range(30):
            rt.spawn(lambda: (time.sleep(0.001), log.append("w")), [Out("A")])
            rt.spawn(lambda: log.append("r"), [In("A")])
        rt.taskwait()
    assert log == ["w", "r"] * 30


def test_anti_dependence():
    state = {"v": 0}
    seen = []
    with TaskRuntime(4) as rt:
        rt.spawn(lambda: state.update(v=1), [Out("A")])
        for _ in range(5):
            rt.spawn(lambda: (time.sleep(0.002), seen.append(state["v"])), [In("A")])
        rt.spawn(lambda: state.update(v=2), [Out("A")])
        rt.taskwait()
    assert seen == [1] * 5 and state["v"] == 2


def test_readers_run_concurrently():
    barrier = threading.Barrier(3, timeout=5)
    with TaskRuntime(3) as rt:
        for _ in range(3):
            rt.spawn(barrier.wait, [In("A")])
        rt.taskwait()


def test_commutative_exclusion_and_orders():
    orders = set()
    with TaskRuntime(4, instrument=True) as rt:
        for _ in range(200):
            counter = {"n": 0}
            order = []

            def body(k, counter=counter, order=order):
                v = counter["n"]
                time.sleep(0)
                counter["n"] = v + 1
                order.append(k)

            for k in range(4):
                rt.spawn(lambda k=k, body=body: body(k), [Commutative("C")])
            rt.taskwait()
            assert counter["n"] == 4
            orders.add(tuple(order[:2]))
        assert not rt.violations
    assert len(orders) > 1


def test_commutative_ordered_against_inout():
    log = []
    with TaskRuntime(4) as rt:
        rt.spawn(lambda: (time.sleep(0.01), log.append("before")), [InOut("C")])
        for k in range(3):
            rt.spawn(lambda: log.append("peer"), [Commutative("C")])
        rt.spawn(lambda: log.append("after"), [In("C")])
        rt.taskwait()
    assert log == ["before", "peer", "peer", "peer", "after"]


def test_multi_resource_commutative_no_deadlock():
    total = {"a": 0, "b": 0, "c": 0}
    with TaskRuntime(4, instrument=True) as rt:
        for _ in range(50):
            for x, y in (("a", "b"), ("b", "c"), ("c", "a")):
                def body(x=x, y=y):
                    total[x] += 1
                    total[y] += 1
                rt.spawn(body, [Commutative(x), Commutative(y)])
        rt.taskwait()
        assert not rt.violations
    assert total == {"a": 100, "b": 100, "c": 100}


def test_taskwait_empty():
    with TaskRuntime(2) as rt:
        rt.taskwait()


def test_taskwait_independent():
    slots = [0] * 100
    with TaskRuntime(4) as rt:
        for i in range(100):
            rt.spawn(lambda i=i: slots.__setitem__(i, 1))
        rt.taskwait()
    assert all(slots)


def test_chain_order():
    log = []
    with TaskRuntime(4) as rt:
        for i in range(50):
            rt.spawn(lambda i=i: log.append(i), [InOut("A")])
        rt.taskwait()
    assert log == list(range(50))


def test_single_worker_topological():
    log = []
    with TaskRuntime(1) as rt:
        rt.spawn(lambda: log.append("a"), [Out("x")])
        rt.spawn(lambda: log.append("b"), [In("x"), Out("y")])
        rt.spawn(lambda: log.append("c"), [In("y")])
        rt.taskwait()
    assert log == ["a", "b", "c"]


def test_ids_increase():
    with TaskRuntime(2) as rt:
        hs = [rt.spawn(lambda: None) for _ in range(10)]
        rt.taskwait()
    assert [h.id for h in hs] == sorted(h.id for h in hs)
    assert len({h.id for h in hs}) == 10


def test_concurrency_smoke():
    # sleep releases the GIL, so 4 workers overlap the waits
    with TaskRuntime(4) as rt:
        t0 = time.perf_counter()
        for _ in range(100):
            rt.spawn(lambda: time.sleep(0.01))
        rt.taskwait()
        assert time.perf_counter() - t0 < 100 * 0.01 / 2


def test_duplicate_resource():
    with TaskRuntime(1) as rt:
        with pytest.raises(DuplicateResourceInClause):
            rt.spawn(lambda: None, [In("A"), Out("A")])


def test_pool_lifecycle():
    rt = TaskRuntime(1)
    with pytest.raises(PoolNotRunning):
        rt.spawn(lambda: None)
    rt.run_pool()
    with pytest.raises(PoolAlreadyRunning):
        rt.run_pool()
    rt.shutdown()


def test_errors_surface_at_taskwait():
    with TaskRuntime(2) as rt:
        rt.spawn(lambda: 1 / 0)
        with pytest.raises(ZeroDivisionError):
            rt.taskwait()


def test_wait_subset():
    ev = threading.Event()
    with TaskRuntime(2) as rt:
        h = rt.spawn(lambda: None)
        rt.spawn(lambda: ev.wait(5))
        rt.wait([h])
        assert h.done
        ev.set()


def test_instrumentation_flags_overlap():
    from empic.tasking import TaskHandle

    rt = TaskRuntime(1, instrument=True)
    a = TaskHandle(0, lambda: None, (InOut("A"),))
    b = TaskHandle(1, lambda: None, (In("A"),))
    rt._enter(a)
    rt._enter(b)
    assert len(rt.violations) == 1 and "'A'" in rt.violations[0]
    rt._exit(b)
    rt._exit(a)


def test_trace(tmp_path):
    path = tmp_path / "trace.ndjson"
    with TaskRuntime(2, trace=path) as rt:
        rt.spawn(lambda: None, [Out("A")], label="first")
        rt.spawn(lambda: None, [In("A")], label="second")
    import json

    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["label"] for r in recs] == ["first", "second"]
    assert recs[0]["clauses"] == [["A", "out"]]
    assert recs[0]["end"] <= recs[1]["start"]


def test_dedupe():
    got = dedupe([In("a"), In("a"), Out("b"), In("b"), Commutative("c")])
    assert {(c.resource, c.mode) for c in got} == {
        ("a", Mode.IN), ("b", Mode.INOUT), ("c", Mode.COMMUTATIVE)}


def test_env_override(monkeypatch):
    monkeypatch.setenv(ENV_WORKERS, "3")
    assert default_workers() == 3
    monkeypatch.delenv(ENV_WORKERS)
    assert default_workers() >= 1
