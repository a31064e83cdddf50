import os

import pytest

from hydrovpp.runtime import (ResultMessage, RoundFailed, TaskMessage,
                              WorkerPool, merge_results)


def _ctx_factory(base):
    return {"base": base}


def _square_task(ctx, task: TaskMessage) -> ResultMessage:
    kind = task.task_id[0]
    if kind == "boom" and task.payload.get("always", True):
        raise RuntimeError("synthetic failure")
    if kind == "flaky":
        # fails on the first attempt in this process, succeeds on retry
        marker = f"/tmp/hydrovpp_flaky_{os.getpid()}_{task.iteration}"
        if not os.path.exists(marker):
            open(marker, "w").close()
            raise RuntimeError("first attempt fails")
        return ResultMessage(task.task_id, task.iteration, "ok",
                             payload={"value": -1})
    n = task.task_id[1]
    return ResultMessage(task.task_id, task.iteration, "ok",
                         payload={"value": ctx["base"] + n * n})


def make_tasks(n):
    return [TaskMessage(("sq", i), 1, {}) for i in range(n)]


def test_sequential_dispatch():
    with WorkerPool(_ctx_factory, (10,), _square_task, workers=1) as pool:
        results = pool.dispatch_round(make_tasks(5))
    assert [r.payload["value"] for r in results] == [10, 11, 14, 19, 26]


def test_parallel_matches_sequential():
    tasks = make_tasks(7)
    with WorkerPool(_ctx_factory, (0,), _square_task, workers=1) as p1:
        seq = p1.dispatch_round(tasks)
    with WorkerPool(_ctx_factory, (0,), _square_task, workers=3) as p3:
        par = p3.dispatch_round(tasks)
    assert [r.payload for r in seq] == [r.payload for r in par]
    assert [r.task_id for r in seq] == [r.task_id for r in par]


def test_results_ordered_by_task_id():
    tasks = [TaskMessage(("sq", i), 1, {}) for i in (4, 1, 3, 0, 2)]
    with WorkerPool(_ctx_factory, (0,), _square_task, workers=2) as pool:
        results = pool.dispatch_round(tasks)
    assert [r.task_id[1] for r in results] == [0, 1, 2, 3, 4]


def test_hard_failure_aborts_with_diagnostics():
    tasks = make_tasks(2) + [TaskMessage(("boom",), 1, {})]
    with WorkerPool(_ctx_factory, (0,), _square_task, workers=1) as pool:
        with pytest.raises(RoundFailed) as err:
            pool.dispatch_round(tasks)
    assert "synthetic failure" in str(err.value)
    assert len(err.value.results) == 3      # partial diagnostics kept


def test_failed_task_retried_once():
    tasks = [TaskMessage(("flaky",), 7, {})]
    with WorkerPool(_ctx_factory, (0,), _square_task, workers=1) as pool:
        results = pool.dispatch_round(tasks)
    assert results[0].status == "ok"


def test_duplicate_results_dropped():
    a = ResultMessage(("t", 1), 3, "ok", payload={"v": 1})
    dup = ResultMessage(("t", 1), 3, "ok", payload={"v": 999})
    merged = merge_results([a, dup])
    assert merged[("t", 1)].payload["v"] == 1


def test_task_counting(desk2):
    # 2 plants x 2 scenarios -> 4 hydro tasks + 1 balancing per iteration
    cascade, scenarios = desk2
    n_tasks = cascade.n_plants * scenarios.n_scenarios + 1
    assert n_tasks == 5


def test_worker_pool_needs_positive_count():
    with pytest.raises(ValueError):
        WorkerPool(_ctx_factory, (0,), _square_task, workers=0)
