"""Process-pool fan-out/fan-in for one iteration's subproblem solves.

Messages are self-contained and replayable; results are reduced in task
order so traces do not depend on the worker count.  A failed task is
retried once before the round aborts.  ``workers=1`` runs everything
inline (debug mode) with identical results.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

log = logging.getLogger(__name__)


@dataclass
class TaskMessage:
    task_id: tuple            # ("hydro", n, w) | ("bal",) | ("lbh", n, w) | ("lbb",)
    iteration: int
    payload: dict = field(default_factory=dict)


@dataclass
class ResultMessage:
    task_id: tuple
    iteration: int
    status: str               # "ok" | "failed"
    payload: dict = field(default_factory=dict)
    error: str = ""
    wall_time: float = 0.0


class RoundFailed(RuntimeError):
    """A task failed twice; carries the partial results for diagnostics."""

    def __init__(self, message: str, results: list[ResultMessage]):
        super().__init__(message)
        self.results = results


# worker-process globals, set once by the initializer
_WORKER_CTX: Any = None
_WORKER_EXECUTE: Optional[Callable] = None


def _init_worker(ctx_factory, factory_args, execute):
    global _WORKER_CTX, _WORKER_EXECUTE
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    _WORKER_CTX = ctx_factory(*factory_args)
    _WORKER_EXECUTE = execute


def _run_task(task: TaskMessage) -> ResultMessage:
    try:
        return _WORKER_EXECUTE(_WORKER_CTX, task)
    except Exception as exc:  # crash containment: report, never propagate raw
        log.exception("task %s failed", task.task_id)
        return ResultMessage(task.task_id, task.iteration, "failed",
                             error=f"{type(exc).__name__}: {exc}")


class WorkerPool:
    """Coordinator-side handle on the solver processes.

    ``ctx_factory(*factory_args)`` runs once per worker and returns the
    context (built subproblems etc.); ``execute(ctx, task)`` must be a
    importable top-level callable.
    """

    def __init__(self, ctx_factory: Callable, factory_args: tuple,
                 execute: Callable, workers: int = 1):
        if workers < 1:
            raise ValueError("worker pool needs at least one worker")
        self.workers = workers
        self._execute = execute
        self._pool = None
        if workers == 1:
            _init_worker(ctx_factory, factory_args, execute)
            self._ctx = _WORKER_CTX
        else:
            self._pool = mp.get_context("fork").Pool(
                processes=workers, initializer=_init_worker,
                initargs=(ctx_factory, factory_args, execute))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.terminate()
            self._pool.join()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _submit(self, tasks: list[TaskMessage]) -> list[ResultMessage]:
        if self._pool is None:
            return [_run_task(t) for t in tasks]
        return self._pool.map(_run_task, tasks)

    def dispatch_round(self, tasks: list[TaskMessage]) -> list[ResultMessage]:
        """Run all tasks; deterministic task-id order; at-most-once per
        (task, iteration); one retry for failures, then abort."""
        results = self._submit(tasks)
        merged = merge_results(results)
        failed = [t for t in tasks
                  if merged[t.task_id].status == "failed"]
        if failed:
            log.warning("retrying %d failed task(s): %s", len(failed),
                        [t.task_id for t in failed])
            retry = merge_results(self._submit(failed))
            for tid, r in retry.items():
                if r.status == "ok":
                    merged[tid] = r
        still_bad = [r for r in merged.values() if r.status == "failed"]
        ordered = [merged[t.task_id] for t in sorted(tasks, key=lambda t: t.task_id)]
        if still_bad:
            raise RoundFailed(
                "tasks failed after retry: " +
                "; ".join(f"{r.task_id}: {r.error}" for r in still_bad),
                ordered)
        return ordered


def merge_results(results: list[ResultMessage]) -> dict[tuple, ResultMessage]:
    """First result per (task, iteration) wins; duplicates are dropped."""
    merged: dict[tuple, ResultMessage] = {}
    for r in results:
        key = r.task_id
        if key in merged and merged[key].iteration == r.iteration:
            log.debug("duplicate result for %s@%d ignored", key, r.iteration)
            continue
        merged.setdefault(key, r)
    return merged
