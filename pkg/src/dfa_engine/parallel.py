"""Concurrent computation of DFA updates.

Once the top error is known, every region's update depends only on its own
slice of the forward trace, its fixed feedback matrix and the shared error.
Each region therefore becomes an independent task: tasks read immutable
shared inputs, write disjoint gradient entries, and a join collects them.
Worker threads are enough because numpy releases the GIL inside BLAS calls.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .network import ForwardTrace, Network, check_shapes
from .tensor import ParameterError
from .training import GradientSet, region_update


class UnsupportedModeError(ValueError):
    pass


class EngineError(RuntimeError):
    def __init__(self, message: str, timing: dict):
        super().__init__(message)
        self.timing = timing


@dataclass(frozen=True)
class UpdateTask:
    index: int
    region: str
    reads: frozenset
    writes: frozenset


@dataclass
class UpdatePlan:
    net: Network
    trace: ForwardTrace
    delta_ay: np.ndarray
    tasks: list[UpdateTask] = field(default_factory=list)

    def check_disjoint(self) -> None:
        for i, a in enumerate(self.tasks):
            for b in self.tasks[i + 1:]:
                if a.writes & b.writes:
                    raise ParameterError(f"tasks {a.region!r} and {b.region!r} write the same parameters")
        writes = frozenset().union(*(t.writes for t in self.tasks))
        for t in self.tasks:
            if t.reads & writes:
                raise ParameterError(f"task {t.region!r} reads a location another task writes")


@dataclass
class ExecutionResult:
    grads: GradientSet
    timing: dict

    def timing_json(self) -> str:
        return json.dumps(self.timing, indent=2, sort_keys=True)


def plan_updates(net: Network, trace: ForwardTrace, delta_ay: np.ndarray) -> UpdatePlan:
    if net.mode == "bp":
        raise UnsupportedModeError("backpropagation updates are sequential; no independent tasks to plan")
    check_shapes(net, trace)
    indices = range(len(net.regions)) if net.mode == "dfa" else [len(net.regions) - 1]
    tasks = []
    for idx in indices:
        region = net.regions[idx]
        reads = frozenset({f"trace:{region.name}", f"feedback:{region.name}", "delta_ay"})
        writes = frozenset(f"grad:{p}" for p in region.params())
        tasks.append(UpdateTask(idx, region.name, reads, writes))
    plan = UpdatePlan(net, trace, delta_ay, tasks)
    plan.check_disjoint()
    return plan


def _run_task(plan: UpdatePlan, task: UpdateTask):
    t0 = time.perf_counter()
    grads = region_update(plan.net, plan.trace, plan.delta_ay, task.index)
    return grads, time.perf_counter() - t0


def execute_concurrent(plan: UpdatePlan, workers: int, order: list[int] | None = None) -> ExecutionResult:
    """Run every task on a pool of ``workers`` threads and join.

    ``order`` permutes the submission order; the merged result is keyed by
    task, so it never depends on completion order.
    """
    if workers < 1:
        raise ParameterError(f"workers must be >= 1, got {workers}")
    tasks = plan.tasks if order is None else [plan.tasks[i] for i in order]
    per_task: dict[str, float] = {}
    slots: dict[int, GradientSet] = {}
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {t.index: (t, pool.submit(_run_task, plan, t)) for t in tasks}
        failures = []
        for idx, (task, fut) in futures.items():
            try:
                grads, dt = fut.result()
            except Exception as exc:  # report which task broke, keep timings gathered so far
                failures.append(f"{task.region}: {exc!r}")
                continue
            slots[idx] = grads
            per_task[task.region] = dt
    wall = time.perf_counter() - t0
    timing = {
        "workers": workers,
        "wall_seconds": wall,
        "per_task_seconds": per_task,
        "critical_path_seconds": max(per_task.values(), default=0.0),
        "sum_task_seconds": sum(per_task.values()),
    }
    if failures:
        timing["failures"] = failures
        raise EngineError(f"{len(failures)} update task(s) failed: {failures}", timing)
    merged: GradientSet = {}
    for idx in sorted(slots):
        merged.update(slots[idx])
    return ExecutionResult(merged, timing)


def benchmark(net: Network, trace: ForwardTrace, delta_ay: np.ndarray, workers_list=(1, 2, 4),
              repeats: int = 3) -> dict:
    """Timing report comparing sequential DFA against the pool for several worker counts."""
    from .training import backward_dfa

    seq_times = []
    reference = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        reference = backward_dfa(net, trace, delta_ay)
        seq_times.append(time.perf_counter() - t0)
    sequential = min(seq_times)
    report = {"sequential_seconds": sequential, "tasks": len(net.regions), "runs": []}
    for w in workers_list:
        best = None
        for _ in range(repeats):
            res = execute_concurrent(plan_updates(net, trace, delta_ay), w)
            if best is None or res.timing["wall_seconds"] < best.timing["wall_seconds"]:
                best = res
        max_diff = max(float(np.max(np.abs(best.grads[k] - reference[k]))) for k in reference)
        run = dict(best.timing)
        run["speedup"] = sequential / best.timing["wall_seconds"]
        run["max_abs_diff_vs_sequential"] = max_diff
        report["runs"].append(run)
    return report
