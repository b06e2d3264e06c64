"""Fixed pool of workers for per-group subproblem batches.

Tasks must be pure with respect to shared state: they read an immutable
snapshot and write only their own result slot.  Results are assembled by
task position regardless of completion order, so downstream reductions are
bit-stable for any worker count; ``deterministic`` costs nothing and is
always honored for arithmetic.

The calling thread acts as worker 0 and executes its own share of every
batch; only the remaining workers are separate threads.  That keeps the
single-worker configuration free of scheduler handoffs while multi-worker
batches overlap the caller's work with the helpers'.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

__all__ = ["BatchPlan", "BatchTaskError", "WorkerPool", "WorkerStats"]


class BatchTaskError(RuntimeError):
    """A task raised; carries the failing group id."""

    def __init__(self, group_id, cause):
        super().__init__(f"task for group {group_id} failed: {cause!r}")
        self.group_id = group_id


@dataclass
class BatchPlan:
    """A batch of group ids plus the execution policy for them."""

    tasks: Sequence[int]
    mode: str = "static_block"  # or "work_stealing"
    workers: Optional[int] = None  # default: all pool workers
    deterministic: bool = True

    def __post_init__(self):
        tasks = list(self.tasks)
        if len(set(tasks)) != len(tasks):
            raise ValueError("every group id must appear exactly once in a batch")
        if self.mode not in ("static_block", "work_stealing"):
            raise ValueError(f"unknown batch mode {self.mode!r}")
        self.tasks = tasks


@dataclass
class WorkerStats:
    tasks: int = 0
    busy_s: float = 0.0


def _static_ranges(n_tasks: int, workers: int):
    """Contiguous nearly-equal chunks, one per worker."""
    base, rem = divmod(n_tasks, workers)
    ranges = []
    start = 0
    for w in range(workers):
        size = base + (1 if w < rem else 0)
        ranges.append((start, start + size))
        start += size
    return ranges


class _Batch:
    __slots__ = ("id", "tasks", "fn", "mode", "workers", "results", "error",
                 "next_idx", "idx_lock", "helpers_left", "ranges")

    def __init__(self, batch_id, tasks, fn, mode, workers):
        self.id = batch_id
        self.tasks = tasks
        self.fn = fn
        self.mode = mode
        self.workers = workers
        self.results = [None] * len(tasks)
        self.error = None  # (group_id, exception)
        self.next_idx = 0
        self.idx_lock = threading.Lock()
        self.helpers_left = workers - 1
        self.ranges = _static_ranges(len(tasks), workers) if mode == "static_block" else None


class WorkerPool:
    """Owns worker threads for the engine's lifetime; fork-join batches."""

    def __init__(self, workers: Optional[int] = None, mode: str = "static_block"):
        self.workers = max(1, int(workers) if workers else (os.cpu_count() or 1))
        self.mode = mode
        self._cond = threading.Condition()
        self._batch: Optional[_Batch] = None
        self._batch_counter = 0
        self._stop = False
        self._stats = [WorkerStats() for _ in range(self.workers)]
        self._helpers = [
            threading.Thread(target=self._helper_loop, args=(w,), daemon=True, name=f"sepalloc-worker-{w}")
            for w in range(1, self.workers)
        ]
        for t in self._helpers:
            t.start()

    # -- task execution -------------------------------------------------

    def _take_index(self, batch: _Batch, wid: int, cursor: int):
        if batch.mode == "static_block":
            lo, hi = batch.ranges[wid]
            idx = lo + cursor
            return idx if idx < hi else None
        with batch.idx_lock:
            if batch.next_idx >= len(batch.tasks):
                return None
            idx = batch.next_idx
            batch.next_idx += 1
            return idx

    def _work(self, batch: _Batch, wid: int):
        stats = self._stats[wid]
        cursor = 0
        while batch.error is None:
            idx = self._take_index(batch, wid, cursor)
            cursor += 1
            if idx is None:
                break
            gid = batch.tasks[idx]
            t0 = time.perf_counter()
            try:
                batch.results[idx] = batch.fn(gid)
            except BaseException as exc:  # propagate with the group id
                batch.error = (gid, exc)
            finally:
                stats.busy_s += time.perf_counter() - t0
                stats.tasks += 1

    def _helper_loop(self, wid: int):
        seen = 0
        while True:
            with self._cond:
                while not self._stop and (self._batch is None or self._batch.id == seen):
                    self._cond.wait()
                if self._stop:
                    return
                batch = self._batch
                seen = batch.id
                if wid >= batch.workers:
                    continue  # not participating in this batch
            self._work(batch, wid)
            with self._cond:
                batch.helpers_left -= 1
                if batch.helpers_left == 0:
                    self._cond.notify_all()

    # -- caller side ---------------------------------------------------

    def run_batch(self, plan: BatchPlan, fn: Callable):
        """Run fn(group_id) for every task; results in task order.

        The caller executes worker 0's share in place.
        """
        if self._stop:
            raise RuntimeError("pool is closed")
        if not plan.tasks:
            return []
        participants = min(plan.workers or self.workers, self.workers)
        self._batch_counter += 1
        batch = _Batch(self._batch_counter, list(plan.tasks), fn, plan.mode, participants)
        if participants > 1:
            with self._cond:
                self._batch = batch
                self._cond.notify_all()
        self._work(batch, 0)
        if participants > 1:
            with self._cond:
                while batch.helpers_left > 0:
                    self._cond.wait()
                self._batch = None
        if batch.error is not None:
            gid, exc = batch.error
            raise BatchTaskError(gid, exc) from exc
        return batch.results

    def pool_stats(self) -> list:
        return [WorkerStats(s.tasks, s.busy_s) for s in self._stats]

    def reset_stats(self) -> None:
        for s in self._stats:
            s.tasks = 0
            s.busy_s = 0.0

    def close(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify_all()
        for t in self._helpers:
            t.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
