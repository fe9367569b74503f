"""Process-pool replication runner.

The pool is owned here; the simulation and gradient modules only ever see a
``map``-like callable.  Results always come back in submission order, so
reductions over them are reproducible regardless of the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .bom import BomNetwork
from .simulator import CostParams
from .stochastic import ScenarioPath


def default_workers() -> int:
    try:
        cores = len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        cores = os.cpu_count() or 1
    return max(1, cores - 1)


class ReplicationPool:
    """``map`` over a process pool, or in-process when ``workers <= 1``."""

    def __init__(self, workers: int | None = None):
        self.workers = default_workers() if workers is None else max(1, int(workers))
        self._ex: ProcessPoolExecutor | None = None

    def __enter__(self) -> "ReplicationPool":
        if self.workers > 1:
            self._ex = ProcessPoolExecutor(max_workers=self.workers)
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._ex is not None:
            self._ex.shutdown(wait=True, cancel_futures=True)
            self._ex = None

    def map(self, fn: Callable, items: Iterable) -> list:
        items = list(items)
        if self._ex is None or len(items) <= 1:
            return [fn(x) for x in items]
        return list(self._ex.map(fn, items))

    __call__ = map


@dataclass
class BpJob:
    """BP gradient of one replication; picklable for worker processes."""

    net: BomNetwork
    policy: np.ndarray
    costs: CostParams
    init: np.ndarray | None = None

    def __call__(self, path: ScenarioPath) -> tuple[np.ndarray, float]:
        from .bp import grad_bp

        res = grad_bp(self.net, path, self.policy, self.costs, self.init)
        return res.grad, res.total_cost


def parallel_batch_gradient(
    pool: ReplicationPool,
    net: BomNetwork,
    paths: Sequence[ScenarioPath],
    policy: np.ndarray,
    costs: CostParams,
    init: np.ndarray | None = None,
):
    """One replication per task; reduced in path order."""
    from .bp import reduce_batch

    out = pool.map(BpJob(net, np.asarray(policy, float), costs, init), paths)
    grads = np.stack([g for g, _ in out])
    totals = np.array([c for _, c in out])
    return reduce_batch(grads, totals)
