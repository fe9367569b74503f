"""Wall-clock scaling benchmarks.

Each cell times one variant at one size ``reps`` times and keeps the median;
the spread is reported as the median absolute deviation.  Slopes are
least-squares fits of ``log(median)`` against ``log(n)``.  A cell whose
dense working set would not fit in available memory (or that raises
``MemoryError``) is recorded as ``"/"`` and left out of the fit.
"""

from __future__ import annotations

import gc
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import config as cfgmod
from .bp import batch_gradient, grad_bp
from .ipa import grad_ipa
from .optimizer import default_start
from .runner import ReplicationPool, parallel_batch_gradient
from .simulator import simulate_totals
from .stochastic import batch_paths, sample_path

VARIANTS = ("sim-dense", "sim-sparse", "ipa-dense", "ipa-sparse", "bp-dense", "bp-sparse", "batch-10")
OOM = "/"


@dataclass
class BenchCase:
    inst: cfgmod.Instance
    policy: np.ndarray
    seed: int


def make_case(n: int, T: int, k: float, seed: int, layers: int = 5) -> BenchCase:
    raw = {
        "seed": int(seed),
        "T": int(T),
        "network": {"generate": {"n": int(n), "k": float(k), "topology": "dag", "layers": layers}},
    }
    inst = cfgmod.build_instance(cfgmod.resolve(raw))
    return BenchCase(inst, default_start(inst.net, inst.models), int(seed))


def available_bytes() -> int:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):  # pragma: no cover
        return 1 << 62


def working_set(variant: str, n: int, T: int) -> int:
    """Rough peak bytes for the dense parts of a variant."""
    if variant.startswith("ipa"):
        return 8 * n * n * 10
    if variant.endswith("dense"):
        return 8 * n * n * 2
    return 8 * n * T * 40


def _runner(variant: str, case: BenchCase, pool: ReplicationPool | None) -> Callable[[], object]:
    inst, S = case.inst, case.policy
    path = sample_path(inst.models.demand, inst.models.lead, inst.T, inst.n, case.seed)
    if variant in ("sim-dense", "sim-sparse"):
        dense = variant == "sim-dense"
        return lambda: simulate_totals(inst.net, [path], S, inst.costs, dense=dense)
    if variant in ("ipa-dense", "ipa-sparse"):
        dense = variant == "ipa-dense"
        return lambda: grad_ipa(inst.net, path, S, inst.costs, dense=dense, keep_trajectory=False)
    if variant in ("bp-dense", "bp-sparse"):
        dense = variant == "bp-dense"
        return lambda: grad_bp(inst.net, path, S, inst.costs, dense=dense)
    if variant == "batch-10":
        paths = batch_paths(inst.models, inst.T, inst.n, case.seed, 10)
        if pool is None or pool.workers <= 1:
            return lambda: batch_gradient(inst.net, paths, S, inst.costs)
        return lambda: parallel_batch_gradient(pool, inst.net, paths, S, inst.costs)
    raise ValueError(f"unknown variant {variant!r}")


def time_call(fn: Callable[[], object], reps: int, warmup: int = 1) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(reps):
        gc.collect()
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def mad(xs: Sequence[float]) -> float:
    a = np.asarray(xs)
    return float(np.median(np.abs(a - np.median(a))))


def fit_slope(sizes: Sequence[int], times: Sequence[float]) -> float | None:
    pts = [(n, t) for n, t in zip(sizes, times) if isinstance(t, float) and t > 0]
    if len(pts) < 3:
        return None
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class BenchmarkReport:
    T: int
    k: float
    reps: int
    workers: int
    cells: dict[str, dict[int, dict]] = field(default_factory=dict)

    def medians(self, variant: str) -> tuple[list[int], list]:
        row = self.cells.get(variant, {})
        sizes = sorted(row)
        return sizes, [row[n]["median"] for n in sizes]

    def slope(self, variant: str) -> float | None:
        return fit_slope(*self.medians(variant))

    def to_dict(self, with_times: bool = True) -> dict:
        variants = {}
        for v, row in self.cells.items():
            cells = []
            for n in sorted(row):
                c = dict(row[n], n=n)
                if not with_times:
                    c = {"n": n, "status": "oom" if c["median"] == OOM else "ok"}
                cells.append(c)
            variants[v] = {"cells": cells, "slope": self.slope(v) if with_times else None}
        return {"T": self.T, "k": self.k, "reps": self.reps, "workers": self.workers, "variants": variants}

    def to_csv_rows(self) -> list[list]:
        rows = [["variant", "n", "median_s", "mad_s", "reps"]]
        for v, row in self.cells.items():
            for n in sorted(row):
                c = row[n]
                rows.append([v, n, c["median"], c["mad"], len(c["times"])])
        return rows


def run_benchmark(
    sizes: Sequence[int],
    variants: Sequence[str],
    reps: int = 5,
    T: int = 100,
    k: float = 10.0,
    seed: int = 0,
    workers: int | None = 1,
    log: Callable[[str], None] | None = None,
) -> BenchmarkReport:
    if reps < 1:
        raise ValueError("reps must be >= 1")
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ValueError(f"unknown variants {bad}; choose from {VARIANTS}")
    sizes = sorted(int(n) for n in sizes)
    pool = ReplicationPool(workers) if "batch-10" in variants else None
    report = BenchmarkReport(T, k, reps, pool.workers if pool else 1)
    try:
        if pool is not None:
            pool.__enter__()
        for n in sizes:
            case = make_case(n, T, min(k, n - 1.5) if n > 2 else 0.0, seed)
            for v in variants:
                row = report.cells.setdefault(v, {})
                if working_set(v, n, T) > 0.8 * available_bytes():
                    row[n] = {"median": OOM, "mad": OOM, "times": []}
                    continue
                try:
                    times = time_call(_runner(v, case, pool), reps)
                except MemoryError:
                    row[n] = {"median": OOM, "mad": OOM, "times": []}
                    continue
                row[n] = {"median": float(np.median(times)), "mad": mad(times), "times": times}
                if log is not None:
                    log(f"{v:>10s} n={n:6d} median={row[n]['median']:.4g}s")
    finally:
        if pool is not None:
            pool.close()
    return report


def ratio(report: BenchmarkReport, slow: str, fast: str, n: int) -> float:
    a = report.cells[slow][n]["median"]
    b = report.cells[fast][n]["median"]
    if a == OOM or b == OOM:
        return math.nan
    return a / b
