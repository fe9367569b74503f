from __future__ import annotations

import math

import numpy as np
import pytest

from mesopt.benchmark import OOM, BenchmarkReport, fit_slope, make_case, ratio, run_benchmark
from mesopt.bp import batch_gradient
from mesopt.runner import ReplicationPool, default_workers, parallel_batch_gradient
from mesopt.stochastic import batch_paths


def test_default_workers_at_least_one():
    assert default_workers() >= 1


def test_parallel_batch_matches_serial():
    case = make_case(40, 10, 2.0, 1)
    inst = case.inst
    paths = batch_paths(inst.models, inst.T, inst.n, 3, 4)
    ref = batch_gradient(inst.net, paths, case.policy, inst.costs)
    with ReplicationPool(2) as pool:
        par = parallel_batch_gradient(pool, inst.net, paths, case.policy, inst.costs)
    assert np.allclose(par.grad, ref.grad, rtol=1e-12, atol=1e-12)
    assert par.cost == pytest.approx(ref.cost, rel=1e-12)


def test_fit_slope_exact_power_law():
    sizes = [10, 20, 40, 80]
    assert fit_slope(sizes, [3.0 * n**2 for n in sizes]) == pytest.approx(2.0)
    assert fit_slope([10, 20], [1.0, 2.0]) is None
    assert fit_slope([10, 20, 40], [1.0, OOM, 4.0]) is None


def test_small_benchmark_report():
    rep = run_benchmark([30, 60, 120], ["sim-sparse", "bp-sparse"], reps=2, T=5, k=2.0)
    assert set(rep.cells) == {"sim-sparse", "bp-sparse"}
    for v in rep.cells:
        sizes, med = rep.medians(v)
        assert sizes == [30, 60, 120] and all(m > 0 for m in med)
        assert rep.slope(v) is not None
    rows = rep.to_csv_rows()
    assert rows[0][0] == "variant" and len(rows) == 1 + 6
    assert ratio(rep, "bp-sparse", "sim-sparse", 30) > 0


def test_oom_cell_recorded():
    rep = BenchmarkReport(T=5, k=2.0, reps=1, workers=1)
    rep.cells["ipa-dense"] = {100: {"median": 0.1, "mad": 0.0, "times": [0.1]},
                              200: {"median": OOM, "mad": OOM, "times": []}}
    rep.cells["sim-sparse"] = {n: {"median": 0.01, "mad": 0.0, "times": [0.01]} for n in (100, 200)}
    assert ratio(rep, "ipa-dense", "sim-sparse", 100) == pytest.approx(10.0)
    assert math.isnan(ratio(rep, "ipa-dense", "sim-sparse", 200))
    assert rep.to_dict()["variants"]["ipa-dense"]["cells"][1]["median"] == OOM
    with pytest.raises(ValueError):
        run_benchmark([10, 20, 30], ["nope"])
