from __future__ import annotations

import json

import numpy as np
import pytest

from mesopt.bom import BomNetwork
from mesopt.bp import grad_bp
from mesopt.errors import ConfigError, Diverged
from mesopt.optimizer import (
    BatchOracle,
    OptConfig,
    epoch_line,
    fista,
    prox_l1,
    read_epochs,
    run_method,
    ssgd,
    two_stage,
)
from mesopt.simulator import CostParams, simulate_totals
from mesopt.stochastic import (
    ConstantLead,
    DeterministicDemand,
    NormalDemand,
    ScenarioModels,
    ScenarioPath,
    batch_paths,
)


def single_node(T=20, d=10):
    net = BomNetwork(1, [])
    models = ScenarioModels(DeterministicDemand.constant(T, [d]), ConstantLead([1]))
    return net, models, CostParams([1.0], [10.0])


def small_net(T=12):
    net = BomNetwork(4, [(0, 2, 1), (1, 2, 1), (2, 3, 1)])
    models = ScenarioModels(NormalDemand([0, 0, 0, 20.0], [0, 0, 0, 4.0]), ConstantLead([2, 1, 1, 1]))
    return net, models, CostParams([1.0, 1.0, 2.0, 4.0], [10.0, 10.0, 20.0, 40.0]), T


def test_prox_cases():
    assert prox_l1(np.array([3.0]), 1.0).tolist() == [2.0]
    assert prox_l1(np.array([-0.5]), 1.0).tolist() == [0.0]
    x = np.array([1.5, -2.0, 0.0])
    assert prox_l1(x, 0.0, nonneg=False).tolist() == x.tolist()
    assert prox_l1(np.array([-3.0]), 1.0, nonneg=False).tolist() == [-2.0]
    with pytest.raises(ConfigError):
        prox_l1(x, -1.0)


def test_config_validation_and_roundtrip():
    with pytest.raises(ConfigError):
        OptConfig(lam=-1.0)
    with pytest.raises(ConfigError):
        OptConfig(r=2.0)
    with pytest.raises(ConfigError):
        OptConfig.from_dict({"bogus": 1})
    cfg = OptConfig(lam=3.0, batch=4)
    assert OptConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.to_dict()["lambda"] == 3.0


def test_single_node_reaches_grid_argmin():
    T = 20
    net, models, costs = single_node(T)
    paths = batch_paths(models, T, 1, 0, 1)
    grid = np.linspace(0.0, 40.0, 401)
    vals = [simulate_totals(net, paths, np.array([s]), costs)[0] for s in grid]
    best = grid[int(np.argmin(vals))]
    for method in (ssgd, fista):
        rec = method(net, models, costs, T, OptConfig(batch=2, max_epochs=300), 1, S0=np.array([5.0]))
        assert abs(rec.S[0] - best) <= 0.05 * best


def test_zero_demand_drives_levels_to_zero():
    T = 10
    net = BomNetwork(2, [(0, 1, 1)])
    models = ScenarioModels(DeterministicDemand.zeros(T, 2), ConstantLead([1, 1]))
    costs = CostParams([1.0, 2.0], [5.0, 5.0])
    rec = ssgd(net, models, costs, T, OptConfig(batch=1, max_epochs=200), 0, S0=np.array([8.0, 4.0]))
    assert np.all(rec.S == 0)


def test_same_seed_same_record():
    net, models, costs, T = small_net()
    cfg = OptConfig(lam=5.0, batch=3, max_epochs=6)
    a = fista(net, models, costs, T, cfg, 11)
    b = fista(net, models, costs, T, cfg, 11)
    assert a.epochs == b.epochs and np.array_equal(a.S, b.S)


def test_large_lambda_kills_every_level():
    net, models, costs, T = small_net()
    models = ScenarioModels(DeterministicDemand.constant(T, [0, 0, 0, 20]), models.lead)
    oracle = BatchOracle(net, models, costs, T, 2)
    g0, _ = oracle(np.zeros(4), 0)
    lam = float(np.max(np.abs(g0)))
    cfg = OptConfig(lam=lam, batch=2, max_epochs=15, step=0.05)
    rec = run_method("fista", oracle, np.zeros(4), cfg, 0, cfg.step)
    assert np.all(rec.S == 0)


def test_fista_two_step_hand_trace():
    # frozen batch: the oracle ignores its seed
    T = 6
    net = BomNetwork(1, [])
    path = ScenarioPath(np.array([[4], [7], [5], [6], [3], [8]]), np.ones((6, 1), int))
    costs = CostParams([1.0], [6.0])

    def oracle(S, seed):
        r = grad_bp(net, path, S, costs)
        return r.grad, r.total_cost

    t0, r = 0.01, 3.0
    cfg = OptConfig(step=t0, schedule="sqrt", r=r, max_epochs=2)
    x0 = np.array([2.0])
    rec = run_method("fista", oracle, x0, cfg, 0, t0)

    y = x0
    t1 = t0
    x1 = np.maximum(y - t1 * oracle(y, 0)[0], 0.0)  # y0 = x0, prox with lam = 0
    y1 = np.maximum(x1 + (1 / (1 + r)) * (x1 - x0), 0.0)
    t2 = t0 / np.sqrt(2.0)
    x2 = np.maximum(y1 - t2 * oracle(y1, 0)[0], 0.0)
    assert rec.epochs[0]["S"] == x1.tolist()
    assert rec.epochs[0]["y"] == y1.tolist()
    assert rec.S.tolist() == x2.tolist()


def test_two_stage_degenerate_support_and_mask():
    net, models, costs, T = small_net()
    res = two_stage(net, models, costs, T, OptConfig(lam=0.0, batch=2, max_epochs=5, eps_zero=1e-9), 3)
    assert np.array_equal(res.support, res.stage1.S > 1e-9)
    assert np.all(res.policy[~res.support] == 0)
    res = two_stage(net, models, costs, T, OptConfig(lam=200.0, batch=2, max_epochs=8), 3)
    assert np.all(res.policy[~res.support] == 0)
    assert res.stage2.method == "sgd" and res.stage2.config["lambda"] == 0.0


def test_resume_from_truncated_log(tmp_path):
    net, models, costs, T = small_net()
    cfg = OptConfig(lam=2.0, batch=2, max_epochs=7, step=0.02)
    oracle = BatchOracle(net, models, costs, T, cfg.batch)
    full = run_method("fista", oracle, np.full(4, 30.0), cfg, 5, cfg.step)
    log = tmp_path / "epochs.jsonl"
    text = "".join(epoch_line(e) for e in full.epochs[:4]) + epoch_line(full.epochs[4])[:25]
    log.write_text(text)
    hist = read_epochs(log)
    assert [e["epoch"] for e in hist] == [1, 2, 3, 4]
    resumed = run_method("fista", oracle, np.full(4, 30.0), cfg, 5, cfg.step, history=hist)
    assert resumed.epochs[4]["epoch"] == 5
    assert resumed.epochs == full.epochs


def test_epoch_gap_is_an_error(tmp_path):
    log = tmp_path / "e.jsonl"
    log.write_text(json.dumps({"epoch": 1}) + "\n" + json.dumps({"epoch": 3}) + "\n")
    with pytest.raises(ConfigError):
        read_epochs(log)


def test_divergence_detected():
    net, models, costs, T = small_net()
    oracle = BatchOracle(net, models, costs, T, 2)
    cfg = OptConfig(step=1e4, schedule="constant", max_epochs=30, diverge_factor=10.0)
    with pytest.raises(Diverged):
        run_method("ssgd", oracle, np.full(4, 30.0), cfg, 0, cfg.step)
