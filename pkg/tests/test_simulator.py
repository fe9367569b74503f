from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mesopt.bom import BomNetwork
from mesopt.errors import DimensionMismatch, InvalidPolicy, OutOfRange
from mesopt.simulator import (
    CostParams,
    evaluate_policy,
    ip_definitional,
    simulate,
    simulate_totals,
    summarize,
)
from mesopt.stochastic import (
    ConstantLead,
    DeterministicDemand,
    NormalDemand,
    ScenarioModels,
    ScenarioPath,
    sample_path,
)

from oracles import TOPOLOGIES, naive_simulate, random_instance


def test_zero_everything_stays_zero():
    net = BomNetwork(3, [(0, 1, 1), (1, 2, 1)])
    path = sample_path(DeterministicDemand.zeros(5, 3), ConstantLead(1), 5, 3, 0)
    tr = simulate(net, path, np.zeros(3), CostParams(np.ones(3), np.ones(3)), np.zeros(3))
    for a in (tr.IP, tr.O, tr.I, tr.B_out, tr.Ob, tr.M):
        assert np.all(a == 0)
    assert tr.total_cost == 0


def test_single_item_hand_table():
    # d=5, l=1, S=10, I0=10, h=1, p=10: each period orders 5, receives the
    # previous order and ends with 5 on hand
    net = BomNetwork(1, [])
    path = ScenarioPath(np.full((3, 1), 5), np.ones((3, 1), int))
    tr = simulate(net, path, np.array([10.0]), CostParams([1.0], [10.0]), np.array([10.0]))
    assert tr.IP[1:, 0].tolist() == [10.0, 10.0, 10.0]
    assert tr.O[1:, 0].tolist() == [5.0, 5.0, 5.0]
    assert tr.I[1:, 0].tolist() == [5.0, 5.0, 5.0]
    assert tr.B_out[1:, 0].tolist() == [0.0, 0.0, 0.0]
    assert tr.C[1:].tolist() == [5.0, 5.0, 5.0]
    assert tr.total_cost == 15.0


def test_single_item_stockout_table():
    # l=2 with demand 8 against S=10: the pipeline is empty in period 2
    net = BomNetwork(1, [])
    path = ScenarioPath(np.full((3, 1), 8), np.full((3, 1), 2))
    tr = simulate(net, path, np.array([10.0]), CostParams([1.0], [10.0]), np.array([10.0]))
    assert tr.I[1:, 0].tolist() == [2.0, 0.0, 0.0]
    assert tr.B_out[1:, 0].tolist() == [0.0, 6.0, 6.0]
    assert tr.total_cost == 2.0 + 60.0 + 60.0


def test_chain_matches_loop_oracle():
    net = BomNetwork(3, [(0, 1, 1), (1, 2, 1)])
    rng = np.random.default_rng(2)
    demands = rng.integers(0, 9, size=(12, 3))
    leads = np.tile([2, 1, 3], (12, 1))
    path = ScenarioPath(demands, leads)
    S = np.array([30.0, 18.0, 12.0])
    h, p = np.array([1.0, 2.0, 3.0]), np.array([5.0, 10.0, 20.0])
    tr = simulate(net, path, S, CostParams(h, p), np.array([5.0, 5.0, 5.0]))
    ref = naive_simulate(3, net.arcs(), demands, leads, S, h, p, [5.0, 5.0, 5.0])
    for key, arr in (("IP", tr.IP), ("O", tr.O), ("I", tr.I), ("B_out", tr.B_out), ("Ob", tr.Ob), ("M", tr.M)):
        assert np.allclose(arr[1:], ref[key], atol=1e-9), key
    assert tr.total_cost == pytest.approx(ref["total"], abs=1e-8)


@pytest.mark.parametrize("topo", TOPOLOGIES)
def test_random_nets_match_loop_oracle(topo):
    rng = np.random.default_rng(hash(topo) % 1000)
    for _ in range(8):
        net, path, S, costs, init = random_instance(rng, topo, n_max=12, T_max=8)
        tr = simulate(net, path, S, costs, init)
        ref = naive_simulate(net.n, net.arcs(), path.demands, path.lead_times, S, costs.h, costs.p, init)
        assert np.allclose(tr.I[1:], ref["I"], atol=1e-8)
        assert np.allclose(tr.Ob[1:], ref["Ob"], atol=1e-8)
        assert tr.total_cost == pytest.approx(ref["total"], rel=1e-12, abs=1e-8)


def test_dense_and_batch_agree_with_sparse_single():
    rng = np.random.default_rng(8)
    net, path, S, costs, init = random_instance(rng, "shared", n_max=25)
    a = simulate(net, path, S, costs, init)
    b = simulate(net, path, S, costs, init, dense=True)
    assert np.allclose(a.C_sum, b.C_sum, rtol=1e-12)
    other = ScenarioPath(path.demands[::-1], path.lead_times)
    tot = simulate_totals(net, [path, other], S, costs, init)
    assert tot[0] == pytest.approx(a.total_cost, rel=1e-12)
    assert tot[1] == pytest.approx(simulate(net, other, S, costs, init).total_cost, rel=1e-12)


def test_ip_first_period_and_single_node():
    net = BomNetwork(1, [])
    path = ScenarioPath(np.array([[3], [4], [2]]), np.array([[2], [2], [2]]))
    tr = simulate(net, path, np.array([9.0]), CostParams([1.0], [2.0]), np.array([6.0]))
    assert ip_definitional(tr, net, 1, 0) == pytest.approx(6.0)
    for t in range(2, 4):
        on_order = tr.O[1:t, 0].sum() - tr.P[1:t, 0].sum()
        assert ip_definitional(tr, net, t, 0) == pytest.approx(tr.I[t - 1, 0] + on_order - tr.B_out[t - 1, 0])
    with pytest.raises(OutOfRange):
        ip_definitional(tr, net, 0, 0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), topo=st.sampled_from(TOPOLOGIES))
def test_recursive_ip_equals_definition(seed, topo):
    net, path, S, costs, init = random_instance(np.random.default_rng(seed), topo, n_max=15, T_max=8)
    tr = simulate(net, path, S, costs, init)
    for t in range(1, tr.T + 1):
        for i in range(net.n):
            assert abs(ip_definitional(tr, net, t, i) - tr.IP[t, i]) <= 1e-9


def test_evaluate_policy_trivia():
    net = BomNetwork(2, [(0, 1, 1)])
    models = ScenarioModels(NormalDemand([0.0, 10.0], [0.0, 3.0]), ConstantLead([1, 2]))
    costs = CostParams([1.0, 2.0], [5.0, 20.0])
    S = np.array([20.0, 30.0])
    one = evaluate_policy(net, models, S, costs, 10, [4])
    path = sample_path(models.demand, models.lead, 10, 2, 4)
    assert one.mean == pytest.approx(simulate(net, path, S, costs).total_cost)
    assert evaluate_policy(net, models, S, costs, 10, [4, 4]).stderr == 0.0
    assert summarize([1.0, 3.0], [0, 1]).mean == 2.0


def test_invalid_inputs():
    net = BomNetwork(2, [(0, 1, 1)])
    path = ScenarioPath(np.zeros((3, 2), int), np.ones((3, 2), int))
    costs = CostParams([1.0, 1.0], [1.0, 1.0])
    with pytest.raises(InvalidPolicy):
        simulate(net, path, np.array([-1.0, 1.0]), costs)
    with pytest.raises(DimensionMismatch):
        simulate(net, path, np.ones(3), costs)


def test_trajectory_csv(tmp_path):
    net = BomNetwork(2, [(0, 1, 1)], names=["comp", "prod"])
    path = ScenarioPath(np.array([[0, 2], [0, 3]]), np.ones((2, 2), int))
    tr = simulate(net, path, np.array([5.0, 5.0]), CostParams([1.0, 1.0], [1.0, 1.0]))
    tr.write_csv(tmp_path / "t.csv", net.names)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 2 and lines[1].startswith("1,comp,")
