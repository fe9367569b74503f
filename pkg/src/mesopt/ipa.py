"""Forward-mode (IPA) sample-path gradient of the cumulative cost.

Dense ``n × n`` Jacobians ride along with the simulation.  This is the slow,
trusted reference; use :mod:`mesopt.bp` for anything large.
"""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from .bom import BomNetwork
from .errors import DimensionMismatch, NonFiniteJacobian
from .simulator import (
    CostParams,
    GradientResult,
    SimInputs,
    _HistoryRecorder,
    prepare,
    run_periods,
    trajectories_from,
)
from .stochastic import ScenarioPath


class _JacobianPropagator:
    def __init__(self, inp: SimInputs):
        if inp.B != 1:
            raise DimensionMismatch("IPA propagates a single replication")
        n = inp.n
        self.ops = inp.ops
        self.h, self.p = inp.h, inp.p
        self.T = inp.T
        self.E = np.eye(n)
        start = self.E if inp.tied_init else np.zeros((n, n))
        self.J_IP = start.copy()
        self.J_I = start.copy()
        self.J_O = np.zeros((n, n))
        self.J_B = np.zeros((n, n))
        self.J_Ob = np.zeros((n, n))
        self.J_P: dict[int, np.ndarray] = {}
        self.grad = np.zeros(n)
        self.total = 0.0

    def __call__(self, t: int, rec: SimpleNamespace) -> None:
        ops, E = self.ops, self.E
        J_IP = self.J_IP
        J_IP += self.J_O
        J_IP -= ops.mat_left(self.J_O)
        # order passes: O = (S - IP_temp) on ordering rows, IP_temp = IP - A O
        E_minus_IP = np.subtract(E, J_IP)
        ind = rec.order_ind
        J_O = E_minus_IP.copy()
        J_O[~ind[0][0]] = 0.0
        for k in range(1, len(ind)):
            J_O = ops.mat_left(J_O)
            J_O += E_minus_IP
            J_O[~ind[k][0]] = 0.0
        self.J_O = J_O

        J_Itemp = self.J_I
        J_Itemp -= self.J_B
        J_P = self.J_P.pop(t, None)
        if J_P is not None:
            J_Itemp += J_P
        neg = rec.neg[0]
        J_B = self.J_B
        J_B.fill(0.0)
        J_B[neg] = -J_Itemp[neg]
        J_I0 = J_Itemp
        J_I0[~rec.pos[0]] = 0.0

        J_Op = self.J_Ob
        J_Op += J_O
        # fill-rate rows are nonzero only where the ratio is below one
        act = np.flatnonzero(rec.active[0])
        K = rec.K[0]
        J_M = K[:, None] * J_Op
        if act.size:
            J_need = ops.mat_left(J_Op)
            inv = 1.0 / rec.I_need[0][act]
            J_r_act = inv[:, None] * (J_I0[act] - rec.ratio[0][act][:, None] * J_need[act])
            slot = np.full(self.J_O.shape[0], -1)
            slot[act] = np.arange(act.size)
            arg = rec.arg[0]
            src = np.where(arg >= 0, slot[np.maximum(arg, 0)], -1)
            rows = np.flatnonzero(src >= 0)
            J_M[rows] += rec.O_prime[0][rows][:, None] * J_r_act[src[rows]]
        J_I0 -= ops.mat_left(J_M)
        self.J_I = J_I0
        J_Op -= J_M
        self.J_Ob = J_Op

        arrive = t + rec.lead[0]
        for s in np.unique(arrive[arrive <= self.T]).tolist():
            items = np.flatnonzero(arrive == s)
            buf = self.J_P.get(s)
            if buf is None:
                buf = self.J_P[s] = np.zeros_like(J_M)
            buf[items] += J_M[items]

        self.grad += self.h @ self.J_I
        self.grad += self.p @ J_B
        self.total = float(rec.C_sum[0])
        if not np.isfinite(self.grad).all():
            raise NonFiniteJacobian(f"non-finite Jacobian in period {t}")


def grad_ipa(
    net: BomNetwork,
    path: ScenarioPath,
    policy: np.ndarray,
    costs: CostParams,
    init: np.ndarray | None = None,
    *,
    dense: bool = True,
    keep_trajectory: bool = True,
) -> GradientResult:
    """Gradient of the total cost with respect to the base-stock levels.

    ``dense=False`` multiplies Jacobians by the sparse ``A`` (``O(m n)`` per
    product instead of ``O(n^3)``).
    """
    inp = prepare(net, [path], policy, costs, init, dense)
    prop = _JacobianPropagator(inp)
    hooks = [prop]
    hist = None
    if keep_trajectory:
        hist = _HistoryRecorder(inp)
        hooks.append(hist)
    P = run_periods(inp, hooks)
    traj = trajectories_from(inp, hist, P, [path])[0] if hist is not None else None
    return GradientResult(prop.grad, "ipa", prop.total, path.seed, traj)
