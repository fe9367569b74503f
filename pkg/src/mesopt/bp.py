"""Reverse-mode (back-propagation) sample-path gradient.

A recording forward pass stores, per period, the branch indicators of the
order passes (``stack``), the on-hand/backlog split, the fill-rate partials,
the production fills with their selected component, and the lead times of
that period's releases.  Arrivals are traced backwards by gathering the
adjoint of the receiving period, so procurement and production releases
share one path (raw items release exactly what they order).  :func:`backward_sweep` then walks the
periods from ``T`` down to ``1`` using only the tape, ``A`` and the cost
vectors.  Work per period is a handful of sparse products, so the whole
gradient costs about as much as one simulation.

The module also hosts the central finite-difference oracle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Sequence

import numpy as np

from . import simulator
from .bom import BomNetwork
from .errors import DimensionMismatch, TapeCorrupt
from .simulator import (
    AdjacencyOps,
    CostParams,
    GradientResult,
    SimInputs,
    Trajectory,
    _HistoryRecorder,
    prepare,
    run_periods,
    trajectories_from,
)
from .stochastic import ScenarioPath

log = logging.getLogger(__name__)


@dataclass
class TapeRecord:
    """Everything the backward sweep needs from one period."""

    stack: list[np.ndarray]  # order-pass indicators, first pass first
    pos: np.ndarray  # I_temp > 0
    neg: np.ndarray  # I_temp < 0
    dr_dI0: np.ndarray
    dr_dIneed: np.ndarray
    k: np.ndarray
    arg: np.ndarray  # selected component, -1 when the item has none
    O_prime: np.ndarray
    lead: np.ndarray  # releases of this period arrive at t + lead


@dataclass
class Tape:
    periods: list[TapeRecord]
    n_l: int
    B: int
    n: int
    tied_init: bool
    totals: np.ndarray

    @property
    def T(self) -> int:
        return len(self.periods)

    def nbytes(self) -> int:
        total = 0
        for rec in self.periods:
            total += sum(a.nbytes for a in rec.stack)
            total += sum(
                a.nbytes for a in (rec.pos, rec.neg, rec.dr_dI0, rec.dr_dIneed, rec.k, rec.arg, rec.O_prime, rec.lead)
            )
        return total


class _TapeRecorder:
    def __init__(self, inp: SimInputs):
        self.periods: list[TapeRecord] = []
        self.totals = np.zeros(inp.B)

    def __call__(self, t: int, rec: SimpleNamespace) -> None:
        dr_dI0 = np.divide(1.0, rec.I_need, out=np.zeros_like(rec.I_need), where=rec.active)
        dr_dIneed = -rec.ratio * dr_dI0
        self.periods.append(
            TapeRecord(rec.order_ind, rec.pos, rec.neg, dr_dI0, dr_dIneed, rec.K, rec.arg, rec.O_prime, rec.lead)
        )
        self.totals = rec.C_sum

    def tape(self, inp: SimInputs) -> Tape:
        return Tape(self.periods, inp.ops.net.n_l, inp.B, inp.n, inp.tied_init, np.array(self.totals))


def record_forward(
    net: BomNetwork,
    path: ScenarioPath,
    policy: np.ndarray,
    costs: CostParams,
    init: np.ndarray | None = None,
    *,
    dense: bool = False,
) -> tuple[Trajectory, Tape]:
    inp = prepare(net, [path], policy, costs, init, dense)
    tape_rec = _TapeRecorder(inp)
    hist = _HistoryRecorder(inp)
    P = run_periods(inp, [hist, tape_rec])
    traj = trajectories_from(inp, hist, P, [path])[0]
    return traj, tape_rec.tape(inp)


def record_forward_batch(
    net: BomNetwork,
    paths: Sequence[ScenarioPath],
    policy: np.ndarray,
    costs: CostParams,
    init: np.ndarray | None = None,
    *,
    dense: bool = False,
) -> Tape:
    inp = prepare(net, paths, policy, costs, init, dense)
    tape_rec = _TapeRecorder(inp)
    run_periods(inp, [tape_rec])
    return tape_rec.tape(inp)


def _sweep(ops: AdjacencyOps, tape: Tape, h: np.ndarray, p: np.ndarray) -> np.ndarray:
    B, n, T, n_l = tape.B, tape.n, tape.T, tape.n_l
    zeros = np.zeros((B, n))
    g_S = zeros.copy()
    g_Itemp_next = zeros  # adjoint of I_temp_{t+1}
    g_IP_next = zeros  # adjoint of IP_t reaching it through IP_{t+1}
    g_Ob = zeros  # adjoint of Ob_t from O'_{t+1}
    # adjoint of I_temp per period; row T + 1 stays zero for arrivals past T
    G_Itemp = np.zeros((T + 2, B, n))
    bidx, iidx = np.indices((B, n))
    flat_b = np.arange(B)[:, None] * n

    for t in range(T, 0, -1):
        rec = tape.periods[t - 1]
        if rec.lead.shape != (B, n) or rec.lead.min() < 1:
            raise TapeCorrupt(f"period {t}: lead times missing or < 1")
        g_I = h + g_Itemp_next
        g_B = p - g_Itemp_next
        # releases of period t reach I_temp at their arrival period
        g_arrive = G_Itemp[np.minimum(t + rec.lead, T + 1), bidx, iidx]
        g_M = g_arrive - ops.dot(g_I) - g_Ob
        g_Op = g_Ob + g_M * rec.k

        valid = rec.arg >= 0
        target = (flat_b + rec.arg)[valid]
        g_r = np.bincount(target, (g_M * rec.O_prime)[valid], minlength=B * n).reshape(B, n)

        g_I0 = g_I + g_r * rec.dr_dI0
        g_need = g_r * rec.dr_dIneed
        g_Op = g_Op + ops.dot(g_need)
        g_Itemp = np.where(rec.pos, g_I0, np.where(rec.neg, -g_B, 0.0))
        G_Itemp[t] = g_Itemp

        g_O = g_Op + g_IP_next - ops.dot(g_IP_next)

        stack = list(rec.stack)
        if len(stack) != n_l:
            raise TapeCorrupt(f"period {t}: stack depth {len(stack)} != n_l={n_l}")
        g_IP = g_IP_next
        for _ in range(n_l - 1):
            ind = stack.pop()
            g_x = np.where(ind, -g_O, 0.0)
            g_S = g_S - g_x
            g_IP = g_IP + g_x
            g_O = -ops.dot(g_x)
        ind = stack.pop()
        g_x = np.where(ind, -g_O, 0.0)
        g_S = g_S - g_x
        g_IP = g_IP + g_x

        g_IP_next = g_IP
        g_Ob = g_Op
        g_Itemp_next = g_Itemp

    if tape.tied_init:
        # IP_0 = I_0 = S
        g_S = g_S + g_IP_next + g_Itemp_next
    return g_S


def backward_sweep(net: BomNetwork, tape: Tape, costs: CostParams, *, dense: bool = False) -> GradientResult:
    """Per-replication gradients from a recorded tape.

    The result's ``grad`` has shape ``(n,)`` for a single replication and
    ``(B, n)`` for a batch tape.
    """
    if tape.n != net.n or costs.n != net.n:
        raise DimensionMismatch("tape, network and costs disagree on n")
    g = _sweep(AdjacencyOps(net, dense), tape, costs.h, costs.p)
    if tape.B == 1:
        return GradientResult(g[0], "bp", float(tape.totals[0]))
    return GradientResult(g, "bp", float(np.mean(tape.totals)))


def grad_bp(
    net: BomNetwork,
    path: ScenarioPath,
    policy: np.ndarray,
    costs: CostParams,
    init: np.ndarray | None = None,
    *,
    dense: bool = False,
    keep_trajectory: bool = False,
) -> GradientResult:
    if keep_trajectory:
        traj, tape = record_forward(net, path, policy, costs, init, dense=dense)
    else:
        traj, tape = None, record_forward_batch(net, [path], policy, costs, init, dense=dense)
    log.debug("bp tape: T=%d n=%d n_l=%d bytes=%d", tape.T, tape.n, tape.n_l, tape.nbytes())
    res = backward_sweep(net, tape, costs, dense=dense)
    res.seed = path.seed
    res.trajectory = traj
    return res


@dataclass(frozen=True)
class BatchGradient:
    grad: np.ndarray  # mean over replications
    cost: float  # mean total cost
    grads: np.ndarray  # (B, n)
    totals: np.ndarray  # (B,)


def batch_gradient(
    net: BomNetwork,
    paths: Sequence[ScenarioPath],
    policy: np.ndarray,
    costs: CostParams,
    init: np.ndarray | None = None,
    *,
    dense: bool = False,
) -> BatchGradient:
    """Mini-batch gradient: mean of per-path BP gradients in path order."""
    tape = record_forward_batch(net, paths, policy, costs, init, dense=dense)
    grads = _sweep(AdjacencyOps(net, dense), tape, costs.h, costs.p)
    return reduce_batch(grads, tape.totals)


def reduce_batch(grads: np.ndarray, totals: np.ndarray) -> BatchGradient:
    acc = np.zeros(grads.shape[1])
    for g in grads:
        acc += g
    cost = 0.0
    for c in totals:
        cost += float(c)
    B = grads.shape[0]
    return BatchGradient(acc / B, cost / B, grads, np.asarray(totals))


def gradient_rel_diff(a: np.ndarray, b: np.ndarray, scale: float = 1.0) -> float:
    """``max|a - b|`` relative to the larger gradient, floored at ``scale``.

    The floor keeps a (numerically) zero gradient from turning round-off in
    cancelling terms into a large relative error; ``T * max(h)``, the value
    of holding one extra unit over the horizon, is the natural choice.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), scale)
    return float(np.max(np.abs(a - b), initial=0.0)) / denom


def gradient_scale(costs: CostParams, T: int) -> float:
    return max(T * float(np.max(costs.h, initial=0.0)), 1e-300)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def grad_fd(
    net: BomNetwork,
    path: ScenarioPath,
    policy: np.ndarray,
    costs: CostParams,
    init: np.ndarray | None = None,
    step: float | np.ndarray | None = None,
) -> GradientResult:
    """Central differences, one coordinate at a time, on the same path.

    Runs exactly ``2n`` simulations.  ``step`` defaults to
    ``1e-4 * (1 + S_i)``.  Coordinates with ``S_i < step_i`` fall back to a
    forward difference so the policy never goes negative.
    """
    S = simulator.check_policy(policy, net.n)
    n = net.n
    steps = 1e-4 * (1.0 + S) if step is None else np.broadcast_to(np.asarray(step, float), (n,))
    if np.any(steps <= 0):
        raise ValueError("finite-difference step must be > 0")
    grad = np.zeros(n)
    calls = 0
    for i in range(n):
        hi, lo = S.copy(), S.copy()
        central = S[i] >= steps[i]
        hi[i] += steps[i]
        if central:
            lo[i] -= steps[i]
        f_hi = simulator.simulate_totals(net, [path], hi, costs, init)[0]
        f_lo = simulator.simulate_totals(net, [path], lo, costs, init)[0]
        calls += 2
        log.debug("fd simulate calls for item %d (total %d)", i, calls)
        grad[i] = (f_hi - f_lo) / ((2.0 if central else 1.0) * steps[i])
    return GradientResult(grad, "fd", float("nan"), path.seed, sim_calls=calls)


# ---------------------------------------------------------------------------
# kink screening
# ---------------------------------------------------------------------------


# Gaps below this are structural ties (e.g. a binding component left with
# exactly zero stock), not kinks the policy can move across; the branch
# signature comparison covers them.
STRUCTURAL_TIE = 1e-9


def _gap(x: np.ndarray) -> float:
    a = np.abs(x)
    a = a[a > STRUCTURAL_TIE]
    return float(a.min()) if a.size else np.inf


class _BranchProbe:
    def __init__(self, S: np.ndarray):
        self.S = S
        self.margin = np.inf
        self.signature: list[bytes] = []

    def __call__(self, t: int, rec: SimpleNamespace) -> None:
        m = [_gap(rec.I_temp)]
        active_need = rec.I_need > 0
        if active_need.any():
            m.append(_gap(rec.ratio[active_need] - 1.0))
        self.margin = min(self.margin, *m)
        for ind in rec.order_ind:
            self.signature.append(np.packbits(ind).tobytes())
        self.signature.append(np.packbits(rec.pos).tobytes())
        self.signature.append(np.packbits(rec.neg).tobytes())
        self.signature.append(np.packbits(rec.active).tobytes())
        self.signature.append(rec.arg.tobytes())


def branch_report(
    net: BomNetwork,
    path: ScenarioPath,
    policy: np.ndarray,
    costs: CostParams,
    init: np.ndarray | None = None,
) -> tuple[float, bytes]:
    """Smallest distance of any branch input to its switching point, plus a
    signature of every branch taken (identical signatures at two policies
    mean no kink was crossed between them)."""
    inp = prepare(net, [path], policy, costs, init)
    probe = _BranchProbe(inp.S)
    order_gaps: list[float] = []
    ops, S = inp.ops, inp.S

    def order_hook(t: int, rec: SimpleNamespace) -> None:
        base = rec.IP - rec.D
        gaps = [_gap(base - S)]
        # the inputs of passes 2..n_l are reconstructed from the tape order
        O = np.where(rec.order_ind[0], 0.0 - (base - S), 0.0)
        for ind in rec.order_ind[1:]:
            x = base - ops.dot_T(O) - S
            gaps.append(_gap(x))
            O = np.where(ind, 0.0 - x, 0.0)
        order_gaps.append(min(gaps))
        up = rec.arg >= 0
        if up.any() and net.m:
            # gap between the smallest and second-smallest component fill rate
            vals = rec.r[:, net.up_idx]
            counts = net.up_count[net.has_upstream]
            starts = net.up_ptr[:-1][net.has_upstream]
            mins = np.repeat(rec.K[:, net.has_upstream], counts, axis=1)
            first = np.repeat(net.up_idx[np.minimum.reduceat(
                np.where(vals == mins, np.arange(vals.shape[1]), vals.shape[1]), starts, axis=1)], counts, axis=1)
            other = np.where(net.up_idx[None, :] == first, np.inf, vals)
            second = np.minimum.reduceat(other, starts, axis=1)
            need = (rec.K[:, net.has_upstream] < 1.0) & (rec.O_prime[:, net.has_upstream] > 0)
            if need.any():
                order_gaps.append(_gap((second - rec.K[:, net.has_upstream])[need]))

    run_periods(inp, [probe, order_hook])
    margin = min(probe.margin, min(order_gaps) if order_gaps else np.inf)
    return float(margin), b"".join(probe.signature)
