"""Tensorized periodic-review base-stock simulation on a BOM network.

All state is carried as ``(B, n)`` arrays so that a batch of ``B`` scenario
paths advances through one set of vector operations.  A single replication is
the ``B = 1`` case.

Branch conventions (shared with the gradient code):

* an order is placed only when ``x - S < 0`` (ties take the zero branch);
* ``I0 = Itemp`` when ``Itemp > 0``, otherwise the shortfall is backlogged;
  at ``Itemp == 0`` both ``I0`` and the backlog sit on their zero branch, so
  neither carries a derivative;
* the fill rate is ``min(I0 / Ineed, 1)`` with ``r = 1`` when ``Ineed == 0``,
  and its derivative is taken only when ``I0 / Ineed < 1`` strictly;
* the production fill ``k_i`` is the smallest fill rate among the components
  of ``i``; ties credit the smallest component index.  Items without
  components use ``k_i = 1`` so raw-material procurement is released as
  ``M = O`` and their production backlog stays zero.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace
from typing import Callable, Sequence

import numpy as np

try:  # the compiled CSR kernel behind ``csr_matrix @ vector``, minus the dispatch
    from scipy.sparse._sparsetools import csr_matvec as _csr_matvec
except ImportError:  # pragma: no cover - layout differs across scipy versions
    _csr_matvec = None

from .bom import BomNetwork
from .errors import DimensionMismatch, InvalidPolicy, NonFiniteState, OutOfRange
from .stochastic import ScenarioModels, ScenarioPath, sample_path


@dataclass(frozen=True)
class CostParams:
    h: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        h = np.asarray(self.h, dtype=np.float64)
        p = np.broadcast_to(np.asarray(self.p, dtype=np.float64), h.shape).copy()
        if h.ndim != 1:
            raise DimensionMismatch("holding costs must be a vector")
        if np.any(h < 0) or np.any(p < 0):
            raise InvalidPolicy("costs must be nonnegative")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.h.size

    def to_dict(self) -> dict:
        return {"h": self.h.tolist(), "p": self.p.tolist()}


def check_policy(S: np.ndarray, n: int) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (n,):
        raise DimensionMismatch(f"policy has shape {S.shape}, expected ({n},)")
    if not np.all(np.isfinite(S)):
        raise InvalidPolicy("base-stock levels must be finite")
    if np.any(S < 0):
        raise InvalidPolicy(f"negative base-stock level at item {int(np.flatnonzero(S < 0)[0])}")
    return S


def policy_hash(S: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(S, dtype="<f8").tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# adjacency kernels
# ---------------------------------------------------------------------------


class AdjacencyOps:
    """Products with ``A`` for row-stacked vectors, sparse or dense."""

    def __init__(self, net: BomNetwork, dense: bool = False):
        net.require_valid()
        self.net = net
        self.dense = dense
        self.n = net.n
        self._A = net.dense if dense else net.A
        self._AT = net.dense_T if dense else net.AT
        self.up_idx = net.up_idx
        self.has_up = net.has_upstream
        self._starts = net.up_ptr[:-1][self.has_up]
        self._counts = net.up_count[self.has_up]
        self._positions = np.arange(self.up_idx.size)

    def _apply(self, M, X: np.ndarray) -> np.ndarray:
        if not self.dense and _csr_matvec is not None and X.shape[0] == 1:
            # single replication: per-call overhead of the sparse ``@`` is
            # comparable to the O(m) work at desk-scale n
            y = np.zeros((1, self.n))
            x = np.ascontiguousarray(X[0], dtype=np.float64)
            _csr_matvec(self.n, self.n, M.indptr, M.indices, M.data, x, y[0])
            return y
        return (M @ X.T).T

    def dot_T(self, X: np.ndarray) -> np.ndarray:
        """``X · A^T``: internal demand generated on components."""
        return self._apply(self._A, X)

    def dot(self, Y: np.ndarray) -> np.ndarray:
        """``Y · A``: pull adjoints from components back to consumers."""
        return self._apply(self._AT, Y)

    def mat_left(self, J: np.ndarray) -> np.ndarray:
        """``A × J`` for an ``n × n`` Jacobian."""
        return np.asarray(self._A @ J)

    def upstream_min(self, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        K = np.ones_like(R)
        arg = np.full(R.shape, -1, dtype=np.int64)
        if self.up_idx.size == 0:
            return K, arg
        vals = R[:, self.up_idx]
        mins = np.minimum.reduceat(vals, self._starts, axis=1)
        hit = vals == np.repeat(mins, self._counts, axis=1)
        pos = np.where(hit, self._positions, self._positions.size)
        first = np.minimum.reduceat(pos, self._starts, axis=1)
        K[:, self.has_up] = mins
        arg[:, self.has_up] = self.up_idx[first]
        return K, arg


# ---------------------------------------------------------------------------
# core period loop
# ---------------------------------------------------------------------------


@dataclass
class SimInputs:
    ops: AdjacencyOps
    demands: np.ndarray  # (B, T, n)
    leads: np.ndarray  # (B, T, n)
    S: np.ndarray
    h: np.ndarray
    p: np.ndarray
    init: np.ndarray  # (B, n)
    tied_init: bool

    @property
    def B(self) -> int:
        return self.demands.shape[0]

    @property
    def T(self) -> int:
        return self.demands.shape[1]

    @property
    def n(self) -> int:
        return self.demands.shape[2]


def prepare(
    net: BomNetwork,
    paths: Sequence[ScenarioPath],
    policy: np.ndarray,
    costs: CostParams,
    init: np.ndarray | None = None,
    dense: bool = False,
) -> SimInputs:
    net.require_valid()
    n = net.n
    if not paths:
        raise DimensionMismatch("at least one scenario path is required")
    T = paths[0].T
    for path in paths:
        if path.n != n or path.T != T:
            raise DimensionMismatch(f"path of shape {(path.T, path.n)} does not match T={T}, n={n}")
    S = check_policy(policy, n)
    if costs.n != n:
        raise DimensionMismatch(f"cost vectors have length {costs.n}, expected {n}")
    tied = init is None
    start = S if tied else np.asarray(init, dtype=np.float64)
    if start.shape != (n,):
        raise DimensionMismatch("initial inventory must be an n-vector")
    if np.any(start < 0):
        raise InvalidPolicy("initial inventory must be nonnegative")
    B = len(paths)
    demands = np.stack([p.demands for p in paths]).astype(np.float64)
    leads = np.stack([p.lead_times for p in paths])
    return SimInputs(
        ops=AdjacencyOps(net, dense),
        demands=demands,
        leads=leads,
        S=S,
        h=costs.h,
        p=costs.p,
        init=np.tile(start, (B, 1)),
        tied_init=tied,
    )


PeriodHook = Callable[[int, SimpleNamespace], None]


def run_periods(inp: SimInputs, hooks: Sequence[PeriodHook] = ()) -> np.ndarray:
    """Advance all paths through ``T`` periods; returns the pipeline ``P``.

    Every hook receives ``(t, rec)`` after period ``t`` with all quantities
    of that period.  The returned array holds arrivals indexed by period.
    """
    ops, S, h, p = inp.ops, inp.S, inp.h, inp.p
    B, T, n = inp.B, inp.T, inp.n
    n_l = ops.net.n_l
    lmax = int(inp.leads.max())
    P = np.zeros((T + lmax + 2, B, n))
    bidx, iidx = np.indices((B, n))

    IP = inp.init.copy()
    I = inp.init.copy()
    O = np.zeros((B, n))
    D_prev = np.zeros((B, n))
    B_out = np.zeros((B, n))
    Ob = np.zeros((B, n))
    C_sum = np.zeros(B)

    for t in range(1, T + 1):
        IP = IP + O - ops.dot_T(O) - D_prev
        D = inp.demands[:, t - 1]
        base = IP - D
        x = base - S
        ind = x < 0
        O = np.where(ind, 0.0 - x, 0.0)
        order_ind = [ind]
        IP_temp = base
        for _ in range(n_l - 1):
            IP_temp = base - ops.dot_T(O)
            x = IP_temp - S
            ind = x < 0
            O = np.where(ind, 0.0 - x, 0.0)
            order_ind.append(ind)

        I_temp = I + P[t] - B_out - D
        pos = I_temp > 0
        neg = I_temp < 0
        I0 = np.where(pos, I_temp, 0.0)
        B_out = np.where(pos, 0.0, 0.0 - I_temp)

        Ob_prev = Ob
        O_prime = O + Ob_prev
        I_need = ops.dot_T(O_prime)
        has_need = I_need > 0
        ratio = np.divide(I0, I_need, out=np.ones_like(I0), where=has_need)
        r = np.minimum(ratio, 1.0)
        active = has_need & (ratio < 1.0)
        K, arg = ops.upstream_min(r)
        M = K * O_prime
        Ob = O_prime - M
        I = I0 - ops.dot_T(M)

        lead = inp.leads[:, t - 1]
        P[t + lead, bidx, iidx] += M

        C = I @ h + B_out @ p
        C_sum = C_sum + C
        if not (np.isfinite(C_sum).all() and np.isfinite(IP).all() and np.isfinite(Ob).all()):
            raise NonFiniteState(f"non-finite simulation state in period {t}")

        rec = SimpleNamespace(
            IP=IP, D=D, order_ind=order_ind, IP_temp=IP_temp, O=O, I_temp=I_temp, pos=pos, neg=neg,
            I0=I0, B_out=B_out, Ob_prev=Ob_prev, O_prime=O_prime, I_need=I_need, ratio=ratio,
            r=r, active=active, K=K, arg=arg, M=M, Ob=Ob, I=I, lead=lead, C=C, C_sum=C_sum,
        )
        for hook in hooks:
            hook(t, rec)
        D_prev = D
    return P


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

STATE_FIELDS = ("IP", "O", "I0", "I", "B_out", "Ob", "M", "r", "IP_temp", "I_temp", "I_need")


@dataclass
class Trajectory:
    """Full per-period history of one replication.

    Arrays have shape ``(T + 1, n)``; row 0 holds the initial condition (or
    zeros where no initial value exists).  ``P[t]`` holds arrivals received at
    the beginning of period ``t``.
    """

    IP: np.ndarray
    O: np.ndarray
    I0: np.ndarray
    I: np.ndarray
    B_out: np.ndarray
    Ob: np.ndarray
    M: np.ndarray
    r: np.ndarray
    IP_temp: np.ndarray
    I_temp: np.ndarray
    I_need: np.ndarray
    P: np.ndarray
    D: np.ndarray
    C: np.ndarray
    C_sum: np.ndarray
    policy: np.ndarray
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.C.size - 1

    @property
    def n(self) -> int:
        return self.IP.shape[1]

    @property
    def total_cost(self) -> float:
        return float(self.C_sum[-1])

    def summary(self) -> dict:
        return {
            "total_cost": self.total_cost,
            "seed": self.seed,
            "policy_hash": policy_hash(self.policy),
        }

    def write_csv(self, path: str | Path, names: Sequence[str] | None = None) -> None:
        names = names or [str(i) for i in range(self.n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "item", "IP", "O", "I", "B_out", "O_b", "M", "r", "C_t"])
            for t in range(1, self.T + 1):
                for i in range(self.n):
                    w.writerow(
                        [t, names[i]]
                        + [repr(float(a[t, i])) for a in (self.IP, self.O, self.I, self.B_out, self.Ob, self.M, self.r)]
                        + [repr(float(self.C[t]))]
                    )

    def write_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")


class _HistoryRecorder:
    def __init__(self, inp: SimInputs):
        B, T, n = inp.B, inp.T, inp.n
        self.hist = {f: np.zeros((T + 1, B, n)) for f in STATE_FIELDS}
        self.hist["IP"][0] = inp.init
        self.hist["I"][0] = inp.init
        self.C = np.zeros((T + 1, B))
        self.C_sum = np.zeros((T + 1, B))

    def __call__(self, t: int, rec: SimpleNamespace) -> None:
        for f in STATE_FIELDS:
            self.hist[f][t] = getattr(rec, f)
        self.C[t] = rec.C
        self.C_sum[t] = rec.C_sum


class _TotalRecorder:
    def __init__(self, B: int):
        self.total = np.zeros(B)

    def __call__(self, t: int, rec: SimpleNamespace) -> None:
        self.total = rec.C_sum


def trajectories_from(inp: SimInputs, rec: _HistoryRecorder, P: np.ndarray, paths) -> list[Trajectory]:
    T = inp.T
    out = []
    for b, path in enumerate(paths):
        D = np.zeros((T + 1, inp.n))
        D[1:] = inp.demands[b]
        out.append(
            Trajectory(
                **{f: rec.hist[f][:, b].copy() for f in STATE_FIELDS},
                P=P[:, b].copy(),
                D=D,
                C=rec.C[:, b].copy(),
                C_sum=rec.C_sum[:, b].copy(),
                policy=inp.S.copy(),
                seed=path.seed,
                meta={"tied_init": inp.tied_init, "init": inp.init[b].copy()},
            )
        )
    return out


def simulate(
    net: BomNetwork,
    path: ScenarioPath,
    policy: np.ndarray,
    costs: CostParams,
    init: np.ndarray | None = None,
    *,
    dense: bool = False,
) -> Trajectory:
    """Simulate one replication and return its full trajectory.

    ``init=None`` starts on-hand inventory at the base-stock levels (and keeps
    it tied to ``policy`` for differentiation); pass a vector to fix it.
    """
    inp = prepare(net, [path], policy, costs, init, dense)
    rec = _HistoryRecorder(inp)
    P = run_periods(inp, [rec])
    return trajectories_from(inp, rec, P, [path])[0]


def simulate_totals(
    net: BomNetwork,
    paths: Sequence[ScenarioPath],
    policy: np.ndarray,
    costs: CostParams,
    init: np.ndarray | None = None,
    *,
    dense: bool = False,
) -> np.ndarray:
    """Total cost of every path, simulated as one vectorized batch."""
    inp = prepare(net, paths, policy, costs, init, dense)
    rec = _TotalRecorder(inp.B)
    run_periods(inp, [rec])
    return np.array(rec.total, copy=True)


def ip_definitional(traj: Trajectory, net: BomNetwork, t: int, i: int) -> float:
    """Inventory position from its definition (on hand + on order - backorders).

    Intended as an independent check on the recursive update.
    """
    if not (1 <= t <= traj.T) or not (0 <= i < traj.n):
        raise OutOfRange(f"(t={t}, i={i}) outside 1..{traj.T} x 0..{traj.n - 1}")
    on_order = math.fsum(traj.O[1:t, i]) - math.fsum(traj.P[1:t, i])
    succ = net.successors(i)
    weights = net.A.data[net.A.indptr[i] : net.A.indptr[i + 1]]
    internal_backlog = math.fsum(weights * traj.Ob[t - 1, succ])
    return traj.I[t - 1, i] + on_order - (traj.B_out[t - 1, i] + internal_backlog)


# ---------------------------------------------------------------------------
# policy evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostSummary:
    mean: float
    stderr: float
    totals: tuple[float, ...]
    seeds: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "totals": list(self.totals), "seeds": list(self.seeds)}


def summarize(totals: Sequence[float], seeds: Sequence[int]) -> CostSummary:
    totals = [float(x) for x in totals]
    k = len(totals)
    mean = math.fsum(totals) / k
    if k > 1:
        var = math.fsum((x - mean) ** 2 for x in totals) / (k - 1)
        stderr = math.sqrt(var / k)
    else:
        stderr = 0.0
    return CostSummary(mean, stderr, tuple(totals), tuple(int(s) for s in seeds))


def evaluate_policy(
    net: BomNetwork,
    models: ScenarioModels,
    policy: np.ndarray,
    costs: CostParams,
    T: int,
    seeds: Sequence[int],
    init: np.ndarray | None = None,
    *,
    chunk: int = 16,
    mapper: Callable | None = None,
) -> CostSummary:
    """Mean, standard error and per-seed totals of the cumulative cost.

    ``mapper`` (``map``-like, e.g. a process pool's) runs chunks of seeds
    concurrently; results are reduced in seed order.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise DimensionMismatch("at least one seed is required")
    chunks = [seeds[i : i + chunk] for i in range(0, len(seeds), chunk)]
    job = _EvalJob(net, models, np.asarray(policy, float), costs, T, init)
    results = list((mapper or map)(job, chunks))
    totals = np.concatenate(results)
    return summarize(totals, seeds)


@dataclass
class _EvalJob:
    net: BomNetwork
    models: ScenarioModels
    policy: np.ndarray
    costs: CostParams
    T: int
    init: np.ndarray | None

    def __call__(self, seeds: list[int]) -> np.ndarray:
        paths = [sample_path(self.models.demand, self.models.lead, self.T, self.net.n, s) for s in seeds]
        return simulate_totals(self.net, paths, self.policy, self.costs, self.init)


@dataclass
class GradientResult:
    grad: np.ndarray
    method: str
    total_cost: float
    seed: int | None = None
    trajectory: Trajectory | None = field(default=None, repr=False)
    sim_calls: int | None = None

    def to_dict(self) -> dict:
        total = float(self.total_cost)
        return {
            "method": self.method,
            "grad": [float(g) for g in np.ravel(self.grad)],
            "total_cost": total if math.isfinite(total) else None,
            "seed": self.seed,
        }
