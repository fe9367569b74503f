"""Stochastic first-order optimizers for base-stock levels.

Objective: ``f(S) = E[sum_t C_t(S)]`` plus an optional ``lam * ||S||_1``.
Each epoch draws a fresh mini-batch of scenario paths (seeded by
``derive_seed(seed, epoch)``) and takes one step with the batch-mean BP
gradient.  Three update rules share one loop:

* ``ssgd``:  ``S <- [S - t (g + lam * sign(S))]_+``
* ``fista``: ``x <- prox(y - t g(y), t lam)``, ``y <- [x + k/(k+r) (x - x_prev)]_+``
* ``sgd``:   ``S <- [S - t (g * mask)]_+`` (Stage 2 of :func:`two_stage`)

The loop state is fully recoverable from the last epoch record, which is
what makes the JSON-lines logs resumable.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bom import BomNetwork
from .bp import batch_gradient
from .errors import ConfigError, Diverged, EmptySupport
from .simulator import CostParams, evaluate_policy
from .stochastic import (
    ConstantLead,
    DeterministicDemand,
    NormalDemand,
    ScenarioModels,
    TruncatedNormalLead,
    batch_paths,
    derive_seed,
)

log = logging.getLogger(__name__)

# (S, seed) -> (batch-mean gradient, batch-mean total cost)
Oracle = Callable[[np.ndarray, int], tuple[np.ndarray, float]]

STAGE2_SEED_OFFSET = 0x5752


@dataclass(frozen=True)
class OptConfig:
    lam: float = 0.0
    step: float | None = None  # None: 1 / L-hat from probe gradients
    schedule: str = "sqrt"  # t_k = t0 / sqrt(k), or "constant"
    r: float = 3.0
    batch: int = 10
    max_epochs: int = 100
    tol: float = 1e-4
    window: int = 10
    eps_zero: float | None = None
    nonneg: bool = True
    stage1: str = "fista"
    stage2_epochs: int | None = None
    diverge_factor: float = 1e3

    def __post_init__(self) -> None:
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not self.r >= 3:
            raise ConfigError(f"FISTA momentum offset r must be >= 3, got {self.r}")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.eps_zero is not None and not self.eps_zero > 0:
            raise ConfigError("eps_zero must be > 0")
        if self.step is not None and not self.step > 0:
            raise ConfigError("step must be > 0")
        if self.schedule not in ("constant", "sqrt"):
            raise ConfigError(f"unknown step schedule {self.schedule!r}")
        if self.stage1 not in ("fista", "ssgd"):
            raise ConfigError(f"unknown stage-1 method {self.stage1!r}")
        if self.window < 1:
            raise ConfigError("window must be >= 1")

    def step_at(self, t0: float, k: int) -> float:
        return t0 if self.schedule == "constant" else t0 / math.sqrt(k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptRunRecord:
    stage: str
    method: str
    config: dict
    seed: int
    epochs: list[dict] = field(default_factory=list)
    S: np.ndarray | None = None
    stop_reason: str = ""

    @property
    def objective(self) -> list[float]:
        return [e["objective"] for e in self.epochs]

    @property
    def nonzeros(self) -> list[int]:
        return [e["nonzeros"] for e in self.epochs]

    def final_policy(self) -> dict:
        return {
            "stage": self.stage,
            "method": self.method,
            "seed": self.seed,
            "epochs": len(self.epochs),
            "stop_reason": self.stop_reason,
            "S": [float(s) for s in self.S],
            "nonzeros": int(np.count_nonzero(self.S)),
        }

    def write(self, log_path: str | Path, policy_path: str | Path | None = None) -> None:
        with open(log_path, "w") as fh:
            for e in self.epochs:
                fh.write(epoch_line(e))
        if policy_path is not None:
            Path(policy_path).write_text(json.dumps(self.final_policy(), indent=1, sort_keys=True) + "\n")


def epoch_line(e: dict) -> str:
    return json.dumps(e, sort_keys=True) + "\n"


def read_epochs(path: str | Path) -> list[dict]:
    """Epoch records of a (possibly truncated) JSON-lines log.

    A partially written last line is dropped; gaps in the epoch index are an
    error.
    """
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            break
        out.append(rec)
    for k, rec in enumerate(out, start=1):
        if rec.get("epoch") != k:
            raise ConfigError(f"{path}: epoch index {rec.get('epoch')} where {k} was expected")
    return out


# ---------------------------------------------------------------------------
# proximal step
# ---------------------------------------------------------------------------


def prox_l1(x: np.ndarray, tau: float, nonneg: bool = True) -> np.ndarray:
    """Soft threshold at ``tau``; with ``nonneg`` also project onto ``x >= 0``."""
    if tau < 0:
        raise ConfigError("prox threshold must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)
    if nonneg:
        out = np.maximum(out, 0.0)
    return out + 0.0  # no negative zeros


def _clamp(x: np.ndarray, on: bool) -> np.ndarray:
    return np.maximum(x, 0.0) + 0.0 if on else x


# ---------------------------------------------------------------------------
# oracles, start point, step size
# ---------------------------------------------------------------------------


@dataclass
class BatchOracle:
    net: BomNetwork
    models: ScenarioModels
    costs: CostParams
    T: int
    batch: int
    init: np.ndarray | None = None
    mapper: Callable | None = None  # pool.map for one-replication-per-worker batches

    def __call__(self, S: np.ndarray, seed: int) -> tuple[np.ndarray, float]:
        paths = batch_paths(self.models, self.T, self.net.n, seed, self.batch)
        if self.mapper is not None:
            from .runner import BpJob
            from .bp import reduce_batch

            out = self.mapper(BpJob(self.net, S, self.costs, self.init), paths)
            res = reduce_batch(np.stack([g for g, _ in out]), np.array([c for _, c in out]))
        else:
            res = batch_gradient(self.net, paths, S, self.costs, self.init)
        return res.grad, res.cost


def mean_demand(models: ScenarioModels, n: int) -> np.ndarray:
    d = models.demand
    if isinstance(d, NormalDemand):
        return d.mu.copy()
    if isinstance(d, DeterministicDemand):
        return d.sequence.mean(axis=0).astype(np.float64)
    return np.zeros(n)


def mean_lead(models: ScenarioModels, n: int) -> np.ndarray:
    lt = models.lead
    if isinstance(lt, TruncatedNormalLead):
        return lt.mu.copy()
    if isinstance(lt, ConstantLead):
        return np.broadcast_to(lt.lead, (n,)).astype(np.float64)
    return np.ones(n)


def default_start(net: BomNetwork, models: ScenarioModels) -> np.ndarray:
    """Mean gross requirement (own demand plus all downstream needs) over the
    mean lead time."""
    n = net.n
    gross = mean_demand(models, n)
    level = gross.copy()
    for _ in range(net.n_l):
        level = gross + net.A @ level
    return level * mean_lead(models, n)


def estimate_lipschitz(oracle: Oracle, S0: np.ndarray, seed: int, probes: int = 5) -> float:
    """Largest gradient-difference ratio among ``probes`` points.

    The probes walk from ``S0`` against the sign of the starting gradient by
    5%, 10%, 20%, ... of each level, i.e. along the region the first steps
    will visit, and share one batch seed (common random numbers) so the
    differences reflect the policy change rather than sampling noise.
    """
    g0, _ = oracle(S0, seed)
    pts, grads = [S0], [g0]
    direction = np.sign(g0)
    scale = np.abs(S0) + 1.0
    for j in range(probes - 1):
        pts.append(np.maximum(S0 - 0.05 * 2.0**j * scale * direction, 0.0))
        grads.append(oracle(pts[-1], seed)[0])
    best = 0.0
    for a in range(len(pts)):
        for b in range(a + 1, len(pts)):
            dx = np.linalg.norm(pts[a] - pts[b])
            if dx > 0:
                best = max(best, float(np.linalg.norm(grads[a] - grads[b]) / dx))
    return best


def resolve_step(config: OptConfig, oracle: Oracle, S0: np.ndarray, seed: int) -> float:
    if config.step is not None:
        return float(config.step)
    L = estimate_lipschitz(oracle, S0, derive_seed(seed, 0))
    if L > 1e-12:
        return 1.0 / L
    # piecewise-linear landscape around S0: first move ~10% of the level
    g, _ = oracle(S0, derive_seed(seed, 0))
    fallback = 0.1 * (1.0 + float(np.mean(np.abs(S0)))) / max(float(np.max(np.abs(g))), 1.0)
    log.info("gradient differences vanish near the start point; step falls back to %.3g", fallback)
    return fallback


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------


def _converged(objs: Sequence[float], config: OptConfig) -> bool:
    w = config.window
    if len(objs) < 2 * w:
        return False
    last = math.fsum(objs[-w:]) / w
    prev = math.fsum(objs[-2 * w : -w]) / w
    return abs(last - prev) <= config.tol * max(abs(prev), 1e-300)


def run_method(
    method: str,
    oracle: Oracle,
    S0: np.ndarray,
    config: OptConfig,
    seed: int,
    t0: float,
    *,
    stage: str = "single",
    mask: np.ndarray | None = None,
    history: Sequence[dict] = (),
    on_epoch: Callable[[dict], None] | None = None,
) -> OptRunRecord:
    """Iterate ``method`` in {"ssgd", "fista", "sgd"} from ``S0``.

    ``history`` holds epoch records from an earlier, interrupted run of the
    same configuration; the loop continues after its last entry.
    """
    if method not in ("ssgd", "fista", "sgd"):
        raise ConfigError(f"unknown method {method!r}")
    lam = 0.0 if method == "sgd" else config.lam
    nn = config.nonneg
    rec = OptRunRecord(stage, method, config.to_dict(), int(seed), [dict(e) for e in history])
    x = _clamp(np.asarray(S0, dtype=np.float64).copy(), nn)
    if mask is not None:
        mask = np.asarray(mask, bool)
        x = np.where(mask, x, 0.0)
    y = x.copy()
    start = 1
    f0 = None
    if rec.epochs:
        last = rec.epochs[-1]
        x = np.asarray(last["S"], dtype=np.float64)
        y = np.asarray(last.get("y", last["S"]), dtype=np.float64)
        start = last["epoch"] + 1
        f0 = rec.epochs[0]["objective"]
        if _converged(rec.objective, config):
            rec.S = x
            rec.stop_reason = "converged"
            return rec

    rec.stop_reason = "epoch_cap"
    for k in range(start, config.max_epochs + 1):
        t = config.step_at(t0, k)
        s = derive_seed(seed, k)
        at = y if method == "fista" else x
        g, f = oracle(at, s)
        if mask is not None:
            g = np.where(mask, g, 0.0)
        if f0 is None:
            f0 = f
        if not math.isfinite(f) or (f0 > 0 and f > config.diverge_factor * f0):
            raise Diverged(f"epoch {k}: batch objective {f:.6g} vs initial {f0:.6g}; reduce the step size")
        if method == "fista":
            x_new = prox_l1(y - t * g, t * lam, nn)
            y = _clamp(x_new + (k / (k + config.r)) * (x_new - x), nn)
            x = x_new
        elif method == "ssgd":
            x = _clamp(x - t * (g + lam * np.sign(x)), nn)
            y = x
        else:
            x = _clamp(x - t * g, nn)
            y = x
        if mask is not None:
            x = np.where(mask, x, 0.0)
            y = np.where(mask, y, 0.0)
        entry = {
            "epoch": k,
            "stage": stage,
            "objective": float(f),
            "regularized": float(f + lam * np.abs(at).sum()),
            "nonzeros": int(np.count_nonzero(x)),
            "step": float(t),
            "seed": int(s),
            "S": [float(v) for v in x],
            "y": [float(v) for v in y],
        }
        rec.epochs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if _converged(rec.objective, config):
            rec.stop_reason = "converged"
            break
    rec.S = x
    return rec


def _setup(net, models, costs, T, config, seed, S0, init, mapper, oracle):
    oracle = oracle or BatchOracle(net, models, costs, T, config.batch, init, mapper)
    S0 = default_start(net, models) if S0 is None else np.asarray(S0, dtype=np.float64)
    t0 = resolve_step(config, oracle, S0, seed)
    return oracle, S0, t0


def ssgd(net, models, costs, T, config: OptConfig, seed: int, *, S0=None, init=None, mapper=None,
         oracle: Oracle | None = None, history=(), on_epoch=None) -> OptRunRecord:
    oracle, S0, t0 = _setup(net, models, costs, T, config, seed, S0, init, mapper, oracle)
    return run_method("ssgd", oracle, S0, config, seed, t0, history=history, on_epoch=on_epoch)


def fista(net, models, costs, T, config: OptConfig, seed: int, *, S0=None, init=None, mapper=None,
          oracle: Oracle | None = None, history=(), on_epoch=None) -> OptRunRecord:
    oracle, S0, t0 = _setup(net, models, costs, T, config, seed, S0, init, mapper, oracle)
    return run_method("fista", oracle, S0, config, seed, t0, history=history, on_epoch=on_epoch)


def zero_threshold(S: np.ndarray, eps_zero: float | None = None) -> float:
    if eps_zero is not None:
        return float(eps_zero)
    pos = S[S > 0]
    if pos.size == 0:
        return 1e-6
    return max(1e-3 * float(np.median(pos)), 1e-6)


@dataclass
class TwoStageResult:
    stage1: OptRunRecord
    stage2: OptRunRecord
    policy: np.ndarray
    support: np.ndarray
    eps_zero: float
    step: float

    def __iter__(self):
        return iter((self.stage1, self.stage2, self.policy))


def two_stage(
    net: BomNetwork,
    models: ScenarioModels,
    costs: CostParams,
    T: int,
    config: OptConfig,
    seed: int,
    *,
    S0: np.ndarray | None = None,
    init: np.ndarray | None = None,
    mapper: Callable | None = None,
    oracle: Oracle | None = None,
    history1: Sequence[dict] = (),
    history2: Sequence[dict] = (),
    on_epoch: Callable[[dict], None] | None = None,
) -> TwoStageResult:
    """Stage 1 selects stocking locations under the L1 penalty; Stage 2
    re-optimizes the surviving levels with the penalty removed."""
    oracle, S0, t0 = _setup(net, models, costs, T, config, seed, S0, init, mapper, oracle)
    rec1 = run_method(config.stage1, oracle, S0, config, seed, t0, stage="stage1",
                      history=history1, on_epoch=on_epoch)
    eps = zero_threshold(rec1.S, config.eps_zero)
    support = rec1.S > eps
    if not support.any():
        raise EmptySupport(f"stage 1 left no level above eps_zero={eps:.3g}; lower lambda")
    cfg2 = replace(config, lam=0.0, max_epochs=config.stage2_epochs or config.max_epochs)
    warm = np.where(support, rec1.S, 0.0)
    rec2 = run_method("sgd", oracle, warm, cfg2, derive_seed(seed, STAGE2_SEED_OFFSET), t0,
                      stage="stage2", mask=support, history=history2, on_epoch=on_epoch)
    return TwoStageResult(rec1, rec2, rec2.S.copy(), support, eps, t0)


def compare_policies(
    net: BomNetwork,
    models: ScenarioModels,
    costs: CostParams,
    T: int,
    S1: np.ndarray,
    S2: np.ndarray,
    seeds: Sequence[int],
    init: np.ndarray | None = None,
    mapper: Callable | None = None,
) -> dict:
    """Common-random-number comparison of a Stage-1 and a Stage-2 policy."""
    c1 = evaluate_policy(net, models, S1, costs, T, seeds, init, mapper=mapper)
    c2 = evaluate_policy(net, models, S2, costs, T, seeds, init, mapper=mapper)
    diff = np.array(c1.totals) - np.array(c2.totals)
    return {
        "stage1_cost": c1.mean,
        "stage2_cost": c2.mean,
        "improvement_pct": 100.0 * (c1.mean - c2.mean) / c1.mean if c1.mean else 0.0,
        "paired_stderr": float(diff.std(ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0,
        "seeds": [int(s) for s in seeds],
    }


def lambda_sweep(
    net: BomNetwork,
    models: ScenarioModels,
    costs: CostParams,
    T: int,
    config: OptConfig,
    seed: int,
    lambdas: Sequence[float],
    eval_seeds: Sequence[int],
    *,
    method: str = "fista",
    S0: np.ndarray | None = None,
    mapper: Callable | None = None,
) -> list[dict]:
    """(lambda, evaluated cost, nonzero count) on a grid; no selection is made."""
    oracle = BatchOracle(net, models, costs, T, config.batch, None, mapper)
    S0 = default_start(net, models) if S0 is None else np.asarray(S0, float)
    t0 = resolve_step(config, oracle, S0, seed)
    out = []
    for lam in lambdas:
        rec = run_method(method, oracle, S0, replace(config, lam=float(lam)), seed, t0)
        cost = evaluate_policy(net, models, rec.S, costs, T, eval_seeds, mapper=mapper)
        out.append({"lambda": float(lam), "cost": cost.mean, "nonzeros": int(np.count_nonzero(rec.S))})
    return out
