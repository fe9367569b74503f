"""Reproducible scenario paths: integer outside demands and lead times.

Randomness comes from Philox (a counter-based generator) keyed by
``SeedSequence(seed, spawn_key=(purpose,))``.  Demand and lead-time draws use
separate purposes, and every draw is a standard normal of fixed shape
``(T, n)`` that is transformed per item afterwards, so changing one model (or
one item's parameters) never shifts the draws seen by another.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, UnsupportedDistribution

DEMAND_STREAM = 1
LEAD_STREAM = 2

_MASK63 = (1 << 63) - 1


def stream(seed: int, purpose: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(purpose,))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(base_seed: int, k: int) -> int:
    """Seed of the k-th path of a batch rooted at ``base_seed``."""
    state = np.random.SeedSequence([int(base_seed), int(k)]).generate_state(1, dtype=np.uint64)
    return int(state[0]) & _MASK63


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalDemand:
    """Normal(mu_i, sigma_i), rounded to the nearest integer, clamped at 0."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), mu.shape).copy()
        if np.any(sigma < 0) or np.any(mu < 0):
            raise UnsupportedDistribution("normal demand needs mu >= 0 and sigma >= 0")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def draw(self, T: int, n: int, seed: int) -> np.ndarray:
        if self.mu.shape != (n,):
            raise DimensionMismatch(f"demand model has {self.mu.shape[0]} items, expected {n}")
        z = stream(seed, DEMAND_STREAM).standard_normal((T, n))
        return np.maximum(np.rint(self.mu + self.sigma * z), 0).astype(np.int64)

    def to_dict(self) -> dict:
        return {"family": "normal", "mu": self.mu.tolist(), "sigma": self.sigma.tolist()}


@dataclass(frozen=True)
class DeterministicDemand:
    """Replays a fixed ``(T, n)`` integer sequence."""

    sequence: np.ndarray

    def __post_init__(self) -> None:
        seq = np.asarray(self.sequence)
        if seq.ndim != 2:
            raise DimensionMismatch("deterministic demand must be a (T, n) array")
        if np.any(seq < 0) or np.any(seq != np.rint(seq)):
            raise UnsupportedDistribution("deterministic demands must be integers >= 0")
        object.__setattr__(self, "sequence", seq.astype(np.int64))

    @classmethod
    def zeros(cls, T: int, n: int) -> "DeterministicDemand":
        return cls(np.zeros((T, n), dtype=np.int64))

    @classmethod
    def constant(cls, T: int, values: Sequence[int]) -> "DeterministicDemand":
        return cls(np.tile(np.asarray(values, dtype=np.int64), (T, 1)))

    def draw(self, T: int, n: int, seed: int) -> np.ndarray:
        if self.sequence.shape[1] != n or self.sequence.shape[0] < T:
            raise DimensionMismatch(
                f"deterministic demand of shape {self.sequence.shape} cannot cover T={T}, n={n}"
            )
        return self.sequence[:T].copy()

    def to_dict(self) -> dict:
        return {"family": "deterministic", "sequence": self.sequence.tolist()}


@dataclass(frozen=True)
class ConstantLead:
    lead: np.ndarray

    def __post_init__(self) -> None:
        lead = np.asarray(self.lead)
        if np.any(lead < 1) or np.any(lead != np.rint(lead)):
            raise UnsupportedDistribution("constant lead times must be integers >= 1")
        object.__setattr__(self, "lead", lead.astype(np.int64))

    def draw(self, T: int, n: int, seed: int) -> np.ndarray:
        lead = np.broadcast_to(self.lead, (n,))
        return np.minimum(np.tile(lead, (T, 1)), T)

    def to_dict(self) -> dict:
        return {"family": "constant", "lead": np.atleast_1d(self.lead).tolist()}


@dataclass(frozen=True)
class TruncatedNormalLead:
    """``max(1, round(Normal(mu_i, cv * mu_i)))`` on items flagged ``random``.

    Items with ``random[i] == False`` keep the constant lead ``mu_i``.
    """

    mu: np.ndarray
    random: np.ndarray | None = None
    cv: float = 0.05

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=np.float64)
        if np.any(mu < 1):
            raise UnsupportedDistribution("lead-time means must be >= 1")
        rnd = np.ones(mu.shape, bool) if self.random is None else np.asarray(self.random, bool)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "random", rnd)

    def draw(self, T: int, n: int, seed: int) -> np.ndarray:
        if self.mu.shape != (n,):
            raise DimensionMismatch(f"lead model has {self.mu.shape[0]} items, expected {n}")
        z = stream(seed, LEAD_STREAM).standard_normal((T, n))
        drawn = np.maximum(1, np.rint(self.mu + self.cv * self.mu * z))
        fixed = np.maximum(1, np.rint(self.mu))
        lead = np.where(self.random, drawn, fixed).astype(np.int64)
        return np.minimum(lead, T)

    def to_dict(self) -> dict:
        return {
            "family": "truncnormal",
            "mu": self.mu.tolist(),
            "random": self.random.tolist(),
            "cv": self.cv,
        }


DemandModel = NormalDemand | DeterministicDemand
LeadTimeModel = ConstantLead | TruncatedNormalLead


def demand_from_dict(d: dict) -> DemandModel:
    family = d.get("family")
    if family == "normal":
        return NormalDemand(d["mu"], d["sigma"])
    if family == "deterministic":
        return DeterministicDemand(d["sequence"])
    raise UnsupportedDistribution(f"unknown demand family {family!r}")


def lead_from_dict(d: dict) -> LeadTimeModel:
    family = d.get("family")
    if family == "constant":
        return ConstantLead(d["lead"])
    if family == "truncnormal":
        return TruncatedNormalLead(d["mu"], d.get("random"), d.get("cv", 0.05))
    raise UnsupportedDistribution(f"unknown lead-time family {family!r}")


@dataclass(frozen=True)
class ScenarioModels:
    demand: DemandModel
    lead: LeadTimeModel

    def to_dict(self) -> dict:
        return {"demand": self.demand.to_dict(), "lead": self.lead.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioModels":
        return cls(demand_from_dict(d["demand"]), lead_from_dict(d["lead"]))


# ---------------------------------------------------------------------------
# paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScenarioPath:
    """One realization; row ``t - 1`` holds period ``t``."""

    demands: np.ndarray
    lead_times: np.ndarray
    seed: int | None = None
    streams: tuple[int, int] = (DEMAND_STREAM, LEAD_STREAM)

    def __post_init__(self) -> None:
        d = np.array(self.demands, dtype=np.int64)
        lt = np.array(self.lead_times, dtype=np.int64)
        if d.shape != lt.shape or d.ndim != 2:
            raise DimensionMismatch("demands and lead_times must share shape (T, n)")
        if np.any(d < 0) or np.any(lt < 1):
            raise UnsupportedDistribution("demands must be >= 0 and lead times >= 1")
        d.flags.writeable = False
        lt.flags.writeable = False
        object.__setattr__(self, "demands", d)
        object.__setattr__(self, "lead_times", lt)

    @property
    def T(self) -> int:
        return self.demands.shape[0]

    @property
    def n(self) -> int:
        return self.demands.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScenarioPath):
            return NotImplemented
        return (
            np.array_equal(self.demands, other.demands)
            and np.array_equal(self.lead_times, other.lead_times)
            and self.seed == other.seed
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "streams": list(self.streams),
            "demands": self.demands.tolist(),
            "lead_times": self.lead_times.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioPath":
        return cls(d["demands"], d["lead_times"], d.get("seed"), tuple(d.get("streams", (1, 2))))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioPath":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sample_path(demand: DemandModel, lead: LeadTimeModel, T: int, n: int, seed: int) -> ScenarioPath:
    if T < 1:
        raise DimensionMismatch("horizon T must be >= 1")
    if not hasattr(demand, "draw") or not hasattr(lead, "draw"):
        raise UnsupportedDistribution(f"unsupported models {type(demand).__name__}, {type(lead).__name__}")
    return ScenarioPath(demand.draw(T, n, seed), lead.draw(T, n, seed), int(seed))


def batch_paths(models: ScenarioModels, T: int, n: int, base_seed: int, count: int) -> list[ScenarioPath]:
    if count < 1:
        raise DimensionMismatch("count must be >= 1")
    return [
        sample_path(models.demand, models.lead, T, n, derive_seed(base_seed, k)) for k in range(count)
    ]
