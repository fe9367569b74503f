"""Checked-in reference instances.

``data/kodak.json`` is the single source for the Kodak digital camera
network: item letters, lead times, holding costs and the arc list (plus
the extra arc of the modified variant).  Demand parameters for that network
were never published, so the file carries our own choice, used by every
consumer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import jsonschema
import numpy as np

from .bom import BomNetwork
from .errors import ConfigError
from .simulator import CostParams
from .stochastic import ConstantLead, NormalDemand, TruncatedNormalLead

_KODAK_SCHEMA = {
    "type": "object",
    "properties": {
        "items": {"type": "array", "items": {"type": "string"}, "minItems": 1, "uniqueItems": True},
        "lead_time": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "holding_cost": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "arcs": {"type": "array", "items": {"type": "array", "minItems": 3, "maxItems": 3}},
        "modified_extra_arcs": {"type": "array", "items": {"type": "array", "minItems": 3, "maxItems": 3}},
        "demand": {"type": "object"},
        "penalty_ratio": {"type": "number", "minimum": 0},
        "random_lead_cv": {"type": "number", "minimum": 0},
        "T": {"type": "integer", "minimum": 1},
        "gs_policy": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
    },
    "required": ["items", "lead_time", "holding_cost", "arcs", "modified_extra_arcs", "demand", "gs_policy"],
}


@lru_cache(maxsize=1)
def _kodak_raw() -> dict:
    text = resources.files(__package__).joinpath("data/kodak.json").read_text()
    raw = json.loads(text)
    try:
        jsonschema.validate(raw, _KODAK_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"kodak fixture invalid: {exc.message}") from None
    n = len(raw["items"])
    if len(raw["lead_time"]) != n or len(raw["holding_cost"]) != n:
        raise ConfigError("kodak fixture: per-item vectors must match the item list")
    return raw


@dataclass(frozen=True)
class KodakFixture:
    net: BomNetwork
    costs: CostParams
    lead: ConstantLead
    demand: NormalDemand
    names: list[str]
    T: int
    gs_policy: np.ndarray
    random_lead_cv: float

    def random_lead(self) -> TruncatedNormalLead:
        """Procurement (raw-material) lead times become random, others stay fixed."""
        return TruncatedNormalLead(self.lead.lead.astype(float), self.net.is_raw, self.random_lead_cv)

    def table(self) -> list[dict]:
        return [
            {"item": name, "lead_time": int(l), "holding_cost": float(h)}
            for name, l, h in zip(self.names, self.lead.lead, self.costs.h)
        ]

    def config_blocks(self) -> dict:
        return {
            "demand": self.demand.to_dict(),
            "lead": self.lead.to_dict(),
            "costs": self.costs.to_dict(),
            "T": self.T,
        }


def kodak(modified: bool = False) -> KodakFixture:
    raw = _kodak_raw()
    names = list(raw["items"])
    idx = {name: i for i, name in enumerate(names)}
    arc_rows = raw["arcs"] + (raw["modified_extra_arcs"] if modified else [])
    try:
        arcs = [(idx[a], idx[b], float(w)) for a, b, w in arc_rows]
    except KeyError as exc:
        raise ConfigError(f"kodak fixture names unknown item {exc}") from None
    net = BomNetwork(len(names), arcs, names=names)
    h = np.asarray(raw["holding_cost"], dtype=np.float64)
    costs = CostParams(h, float(raw.get("penalty_ratio", 10.0)) * h)
    gs = np.zeros(len(names))
    for name, level in raw["gs_policy"].items():
        gs[idx[name]] = level
    d = raw["demand"]
    return KodakFixture(
        net=net,
        costs=costs,
        lead=ConstantLead(raw["lead_time"]),
        demand=NormalDemand(d["mu"], d["sigma"]),
        names=names,
        T=int(raw.get("T", 100)),
        gs_policy=gs,
        random_lead_cv=float(raw.get("random_lead_cv", 0.05)),
    )


# n = 200 reference configuration used by the optimizer experiments
REFERENCE_CONFIG = {
    "seed": 200,
    "T": 50,
    "network": {"generate": {"n": 200, "k": 2.0, "topology": "dag", "layers": 5, "weight_max": 1}},
    "demand": {"family": "normal-random", "mu_range": [10.0, 100.0], "cv": 0.1, "scope": "sinks"},
    "lead": {"family": "uniform-int", "range": [1, 3]},
    "costs": {"h_range": [1.0, 5.0], "penalty_ratio": 10.0},
}


def reference_config(seed: int | None = None, **overrides) -> dict:
    cfg = json.loads(json.dumps(REFERENCE_CONFIG))
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg.update(overrides)
    return cfg
