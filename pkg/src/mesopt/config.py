"""Run configuration: schema, defaults and instance construction.

A run config is a JSON document.  Every random ingredient (generated
network, demand means, lead times, costs) is drawn from streams keyed by the
config's ``seed``, so a config plus its seed pins the instance exactly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .bom import BomNetwork, GeneratorSpec, generate
from .errors import ConfigError
from .optimizer import OptConfig
from .simulator import CostParams
from .stochastic import (
    ConstantLead,
    DeterministicDemand,
    NormalDemand,
    ScenarioModels,
    TruncatedNormalLead,
    demand_from_dict,
    lead_from_dict,
)

_VEC = {"type": "array", "items": {"type": "number"}}
_RANGE = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "T": {"type": "integer", "minimum": 1},
        "network": {
            "type": "object",
            "properties": {
                "file": {"type": "string"},
                "fixture": {"enum": ["kodak", "kodak-modified"]},
                "generate": {
                    "type": "object",
                    "properties": {
                        "n": {"type": "integer", "minimum": 1},
                        "k": {"type": "number", "minimum": 0},
                        "topology": {"enum": ["tree", "dag", "shared"]},
                        "layers": {"type": "integer", "minimum": 1},
                        "weight_max": {"type": "integer", "minimum": 1},
                    },
                    "required": ["n"],
                    "additionalProperties": False,
                },
            },
            "minProperties": 1,
            "maxProperties": 1,
            "additionalProperties": False,
        },
        "demand": {
            "type": "object",
            "properties": {
                "family": {"enum": ["normal", "normal-random", "deterministic", "zero"]},
                "mu": _VEC,
                "sigma": _VEC,
                "sequence": {"type": "array"},
                "mu_range": _RANGE,
                "cv": {"type": "number", "minimum": 0},
                "scope": {"enum": ["sinks", "production", "all"]},
            },
            "required": ["family"],
            "additionalProperties": False,
        },
        "lead": {
            "type": "object",
            "properties": {
                "family": {"enum": ["constant", "truncnormal", "uniform-int"]},
                "lead": {"type": ["array", "integer"]},
                "mu": _VEC,
                "random": {"type": "array", "items": {"type": "boolean"}},
                "cv": {"type": "number", "minimum": 0},
                "range": _RANGE,
                "random_scope": {"enum": ["none", "raw", "all"]},
            },
            "required": ["family"],
            "additionalProperties": False,
        },
        "costs": {
            "type": "object",
            "properties": {
                "h": _VEC,
                "p": {"type": ["array", "number"]},
                "h_range": _RANGE,
                "penalty_ratio": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "seeds": {
            "type": "object",
            "properties": {
                "base": {"type": "integer", "minimum": 0},
                "count": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "eval_seeds": {
            "type": "object",
            "properties": {
                "base": {"type": "integer", "minimum": 0},
                "count": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "policy": {"oneOf": [_VEC, {"type": "object"}]},
        "init": {"oneOf": [_VEC, {"type": "null"}]},
        "optimizer": {"type": "object"},
        "workers": {"type": ["integer", "null"], "minimum": 1},
        "out": {"type": "string"},
    },
    "required": ["network"],
    "additionalProperties": False,
}

DEFAULTS = {
    "seed": 0,
    "T": 50,
    "demand": {"family": "normal-random", "mu_range": [10.0, 100.0], "cv": 0.1, "scope": "sinks"},
    "lead": {"family": "uniform-int", "range": [1, 3]},
    "costs": {"h_range": [1.0, 5.0], "penalty_ratio": 10.0},
    "seeds": {"base": 0, "count": 1},
    "eval_seeds": {"base": 1_000_000, "count": 50},
    "init": None,
    "workers": None,
}

# purposes of the instance streams (disjoint from the scenario streams)
_NET, _DEMAND, _LEAD, _COST = 0x10, 0x11, 0x12, 0x13


def _rng(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose]))


def resolve(raw: dict, base_dir: str | Path | None = None) -> dict:
    """Validate against the schema and fill defaults; returns a new dict."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update(copy.deepcopy(raw))
    net = cfg["network"]
    if "fixture" in net:
        from . import fixtures

        fx = fixtures.kodak(modified=net["fixture"] == "kodak-modified")
        for key, block in fx.config_blocks().items():
            if key not in raw:
                cfg[key] = block
    if "file" in net and base_dir is not None and not Path(net["file"]).is_absolute():
        net["file"] = str(Path(base_dir) / net["file"])
    if "generate" in net:
        net["generate"] = GeneratorSpec.from_dict(net["generate"]).to_dict()
    if "optimizer" in cfg:
        cfg["optimizer"] = OptConfig.from_dict(cfg["optimizer"]).to_dict()
    return cfg


def load(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return resolve(raw, path.parent)


@dataclass
class Instance:
    net: BomNetwork
    models: ScenarioModels
    costs: CostParams
    T: int
    names: list[str] | None = None

    @property
    def n(self) -> int:
        return self.net.n


def build_network(spec: dict, seed: int) -> BomNetwork:
    if "file" in spec:
        return BomNetwork.load(spec["file"])
    if "fixture" in spec:
        from . import fixtures

        return fixtures.kodak(modified=spec["fixture"] == "kodak-modified").net
    return generate(GeneratorSpec.from_dict(spec["generate"]), derive_net_seed(seed))


def derive_net_seed(seed: int) -> int:
    return int(_rng(seed, _NET).integers(2**63 - 1))


def demand_scope(net: BomNetwork, scope: str) -> np.ndarray:
    if scope == "sinks":
        return net.out_degree == 0
    if scope == "production":
        return ~net.is_raw
    return np.ones(net.n, bool)


def build_demand(spec: dict, net: BomNetwork, T: int, seed: int):
    n = net.n
    fam = spec["family"]
    if fam == "zero":
        return DeterministicDemand.zeros(T, n)
    if fam == "normal-random":
        lo, hi = spec.get("mu_range", [10.0, 100.0])
        mu = _rng(seed, _DEMAND).uniform(lo, hi, n) * demand_scope(net, spec.get("scope", "sinks"))
        return NormalDemand(mu, spec.get("cv", 0.1) * mu)
    d = {k: v for k, v in spec.items() if k != "scope"}
    return demand_from_dict(d)


def build_lead(spec: dict, net: BomNetwork, seed: int):
    fam = spec["family"]
    if fam == "uniform-int":
        lo, hi = (int(v) for v in spec.get("range", [1, 3]))
        if lo < 1 or hi < lo:
            raise ConfigError(f"lead range [{lo}, {hi}] must satisfy 1 <= lo <= hi")
        lead = _rng(seed, _LEAD).integers(lo, hi + 1, net.n)
        scope = spec.get("random_scope", "none")
        if scope == "none":
            return ConstantLead(lead)
        rnd = net.is_raw if scope == "raw" else np.ones(net.n, bool)
        return TruncatedNormalLead(lead.astype(float), rnd, spec.get("cv", 0.05))
    return lead_from_dict(spec)


def build_costs(spec: dict, net: BomNetwork, seed: int) -> CostParams:
    """Explicit vectors, or value-added holding costs.

    A generated holding cost is a random value-added term plus the
    weight-averaged holding cost of the item's components, so downstream
    stock is dearer without the cost exploding with depth.
    """
    n = net.n
    if "h" in spec:
        h = np.asarray(spec["h"], float)
        p = np.asarray(spec["p"], float) if "p" in spec else spec.get("penalty_ratio", 10.0) * h
        return CostParams(h, np.broadcast_to(p, h.shape))
    lo, hi = spec.get("h_range", [1.0, 5.0])
    added = _rng(seed, _COST).uniform(lo, hi, n)
    wsum = np.asarray(net.AT @ np.ones(n)).ravel()
    scale = np.divide(1.0, wsum, out=np.zeros(n), where=wsum > 0)
    h = added.copy()
    for _ in range(net.n_l):
        h = added + scale * (net.AT @ h)
    return CostParams(h, spec.get("penalty_ratio", 10.0) * h)


def build_instance(cfg: dict) -> Instance:
    seed = int(cfg["seed"])
    T = int(cfg["T"])
    net = build_network(cfg["network"], seed)
    names = list(net.names)
    demand = build_demand(cfg["demand"], net, T, seed)
    lead = build_lead(cfg["lead"], net, seed)
    costs = build_costs(cfg["costs"], net, seed)
    if costs.n != net.n:
        raise ConfigError(f"cost vectors have length {costs.n}, network has {net.n} items")
    return Instance(net, ScenarioModels(demand, lead), costs, T, names)


def seed_list(block: dict) -> list[int]:
    from .stochastic import derive_seed

    return [derive_seed(block["base"], k) for k in range(block["count"])]
