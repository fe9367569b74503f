"""BOM production networks as weighted sparse directed graphs.

Arc ``(i, j, a)`` means ``a`` units of component ``i`` are consumed per unit
of item ``j``.  The adjacency matrix ``A`` therefore has ``A[i, j] = a``; row
``i`` lists the consumers of ``i`` and column ``j`` lists the components of
``j``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    CycleDetected,
    DanglingNodeId,
    DegenerateSize,
    DimensionMismatch,
    InfeasibleSpec,
    NegativeWeight,
    ValidationError,
)


class ItemClass(str, enum.Enum):
    RAW = "raw"
    PRODUCTION = "production"


class Topology(str, enum.Enum):
    SPANNING_TREE = "tree"
    GENERAL_DAG = "dag"
    SHARED_COMPONENT_DAG = "shared"


@dataclass(frozen=True)
class ValidationReport:
    acyclic: bool
    raw_indegree_ok: bool
    weights_positive: bool
    ids_in_range: bool
    errors: tuple[ValidationError, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.errors

    def raise_if_failed(self) -> None:
        if self.errors:
            raise self.errors[0]


@dataclass(frozen=True)
class NetworkStats:
    n: int
    m: int
    rho: float
    k_avg: float
    n_l: int


class BomNetwork:
    """Immutable BOM graph with CSR storage of ``A`` and ``A^T``.

    Parameters
    ----------
    n : number of items.
    arcs : iterable of ``(i, j, a_ij)``.
    item_class : optional per-node classes; defaults to RAW for nodes with
        no components and PRODUCTION otherwise.
    names : optional display names.
    check : run :func:`validate` and raise on the first failure.
    """

    def __init__(
        self,
        n: int,
        arcs: Iterable[Sequence[float]],
        item_class: Sequence[ItemClass | str] | None = None,
        names: Sequence[str] | None = None,
        check: bool = True,
    ) -> None:
        n = int(n)
        if n < 1:
            raise DegenerateSize("a BOM network needs at least one item")
        arr = np.asarray(list(arcs), dtype=np.float64).reshape(-1, 3)
        src = arr[:, 0].astype(np.int64)
        dst = arr[:, 1].astype(np.int64)
        w = arr[:, 2].copy()
        order = np.lexsort((dst, src))
        self.n = n
        self.src = src[order]
        self.dst = dst[order]
        self.weight = w[order]
        for a in (self.src, self.dst, self.weight):
            a.flags.writeable = False
        indeg = np.bincount(self.dst[(self.dst >= 0) & (self.dst < n)], minlength=n)
        if item_class is None:
            self.item_class = tuple(
                ItemClass.RAW if d == 0 else ItemClass.PRODUCTION for d in indeg
            )
        else:
            if len(item_class) != n:
                raise DimensionMismatch("item_class length must equal n")
            self.item_class = tuple(ItemClass(c) for c in item_class)
        self.names = tuple(names) if names is not None else tuple(str(i) for i in range(n))
        if len(self.names) != n:
            raise DimensionMismatch("names length must equal n")
        self._report: ValidationReport | None = None
        self._n_l: int | None = None
        self._dense: np.ndarray | None = None
        self._dense_T: np.ndarray | None = None
        if check:
            self.require_valid()

    # -- storage ---------------------------------------------------------
    @property
    def m(self) -> int:
        return int(self.src.size)

    def require_valid(self) -> None:
        validate(self).raise_if_failed()
        if not hasattr(self, "A"):
            self._build()

    def _build(self) -> None:
        n = self.n
        self.A = sp.csr_matrix((self.weight, (self.src, self.dst)), shape=(n, n))
        self.A.sort_indices()
        self.AT = sp.csr_matrix((self.weight, (self.dst, self.src)), shape=(n, n))
        self.AT.sort_indices()
        # upstream structure of every item, i.e. row i of A^T
        self.up_ptr = self.AT.indptr
        self.up_idx = self.AT.indices
        self.up_count = np.diff(self.up_ptr)
        self.has_upstream = self.up_count > 0
        self.is_raw = np.array([c is ItemClass.RAW for c in self.item_class])

    @property
    def dense(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self.A.toarray()
            self._dense.flags.writeable = False
        return self._dense

    @property
    def dense_T(self) -> np.ndarray:
        if self._dense_T is None:
            self._dense_T = np.ascontiguousarray(self.dense.T)
            self._dense_T.flags.writeable = False
        return self._dense_T

    def arcs(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(a)) for i, j, a in zip(self.src, self.dst, self.weight)]

    def successors(self, i: int) -> np.ndarray:
        return self.A.indices[self.A.indptr[i] : self.A.indptr[i + 1]]

    def predecessors(self, j: int) -> np.ndarray:
        return self.up_idx[self.up_ptr[j] : self.up_ptr[j + 1]]

    @property
    def out_degree(self) -> np.ndarray:
        return np.diff(self.A.indptr)

    @property
    def in_degree(self) -> np.ndarray:
        return self.up_count

    @property
    def n_l(self) -> int:
        if self._n_l is None:
            self._n_l = layer_count(self)
        return self._n_l

    def with_arc(self, i: int, j: int, a: float) -> "BomNetwork":
        """Copy of this network with one more arc."""
        return BomNetwork(self.n, self.arcs() + [(i, j, a)], names=self.names)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BomNetwork):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.weight, other.weight)
            and self.item_class == other.item_class
        )

    def __repr__(self) -> str:
        return f"BomNetwork(n={self.n}, m={self.m})"

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        items = []
        for i, c in enumerate(self.item_class):
            item = {"id": i, "class": c.value}
            if self.names[i] != str(i):
                item["name"] = self.names[i]
            items.append(item)
        arcs = [[int(i), int(j), _num(a)] for i, j, a in zip(self.src, self.dst, self.weight)]
        return {"n": self.n, "items": items, "arcs": arcs}

    @classmethod
    def from_dict(cls, d: dict, check: bool = True) -> "BomNetwork":
        try:
            n = int(d["n"])
            items = sorted(d.get("items", []), key=lambda it: int(it["id"]))
            arcs = [(int(a[0]), int(a[1]), float(a[2])) for a in d["arcs"]]
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ValidationError(f"malformed network document: {exc}") from exc
        classes = names = None
        if items:
            if [int(it["id"]) for it in items] != list(range(n)):
                raise DanglingNodeId("item ids must be exactly 0..n-1")
            classes = [it["class"] for it in items]
            names = [it.get("name", str(it["id"])) for it in items]
        return cls(n, arcs, item_class=classes, names=names, check=check)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "BomNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _num(a: float) -> int | float:
    return int(a) if float(a).is_integer() else float(a)


# ---------------------------------------------------------------------------
# validation and structure
# ---------------------------------------------------------------------------


def _topo_levels(n: int, src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Kahn's algorithm, one frontier at a time.

    Returns ``(depth, remaining)``: longest-path depth of each node and a
    mask of nodes never released (non-empty iff the graph has a cycle).
    """
    indeg = np.bincount(dst, minlength=n).astype(np.int64)
    order = np.argsort(src, kind="stable")
    s_sorted, d_sorted = src[order], dst[order]
    ptr = np.searchsorted(s_sorted, np.arange(n + 1))
    depth = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    frontier = np.flatnonzero(indeg == 0)
    level = 0
    while frontier.size:
        done[frontier] = True
        depth[frontier] = level
        starts, stops = ptr[frontier], ptr[frontier + 1]
        counts = stops - starts
        if counts.sum() == 0:
            break
        idx = np.repeat(stops - counts.cumsum(), counts) + np.arange(counts.sum())
        targets = d_sorted[idx]
        np.subtract.at(indeg, targets, 1)
        cand = np.unique(targets)
        frontier = cand[indeg[cand] == 0]
        level += 1
    return depth, ~done


def _find_cycle(n: int, src: np.ndarray, dst: np.ndarray, remaining: np.ndarray) -> list[int]:
    # every remaining node has a remaining predecessor; walk back until a repeat
    pred: dict[int, int] = {}
    for i, j in zip(src.tolist(), dst.tolist()):
        if remaining[i] and remaining[j] and j not in pred:
            pred[j] = i
    node = int(np.flatnonzero(remaining)[0])
    seen: dict[int, int] = {}
    walk: list[int] = []
    while node not in seen:
        seen[node] = len(walk)
        walk.append(node)
        node = pred[node]
    cycle = walk[seen[node] :]
    cycle.reverse()
    return cycle


def validate(net: BomNetwork) -> ValidationReport:
    """Check ids, weights, raw-material in-degree and acyclicity."""
    if net._report is not None:
        return net._report
    n, src, dst, w = net.n, net.src, net.dst, net.weight
    errors: list[ValidationError] = []
    ids_ok = bool(np.all((src >= 0) & (src < n) & (dst >= 0) & (dst < n)))
    if not ids_ok:
        bad = np.flatnonzero(~((src >= 0) & (src < n) & (dst >= 0) & (dst < n)))[0]
        errors.append(DanglingNodeId(f"arc ({src[bad]}, {dst[bad]}) references an id outside [0, {n})"))
    w_ok = bool(np.all(w > 0) and np.all(np.isfinite(w)))
    if not w_ok:
        bad = np.flatnonzero(~(w > 0))[0] if np.any(~(w > 0)) else 0
        errors.append(NegativeWeight(f"arc ({src[bad]}, {dst[bad]}) has non-positive weight {w[bad]}"))
    raw_ok = True
    acyclic = True
    if ids_ok:
        keys = src * n + dst
        if np.unique(keys).size != keys.size:
            errors.append(ValidationError("duplicate arcs are not allowed"))
        indeg = np.bincount(dst, minlength=n)
        raw = np.array([c is ItemClass.RAW for c in net.item_class])
        raw_ok = not np.any(raw & (indeg > 0))
        if not raw_ok:
            bad = int(np.flatnonzero(raw & (indeg > 0))[0])
            errors.append(ValidationError(f"raw material {bad} has upstream components"))
        if np.any(src == dst):
            acyclic = False
            i = int(src[src == dst][0])
            errors.append(CycleDetected([i]))
        else:
            _, remaining = _topo_levels(n, src, dst)
            if remaining.any():
                acyclic = False
                errors.append(CycleDetected(_find_cycle(n, src, dst, remaining)))
    report = ValidationReport(acyclic, raw_ok, w_ok, ids_ok, tuple(errors))
    net._report = report
    return report


def layer_count(net: BomNetwork) -> int:
    """Number of layers: longest directed path length plus one."""
    validate(net).raise_if_failed()
    depth, _ = _topo_levels(net.n, net.src, net.dst)
    return int(depth.max()) + 1


def network_stats(net: BomNetwork) -> NetworkStats:
    validate(net).raise_if_failed()
    if net.n < 2:
        raise DegenerateSize("density needs n >= 2")
    m, n = net.m, net.n
    return NetworkStats(n=n, m=m, rho=m / (n * (n - 1)), k_avg=m / n, n_l=net.n_l)


def spmv_T(net: BomNetwork, x: np.ndarray) -> np.ndarray:
    """``x · A^T``, i.e. ``y_i = sum_j a_ij x_j``, touching only stored arcs."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.n:
        raise DimensionMismatch(f"vector length {x.shape[-1]} != n={net.n}")
    net.require_valid()
    if x.ndim == 1:
        return net.A @ x
    return (net.A @ x.T).T


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorSpec:
    n: int
    k: float = 10.0
    topology: Topology = Topology.GENERAL_DAG
    layers: int = 5
    weight_max: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "topology", Topology(self.topology))

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {"n", "k", "topology", "layers", "weight_max"}
        unknown = set(d) - known
        if unknown:
            raise InfeasibleSpec(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "topology": self.topology.value,
            "layers": self.layers,
            "weight_max": self.weight_max,
        }


def _assign_layers(rng: np.random.Generator, n: int, layers: int, single_root: bool) -> np.ndarray:
    layer = np.empty(n, dtype=np.int64)
    if single_root:
        layer[:layers] = np.arange(layers)
        layer[layers:] = rng.integers(0, layers - 1, size=n - layers)
    else:
        layer[:layers] = np.arange(layers)
        layer[layers:] = rng.integers(0, layers, size=n - layers)
    # random item ids so that id order carries no topological information
    return layer[rng.permutation(n)]


def generate(spec: GeneratorSpec, seed: int) -> BomNetwork:
    """Random BOM network; a pure function of ``(spec, seed)``."""
    n, k, L = int(spec.n), float(spec.k), int(spec.layers)
    if n < 1:
        raise InfeasibleSpec("n must be >= 1")
    if k >= n and Topology(spec.topology) is not Topology.SPANNING_TREE:
        raise InfeasibleSpec(f"average degree k={k} must satisfy k < n={n}")
    if not 1 <= L <= n:
        raise InfeasibleSpec(f"layers={L} must satisfy 1 <= layers <= n={n}")
    if spec.weight_max < 1:
        raise InfeasibleSpec("weight_max must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x80A]))
    topo = spec.topology

    if topo is Topology.GENERAL_DAG:
        layer = _assign_layers(rng, n, L, single_root=False)
        src, dst = _general_arcs(rng, layer, L, round(k * n))
    else:
        if L == 1 and n > 1:
            raise InfeasibleSpec(f"a tree on n={n} items needs layers >= 2")
        layer = _assign_layers(rng, n, L, single_root=True)
        src, dst = _tree_arcs(rng, layer, L)
        if topo is Topology.SHARED_COMPONENT_DAG:
            extra = round(k * n) - len(src)
            if extra < 1:
                raise InfeasibleSpec(
                    f"shared-component DAG needs k*n > n-1 to add shared arcs (k={k}, n={n})"
                )
            src, dst = _add_shared(rng, layer, L, src, dst, extra)
    w = rng.integers(1, spec.weight_max + 1, size=len(src)).astype(np.float64)
    arcs = np.column_stack([src, dst, w]) if len(src) else np.zeros((0, 3))
    return BomNetwork(n, arcs)


def _tree_arcs(rng: np.random.Generator, layer: np.ndarray, L: int) -> tuple[np.ndarray, np.ndarray]:
    by_layer = [np.flatnonzero(layer == ell) for ell in range(L)]
    src, dst = [], []
    for ell in range(L - 1):
        nodes = by_layer[ell]
        succ = by_layer[ell + 1][rng.integers(0, by_layer[ell + 1].size, size=nodes.size)]
        src.append(nodes)
        dst.append(succ)
    if not src:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(src), np.concatenate(dst)


def _general_arcs(
    rng: np.random.Generator, layer: np.ndarray, L: int, m: int
) -> tuple[np.ndarray, np.ndarray]:
    n = layer.size
    sizes = np.bincount(layer, minlength=L)
    earlier = np.concatenate([[0], np.cumsum(sizes)])[:-1]
    consumers = np.flatnonzero(layer > 0)
    cap = earlier[layer[consumers]]
    if m > cap.sum():
        raise InfeasibleSpec(f"requested {m} arcs but the layering admits at most {int(cap.sum())}")
    if consumers.size == 0:
        if m:
            raise InfeasibleSpec("a single layer cannot carry arcs")
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    deg = np.full(consumers.size, m // consumers.size, dtype=np.int64)
    deg[rng.choice(consumers.size, size=m % consumers.size, replace=False)] += 1
    # push degree beyond capacity onto consumers with room
    over = np.maximum(deg - cap, 0)
    deg -= over
    spill = int(over.sum())
    while spill:
        room = np.flatnonzero(deg < cap)
        take = rng.choice(room, size=min(spill, room.size), replace=False)
        deg[take] += 1
        spill -= take.size
    by_layer_sorted = np.argsort(layer, kind="stable")
    starts = np.concatenate([[0], np.cumsum(sizes)])
    src_parts, dst_parts = [], []
    for v, d in zip(consumers.tolist(), deg.tolist()):
        if d == 0:
            continue
        ell = layer[v]
        prev = by_layer_sorted[starts[ell - 1] : starts[ell]]
        first = prev[rng.integers(prev.size)]
        pool = by_layer_sorted[: starts[ell]]
        if d > 1:
            others = pool[rng.choice(pool.size, size=min(d, pool.size), replace=False)]
            others = others[others != first][: d - 1]
            chosen = np.concatenate([[first], others])
        else:
            chosen = np.array([first])
        src_parts.append(chosen)
        dst_parts.append(np.full(chosen.size, v))
    return np.concatenate(src_parts), np.concatenate(dst_parts)


def _add_shared(
    rng: np.random.Generator,
    layer: np.ndarray,
    L: int,
    src: np.ndarray,
    dst: np.ndarray,
    extra: int,
) -> tuple[np.ndarray, np.ndarray]:
    n = layer.size
    existing = set(zip(src.tolist(), dst.tolist()))
    above = n - np.cumsum(np.bincount(layer, minlength=L))
    capacity = int(above[layer].sum()) - len(existing)
    if extra > capacity:
        raise InfeasibleSpec(f"cannot add {extra} shared arcs; only {capacity} slots available")
    new_s, new_d = [], []
    upstream_ok = np.flatnonzero(layer < L - 1)
    while len(new_s) < extra:
        u = int(upstream_ok[rng.integers(upstream_ok.size)])
        later = np.flatnonzero(layer > layer[u])
        w = int(later[rng.integers(later.size)])
        if (u, w) in existing:
            continue
        existing.add((u, w))
        new_s.append(u)
        new_d.append(w)
    return np.concatenate([src, new_s]).astype(np.int64), np.concatenate([dst, new_d]).astype(np.int64)
