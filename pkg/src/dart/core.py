"""Shared data model: distance matrices, trees, p-values, outcomes, metrics.

Feature indices are 0-based inside the library and 1-based in every
external format (JSON, CSV, CLI output).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EPS_CLIP = 1e-15
UNBOUNDED = math.inf


class DartError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(DartError, ValueError):
    """Malformed user input (distance matrix, p-values, files)."""


class ConfigError(DartError, ValueError):
    """Inconsistent or unsupported configuration."""


class NumericError(DartError, ArithmeticError):
    """A numerical routine could not produce a trustworthy answer."""


class UndefinedMetricError(DartError, ValueError):
    pass


# ---------------------------------------------------------------------------
# Distance matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    d: np.ndarray

    @property
    def m(self) -> int:
        return self.d.shape[0]

    def max_offdiag(self) -> float:
        if self.m < 2:
            return 0.0
        return float(self.d.max())

    def nearest_neighbor_max(self) -> float:
        """max_j min_{i != j} d_ij, the largest nearest-neighbour distance."""
        if self.m < 2:
            return 0.0
        d = self.d.copy()
        np.fill_diagonal(d, np.inf)
        return float(d.min(axis=1).max())


def validate_distance_matrix(raw, normalize: bool = False, tol: float = 1e-9) -> DistanceMatrix:
    d = np.array(raw, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValidationError(f"distance matrix must be square, got shape {d.shape}")
    m = d.shape[0]
    bad = np.argwhere(~np.isfinite(d))
    if bad.size:
        i, j = bad[0] + 1
        raise ValidationError(f"non-finite distance at ({i}, {j})")
    bad = np.argwhere(d < 0)
    if bad.size:
        i, j = bad[0] + 1
        raise ValidationError(f"negative distance {d[i - 1, j - 1]} at ({i}, {j})")
    diag = np.flatnonzero(np.diag(d) != 0)
    if diag.size:
        i = diag[0] + 1
        raise ValidationError(f"nonzero diagonal entry at ({i}, {i})")
    asym = np.argwhere(np.triu(np.abs(d - d.T) > tol))
    if asym.size:
        i, j = asym[0] + 1
        raise ValidationError(
            f"distance matrix not symmetric at ({i}, {j}): {d[i - 1, j - 1]} vs {d[j - 1, i - 1]}"
        )
    d = 0.5 * (d + d.T)
    if normalize and m > 1:
        top = d.max()
        if top > 0:
            d = d / top
    d.setflags(write=False)
    return DistanceMatrix(d)


def euclidean_distances(coords) -> DistanceMatrix:
    x = np.asarray(coords, dtype=float)
    if x.ndim != 2:
        raise ValidationError("coordinates must be an (m, k) array")
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    d.setflags(write=False)
    return DistanceMatrix(d)


# ---------------------------------------------------------------------------
# Tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    id: int
    layer: int
    features: tuple[int, ...]
    children: tuple[int, ...] = ()

    @property
    def is_carrier(self) -> bool:
        """True for a node copied up unchanged from the layer below."""
        return len(self.children) == 1


def _fmt_cap(M) -> int | str:
    return "inf" if M == UNBOUNDED else int(M)


def _parse_cap(value) -> float | int:
    if value in ("inf", "Infinity", None) or value == UNBOUNDED:
        return UNBOUNDED
    M = int(value)
    if M < 2:
        raise ConfigError(f"children cap M must be >= 2 or inf, got {value!r}")
    return M


@dataclass(frozen=True, eq=False)
class AggregationTree:
    m: int
    nodes: dict[int, Node]
    layers: tuple[tuple[int, ...], ...]
    M: float | int
    g: tuple[float, ...]

    @property
    def L(self) -> int:
        return len(self.layers)

    def layer_nodes(self, layer: int) -> list[Node]:
        return [self.nodes[i] for i in self.layers[layer - 1]]

    def to_dict(self) -> dict:
        return {
            "format": "dart-aggregation-tree",
            "version": 1,
            "m": self.m,
            "L": self.L,
            "config": {"M": _fmt_cap(self.M), "g": list(self.g)},
            "layers": [list(ids) for ids in self.layers],
            "nodes": [
                {
                    "id": n.id,
                    "layer": n.layer,
                    "features": [f + 1 for f in n.features],
                    "children": list(n.children),
                }
                for n in sorted(self.nodes.values(), key=lambda n: n.id)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AggregationTree":
        try:
            nodes = {
                int(rec["id"]): Node(
                    id=int(rec["id"]),
                    layer=int(rec["layer"]),
                    features=tuple(int(f) - 1 for f in rec["features"]),
                    children=tuple(int(c) for c in rec["children"]),
                )
                for rec in data["nodes"]
            }
            tree = cls(
                m=int(data["m"]),
                nodes=nodes,
                layers=tuple(tuple(int(i) for i in ids) for ids in data["layers"]),
                M=_parse_cap(data["config"]["M"]),
                g=tuple(float(x) for x in data["config"]["g"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed tree document: {exc!r}") from exc
        problems = tree_violations(tree)
        if problems:
            raise ValidationError("invalid tree: " + "; ".join(problems[:5]))
        return tree

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "AggregationTree":
        return cls.from_dict(json.loads(text))


def tree_violations(tree: AggregationTree, d: DistanceMatrix | None = None) -> list[str]:
    """Every structural invariant the tree breaks (empty list when valid).

    With ``d`` given, the diameter bound on each layer is checked as well.
    """
    out: list[str] = []
    full = set(range(tree.m))
    if tree.L < 1:
        return ["tree has no layers"]
    layer1 = tree.layer_nodes(1)
    if len(layer1) != tree.m or any(len(n.features) != 1 or n.children for n in layer1):
        out.append("layer 1 must hold exactly m childless singletons")
    for ell in range(1, tree.L + 1):
        seen: set[int] = set()
        for node in tree.layer_nodes(ell):
            if node.layer != ell:
                out.append(f"node {node.id} listed on layer {ell} but tagged {node.layer}")
            if not node.features:
                out.append(f"node {node.id} is empty")
            if seen.intersection(node.features):
                out.append(f"layer {ell}: node {node.id} overlaps a sibling")
            seen.update(node.features)
            if ell >= 2:
                kids = [tree.nodes.get(c) for c in node.children]
                if not kids or any(k is None or k.layer != ell - 1 for k in kids):
                    out.append(f"node {node.id}: children must lie on layer {ell - 1}")
                    continue
                union = set().union(*(k.features for k in kids))
                if union != set(node.features):
                    out.append(f"node {node.id}: features differ from union of children")
                if len(kids) > tree.M:
                    out.append(f"node {node.id}: {len(kids)} children exceeds M={tree.M}")
                if d is not None and len(node.features) > 1:
                    idx = np.array(node.features)
                    dia = d.d[np.ix_(idx, idx)].max()
                    if dia > tree.g[ell - 2]:
                        out.append(f"node {node.id}: diameter {dia} > g={tree.g[ell - 2]}")
        if seen != full:
            out.append(f"layer {ell} does not partition the features")
    return out


# ---------------------------------------------------------------------------
# P-values and configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PValueVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1:
            raise ValidationError("p-values must be a 1-d sequence")
        if np.any(np.isnan(v)) or np.any((v < 0) | (v > 1)):
            bad = np.flatnonzero(np.isnan(v) | (v < 0) | (v > 1))[0]
            raise ValidationError(f"p-value {v[bad]!r} at feature {bad + 1} outside [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def clipped(self, eps: float = EPS_CLIP) -> np.ndarray:
        return np.clip(self.values, eps, 1.0 - eps)


@dataclass(frozen=True)
class DartConfig:
    alpha: float
    M: float | int = 3
    L: int = 1
    g: tuple[float, ...] = ()
    c_m: int = 30
    normalize_distances: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        object.__setattr__(self, "M", _parse_cap(self.M))
        if self.L < 1:
            raise ConfigError("L must be >= 1")
        g = tuple(float(x) for x in self.g)
        object.__setattr__(self, "g", g)
        if len(g) != self.L - 1:
            raise ConfigError(f"expected {self.L - 1} thresholds g(2)..g(L), got {len(g)}")
        check_thresholds(g)


def check_thresholds(g: Sequence[float]) -> None:
    for a, b in zip(g, g[1:]):
        if not b > a:
            raise ConfigError(f"thresholds must be strictly increasing, got {list(g)}")


# ---------------------------------------------------------------------------
# Test outcome and metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkingNode:
    source: int
    features: tuple[int, ...]
    n_children: int
    pvalue: float


@dataclass(frozen=True)
class LayerResult:
    layer: int
    working: tuple[WorkingNode, ...]
    threshold: float | None
    rejected_nodes: tuple[int, ...]
    rejected_features: frozenset[int]
    cumulative: frozenset[int]

    @property
    def m_layer(self) -> int:
        return sum(len(w.features) for w in self.working)


@dataclass(frozen=True)
class TestOutcome:
    __test__ = False  # not a pytest class

    m: int
    alpha: float
    layers: tuple[LayerResult, ...] = field(default_factory=tuple)

    @property
    def rejected(self) -> frozenset[int]:
        return self.layers[-1].cumulative if self.layers else frozenset()

    def rejected_through(self, layer: int) -> frozenset[int]:
        return self.layers[layer - 1].cumulative

    def rejected_node_sets(self) -> list[tuple[int, ...]]:
        """Feature sets of every rejected node (working form), all layers."""
        out = []
        for lr in self.layers:
            by_src = {w.source: w for w in lr.working}
            out.extend(by_src[s].features for s in lr.rejected_nodes)
        return out

    def to_dict(self) -> dict:
        layers = []
        for lr in self.layers:
            rej = set(lr.rejected_nodes)
            layers.append({
                "layer": lr.layer,
                "threshold": lr.threshold,
                "m_layer": lr.m_layer,
                "working_nodes": [
                    {
                        "source": w.source,
                        "features": [f + 1 for f in w.features],
                        "n_children": w.n_children,
                        "pvalue": w.pvalue,
                        "rejected": w.source in rej,
                    }
                    for w in sorted(lr.working, key=lambda w: w.source)
                ],
                "rejected_nodes": sorted(lr.rejected_nodes),
                "rejected_features": sorted(f + 1 for f in lr.rejected_features),
                "cumulative_rejected": sorted(f + 1 for f in lr.cumulative),
            })
        return {"format": "dart-test-outcome", "version": 1, "m": self.m,
                "alpha": self.alpha, "layers": layers}

    @classmethod
    def from_dict(cls, data: dict) -> "TestOutcome":
        layers = []
        for rec in data["layers"]:
            working = tuple(
                WorkingNode(int(w["source"]), tuple(f - 1 for f in w["features"]),
                            int(w["n_children"]), float(w["pvalue"]))
                for w in rec["working_nodes"]
            )
            layers.append(LayerResult(
                layer=int(rec["layer"]),
                working=working,
                threshold=None if rec["threshold"] is None else float(rec["threshold"]),
                rejected_nodes=tuple(rec["rejected_nodes"]),
                rejected_features=frozenset(f - 1 for f in rec["rejected_features"]),
                cumulative=frozenset(f - 1 for f in rec["cumulative_rejected"]),
            ))
        return cls(m=int(data["m"]), alpha=float(data["alpha"]), layers=tuple(layers))


@dataclass(frozen=True)
class TruthAssignment:
    m: int
    alt: frozenset[int]

    @property
    def null(self) -> frozenset[int]:
        return frozenset(range(self.m)) - self.alt

    @classmethod
    def from_mask(cls, is_alt: Iterable[bool]) -> "TruthAssignment":
        mask = list(is_alt)
        return cls(len(mask), frozenset(i for i, a in enumerate(mask) if a))


def _rejected(outcome_or_set) -> frozenset[int]:
    if isinstance(outcome_or_set, TestOutcome):
        return outcome_or_set.rejected
    return frozenset(outcome_or_set)


def feature_fdp(rejected, truth: TruthAssignment) -> float:
    """|R & null| / max(|R|, 1). Accepts a TestOutcome or a feature set."""
    R = _rejected(rejected)
    return len(R - truth.alt) / max(len(R), 1)


def weighted_node_fdp(outcome: TestOutcome, truth: TruthAssignment) -> float:
    """Node-level FDP with each rejected node weighted by its size.

    A node counts as false only when every feature in it is null.
    """
    num = den = 0
    for feats in outcome.rejected_node_sets():
        den += len(feats)
        if truth.alt.isdisjoint(feats):
            num += len(feats)
    return num / max(den, 1)


def sensitivity(rejected, truth: TruthAssignment) -> float:
    if not truth.alt:
        raise UndefinedMetricError("sensitivity is undefined without alternative features")
    R = _rejected(rejected)
    return len(R & truth.alt) / len(truth.alt)
