"""Choosing the children cap, the layer count and the distance thresholds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO, Sequence

from .core import UNBOUNDED, AggregationTree, ConfigError, DistanceMatrix, Node
from .tree import aggregate_layer, build_tree

STAGNATION_LIMIT = 10
MIN_FEATURES_FOR_AUTO_G = 16


def default_M() -> int:
    return 3


def default_L(m: int, M: float | int = 3, c_m: int = 30) -> int:
    """ceil(log_M(m / c_m)), floored at one layer.

    Computed as the smallest L with c_m * M**L >= m to dodge floating point
    trouble at exact powers.
    """
    if m < 1 or c_m < 1:
        raise ConfigError("m and c_m must be positive")
    if M == UNBOUNDED:
        return 1
    if M < 2:
        raise ConfigError("M must be >= 2")
    L = 0
    while c_m * M**L < m:
        L += 1
    return max(1, L)


def step_size(n: int, m: int) -> float:
    """Grid spacing 2 / sqrt(n log m log log m) (natural logs)."""
    if n < 1:
        raise ConfigError("sample size n must be >= 1")
    if m < MIN_FEATURES_FOR_AUTO_G:
        raise ConfigError(
            f"automatic threshold search needs m >= {MIN_FEATURES_FOR_AUTO_G} "
            f"(got m={m}); pass the thresholds explicitly"
        )
    return 2.0 / math.sqrt(n * math.log(m) * math.log(math.log(m)))


def _testable(nodes) -> int:
    return sum(1 for _, children in nodes if len(children) >= 2)


def count_testable_nodes(
    d: DistanceMatrix, M: float | int, lower_g: Sequence[float], g: float, layer: int
) -> int:
    """Number of layer-``layer`` nodes with at least two children when the
    tree is built with thresholds ``(*lower_g, g)``."""
    lower_g = tuple(lower_g)
    if len(lower_g) != layer - 2:
        raise ConfigError(f"layer {layer} needs {layer - 2} lower thresholds")
    if lower_g and not g > lower_g[-1]:
        raise ConfigError("candidate threshold must exceed the previous layer's")
    tree = build_tree(d, M, layer, lower_g + (g,))
    return sum(1 for n in tree.layer_nodes(layer) if len(n.children) >= 2)


@dataclass
class LayerSearch:
    layer: int
    base: float  # threshold of the layer below (0 for layer 2)
    candidates: list[tuple[int, float, int]] = field(default_factory=list)  # (k, g, count)
    chosen: float | None = None
    stop_reason: str = ""


@dataclass
class GSearchTrace:
    n: int
    m: int
    M: float | int
    L: int
    step: float
    upper_bound: float
    layers: list[LayerSearch] = field(default_factory=list)

    def write_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "k", "g_units", "g", "count", "chosen", "stop_reason"])
        for ls in self.layers:
            for k, g, count in ls.candidates:
                units = round(g / self.step, 9)
                w.writerow([ls.layer, k, units, repr(g), count, int(g == ls.chosen), ls.stop_reason])


def select_g(
    d: DistanceMatrix, n: int, M: float | int = 3, L: int = 2
) -> tuple[tuple[float, ...], GSearchTrace]:
    """Layer-by-layer grid search for g(2)..g(L).

    On layer l the grid is g(l-1) + k*s for k = 1, 2, ...; scanning stops when
    g passes (2 M^(L-2) - 1) * d_max or when the testable-node count failed to
    exceed the previous candidate's count ten times in a row. The smallest
    candidate reaching the largest count is chosen.
    """
    m = d.m
    s = step_size(n, m)
    if L < 2:
        raise ConfigError("threshold search needs L >= 2")
    d_max = d.nearest_neighbor_max()
    factor = 2 * M ** (L - 2) - 1 if M != UNBOUNDED else (1 if L == 2 else UNBOUNDED)
    upper = factor * d_max
    trace = GSearchTrace(n, m, M, L, s, upper)

    nodes = {i: Node(i, 1, (i,), ()) for i in range(m)}
    prev_ids: list[int] = list(range(m))
    next_id = m
    chosen: list[float] = []
    base = 0.0
    for ell in range(2, L + 1):
        prev = [nodes[i] for i in prev_ids]
        search = LayerSearch(ell, base)
        last = None
        stagnant = 1
        k = 1
        g = base + s
        while g <= upper and stagnant < STAGNATION_LIMIT:
            count = _testable(aggregate_layer(prev, d, M, g, ell))
            if last is not None and last >= count:
                stagnant += 1
            else:
                stagnant = 1
            search.candidates.append((k, g, count))
            last = count
            k += 1
            g = base + k * s
        if search.candidates:
            best = max(c for _, _, c in search.candidates)
            search.chosen = next(g for _, g, c in search.candidates if c == best)
            search.stop_reason = "stagnation" if stagnant >= STAGNATION_LIMIT else "upper-bound"
        else:
            search.chosen = base + s
            search.stop_reason = "empty-grid"
        trace.layers.append(search)
        chosen.append(search.chosen)
        base = search.chosen

        built = aggregate_layer(prev, d, M, base, ell)
        built.sort(key=lambda fc: fc[0][0])
        prev_ids = []
        for features, children in built:
            nodes[next_id] = Node(next_id, ell, features, children)
            prev_ids.append(next_id)
            next_id += 1
    return tuple(chosen), trace


def auto_tree(
    d: DistanceMatrix, n: int, M: float | int | None = None, L: int | None = None, c_m: int = 30
) -> tuple[AggregationTree, GSearchTrace | None]:
    """Default tuning end to end: M=3, L from c_m, thresholds by grid search."""
    M = default_M() if M is None else M
    L = default_L(d.m, M, c_m) if L is None else L
    if L == 1:
        return build_tree(d, M, 1, ()), None
    g, trace = select_g(d, n, M, L)
    return build_tree(d, M, L, g), trace
