"""Stage I: turn a distance matrix into an aggregation tree.

Each layer is built greedily from the one below with complete linkage:
repeatedly merge the closest candidate pair until the closest pair is
farther apart than the layer threshold. A merge producing exactly ``M``
children is frozen (it leaves the candidate pool); a merge that would
exceed ``M`` is vetoed for that pair only.

Ties are broken by candidate slot order. Slots list the previous layer's
nodes by id, followed by this layer's merged nodes in creation order, and
the pair with the smallest (first slot, second slot) wins.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .core import (
    UNBOUNDED,
    AggregationTree,
    ConfigError,
    DistanceMatrix,
    Node,
    ValidationError,
    check_thresholds,
)

MERGE_LOG_FIELDS = ("step", "layer", "node_a", "node_b", "distance", "action", "result")


def _as_index(features) -> np.ndarray:
    return np.fromiter(features, dtype=np.intp)


def node_dist(a, b, d: DistanceMatrix) -> float:
    """Complete-linkage distance: the largest cross distance between two nodes."""
    fa = a.features if isinstance(a, Node) else tuple(a)
    fb = b.features if isinstance(b, Node) else tuple(b)
    if not fa or not fb:
        raise ValueError("nodes must be nonempty")
    if not set(fa).isdisjoint(fb):
        raise ValueError("node_dist needs disjoint feature sets")
    return float(d.d[np.ix_(_as_index(fa), _as_index(fb))].max())


def node_diameter(a, d: DistanceMatrix) -> float:
    fa = a.features if isinstance(a, Node) else tuple(a)
    if not fa:
        raise ValueError("node must be nonempty")
    idx = _as_index(fa)
    return float(d.d[np.ix_(idx, idx)].max())


@dataclass
class MergeEvent:
    step: int
    layer: int
    node_a: str
    node_b: str
    distance: float
    action: str  # merge | cap-infinity | stop
    result: str = ""


def _linkage_matrix(prev: Sequence[Node], d: DistanceMatrix) -> np.ndarray:
    """Pairwise complete-linkage distances among the nodes of one layer."""
    if all(len(n.features) == 1 for n in prev):
        idx = np.array([n.features[0] for n in prev])
        return d.d[np.ix_(idx, idx)].astype(float)
    order = np.concatenate([_as_index(n.features) for n in prev])
    starts = np.cumsum([0] + [len(n.features) for n in prev[:-1]])
    sub = d.d[np.ix_(order, order)]
    rows = np.maximum.reduceat(sub, starts, axis=0)
    return np.maximum.reduceat(rows, starts, axis=1)


def aggregate_layer(
    prev: Sequence[Node],
    d: DistanceMatrix,
    M: float | int,
    g: float,
    layer: int,
    log: list[MergeEvent] | None = None,
) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Greedily aggregate the nodes of layer ``layer - 1``.

    Returns ``(features, children)`` pairs for the new layer, where children
    are ids of nodes in ``prev``. Carried-up nodes have a single child.
    """
    k = len(prev)
    cap = 2 * k
    D = np.full((cap, cap), np.inf)
    D[:k, :k] = _linkage_matrix(prev, d)
    np.fill_diagonal(D, np.inf)

    feats: list[tuple[int, ...]] = [n.features for n in prev]
    kids: list[tuple[int, ...]] = [(n.id,) for n in prev]
    labels = [str(n.id) for n in prev]
    active = np.zeros(cap, dtype=bool)
    active[:k] = True
    consumed = np.zeros(cap, dtype=bool)
    top = k  # next free slot

    rowmin = np.full(cap, np.inf)
    rowarg = np.full(cap, -1, dtype=np.intp)

    def refresh(r: int) -> None:
        if r + 1 >= top:
            rowmin[r], rowarg[r] = np.inf, -1
            return
        seg = D[r, r + 1:top]
        j = int(np.argmin(seg))
        rowmin[r], rowarg[r] = seg[j], r + 1 + j

    for r in range(k):
        refresh(r)

    def deactivate(s: int) -> None:
        active[s] = False
        D[s, :top] = np.inf
        D[:top, s] = np.inf
        rowmin[s], rowarg[s] = np.inf, -1

    old_left = k
    step = 0
    while old_left > 0:
        step += 1
        i = int(np.argmin(rowmin[:top]))
        dmin = rowmin[i]
        if not dmin <= g:
            if log is not None:
                log.append(MergeEvent(step, layer, labels[i] if math.isfinite(dmin) else "",
                                      labels[rowarg[i]] if math.isfinite(dmin) else "",
                                      float(dmin), "stop"))
            break
        j = int(rowarg[i])
        n_children = (len(kids[i]) if i >= k else 1) + (len(kids[j]) if j >= k else 1)
        if n_children > M:
            D[i, j] = D[j, i] = np.inf
            refresh(i)
            if log is not None:
                log.append(MergeEvent(step, layer, labels[i], labels[j], float(dmin), "cap-infinity"))
            continue

        s = top
        top += 1
        new_row = np.maximum(D[i, :top], D[j, :top])
        for src in (i, j):
            deactivate(src)
            if src < k:
                old_left -= 1
            else:
                consumed[src] = True
        new_row[[i, j, s]] = np.inf
        feats.append(tuple(sorted(feats[i] + feats[j])))
        kids.append((kids[i] if i >= k else (prev[i].id,)) + (kids[j] if j >= k else (prev[j].id,)))
        labels.append(f"t{s - k + 1}")
        if log is not None:
            log.append(MergeEvent(step, layer, labels[i], labels[j], float(dmin), "merge", labels[s]))

        stale = np.flatnonzero(active[:top] & ((rowarg[:top] == i) | (rowarg[:top] == j)))
        for r in stale:
            refresh(int(r))
        if n_children < M:
            active[s] = True
            D[s, :top] = new_row
            D[:top, s] = new_row
            better = active[:s] & (new_row[:s] < rowmin[:s])
            rowmin[:s][better] = new_row[:s][better]
            rowarg[:s][better] = s
            rowmin[s], rowarg[s] = np.inf, -1
        else:
            # frozen with exactly M children
            active[s] = False
            rowmin[s], rowarg[s] = np.inf, -1

    out = []
    for s in range(top):
        if s < k:
            if active[s]:
                out.append((feats[s], (prev[s].id,)))
        elif not consumed[s]:
            out.append((feats[s], tuple(sorted(kids[s]))))
    return out


def build_tree(
    d: DistanceMatrix,
    M: float | int = 3,
    L: int = 1,
    g: Sequence[float] = (),
    log: list[MergeEvent] | None = None,
) -> AggregationTree:
    """Build an ``L``-layer aggregation tree.

    ``g`` holds the thresholds for layers 2..L. Nodes on each layer are
    numbered consecutively, ordered by their smallest feature index; layer
    1 node ids coincide with the (0-based) feature indices.
    """
    if L < 1:
        raise ConfigError("L must be >= 1")
    g = tuple(float(x) for x in g)
    if len(g) != L - 1:
        raise ConfigError(f"need {L - 1} thresholds for an {L}-layer tree, got {len(g)}")
    check_thresholds(g)
    if M != UNBOUNDED and (int(M) != M or M < 2):
        raise ConfigError(f"children cap M must be an integer >= 2 or inf, got {M!r}")
    m = d.m
    if m < 1:
        raise ValidationError("distance matrix is empty")

    nodes = {i: Node(i, 1, (i,), ()) for i in range(m)}
    layers = [tuple(range(m))]
    next_id = m
    for ell in range(2, L + 1):
        prev = [nodes[i] for i in layers[-1]]
        built = aggregate_layer(prev, d, M, g[ell - 2], ell, log)
        built.sort(key=lambda fc: fc[0][0])
        ids = []
        for features, children in built:
            nodes[next_id] = Node(next_id, ell, features, children)
            ids.append(next_id)
            next_id += 1
        layers.append(tuple(ids))
    return AggregationTree(m=m, nodes=nodes, layers=tuple(layers), M=M, g=g)


def write_merge_log(events: Sequence[MergeEvent], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(MERGE_LOG_FIELDS)
    for e in events:
        w.writerow([e.step, e.layer, e.node_a, e.node_b, repr(e.distance), e.action, e.result])
