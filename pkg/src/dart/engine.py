"""Stage II: recursive testing on the aggregation tree, plus the BH baseline."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .core import (
    EPS_CLIP,
    AggregationTree,
    LayerResult,
    PValueVector,
    TestOutcome,
    ValidationError,
    WorkingNode,
)
from .kernels import std_normal_sf, std_normal_sf_array, std_normal_sf_inv, std_normal_sf_inv_array


def alpha_floor(m: int) -> float:
    """Smallest threshold ever considered, 1 / (m sqrt(log m))."""
    if m < 2:
        raise ValueError("alpha floor needs m >= 2")
    return 1.0 / (m * math.sqrt(math.log(m)))


def combine_pvalues(p: Sequence[float]) -> float:
    """Stouffer-type combination of a node's feature p-values."""
    p = [min(max(float(x), EPS_CLIP), 1.0 - EPS_CLIP) for x in p]
    if not p:
        raise ValueError("cannot combine an empty list of p-values")
    if len(p) == 1:
        return p[0]
    z = sum(std_normal_sf_inv(x) for x in p) / math.sqrt(len(p))
    return std_normal_sf(z)


def sup_threshold(
    pvalues: np.ndarray,
    sizes: np.ndarray,
    alpha: float,
    alpha_m: float,
    prior_num: float = 0.0,
    prior_rej: int = 0,
) -> float | None:
    """Exact sup of t in [alpha_m, alpha] with
    (prior_num + m_l t) / max(prior_rej + sum_S |S| 1{T_S < t}, 1) <= alpha.

    The rejection count is constant on each interval (T_(k), T_(k+1)] of the
    sorted working p-values, so the constraint is linear there and each
    interval's sup is available in closed form. Returns None when no t is
    feasible.
    """
    pvalues = np.asarray(pvalues, dtype=float)
    sizes = np.asarray(sizes, dtype=float)
    m_layer = sizes.sum()
    if m_layer <= 0:
        return None
    order = np.argsort(pvalues, kind="stable")
    ps = pvalues[order]
    cum = np.concatenate([[0.0], np.cumsum(sizes[order])])
    # interval q covers (left_q, right_q]; with ties only the last index of a
    # run marks a real breakpoint, earlier ones give empty intervals
    left = np.concatenate([[-np.inf], ps])
    right = np.concatenate([ps, [np.inf]])
    den = np.maximum(prior_rej + cum, 1.0)
    cap = (alpha * den - prior_num) / m_layer
    hi = np.minimum(np.minimum(right, cap), alpha)
    feasible = np.where(alpha_m > left, alpha_m <= hi, left < hi)
    if not feasible.any():
        return None
    return float(hi[feasible].max())


def layer1_threshold(T: PValueVector | np.ndarray, alpha: float) -> tuple[float | None, frozenset[int]]:
    t = np.asarray(T.values if isinstance(T, PValueVector) else T, dtype=float)
    m = t.shape[0]
    thr = sup_threshold(t, np.ones(m), alpha, alpha_floor(m))
    if thr is None:
        return None, frozenset()
    return thr, frozenset(np.flatnonzero(t < thr).tolist())


def form_working_nodes(
    tree: AggregationTree,
    layer: int,
    rejected: frozenset[int] | set[int],
    z: np.ndarray | None = None,
) -> list[WorkingNode]:
    """Working nodes on ``layer``: tree nodes minus already rejected features,
    kept only when at least two nonempty working children remain.

    With ``z`` (the per-feature probit scores) the working p-values are filled
    in; otherwise they are NaN.
    """
    if not 2 <= layer <= tree.L:
        raise ValueError(f"layer must be in 2..{tree.L}")
    out = []
    for node in tree.layer_nodes(layer):
        live_children = 0
        for c in node.children:
            if not rejected.issuperset(tree.nodes[c].features):
                live_children += 1
        if live_children < 2:
            continue
        feats = tuple(f for f in node.features if f not in rejected)
        if z is None:
            pv = math.nan
        else:
            pv = float(std_normal_sf_array(z[list(feats)].sum() / math.sqrt(len(feats))))
        out.append(WorkingNode(node.id, feats, live_children, pv))
    return out


EMPTY_CHARGES = ("floor", "zero")


def layer_threshold(
    working: Sequence[WorkingNode],
    m: int,
    history: Sequence[tuple[int, float | None]],
    prior_rej: int,
    alpha: float,
    empty_charge: str = "floor",
) -> tuple[float | None, tuple[int, ...]]:
    """Threshold one layer given the (m_layer, threshold) history below it.

    A layer below whose feasible set was empty rejected nothing. With
    ``empty_charge="floor"`` it still adds m_layer * alpha_m to the numerator,
    as if it had been tested at the smallest admissible level; with
    ``"zero"`` it adds nothing.
    """
    if empty_charge not in EMPTY_CHARGES:
        raise ValueError(f"empty_charge must be one of {EMPTY_CHARGES}")
    if not working:
        return None, ()
    a_m = alpha_floor(m)
    fill = a_m if empty_charge == "floor" else 0.0
    prior_num = sum(ml * (fill if t is None else t) for ml, t in history)
    pv = np.array([w.pvalue for w in working])
    sizes = np.array([len(w.features) for w in working])
    thr = sup_threshold(pv, sizes, alpha, a_m, prior_num, prior_rej)
    if thr is None:
        return None, ()
    return thr, tuple(w.source for w in working if w.pvalue < thr)


def run_dart(
    tree: AggregationTree, T: PValueVector | np.ndarray, alpha: float, empty_charge: str = "floor"
) -> TestOutcome:
    if not isinstance(T, PValueVector):
        T = PValueVector(np.asarray(T, dtype=float))
    if len(T) != tree.m:
        raise ValidationError(f"tree has {tree.m} features but {len(T)} p-values were given")
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    if empty_charge not in EMPTY_CHARGES:
        raise ValidationError(f"empty_charge must be one of {EMPTY_CHARGES}")
    m = tree.m
    clipped = T.clipped()
    z = std_normal_sf_inv_array(clipped)

    thr, rej1 = layer1_threshold(clipped, alpha)
    working1 = tuple(WorkingNode(i, (i,), 0, float(clipped[i])) for i in range(m))
    layers = [LayerResult(1, working1, thr, tuple(sorted(rej1)), rej1, rej1)]
    history = [(m, thr)]
    cumulative = rej1
    for ell in range(2, tree.L + 1):
        working = form_working_nodes(tree, ell, cumulative, z)
        thr, rej_nodes = layer_threshold(working, m, history, len(cumulative), alpha, empty_charge)
        by_src = {w.source: w for w in working}
        new = frozenset(f for s in rej_nodes for f in by_src[s].features)
        cumulative = cumulative | new
        layers.append(LayerResult(ell, tuple(working), thr, rej_nodes, new, cumulative))
        history.append((sum(len(w.features) for w in working), thr))
    return TestOutcome(m=m, alpha=alpha, layers=tuple(layers))


def run_bh(T: PValueVector | np.ndarray, alpha: float) -> frozenset[int]:
    """Benjamini-Hochberg step-up: reject the k smallest, k = max{k : p_(k) <= k alpha / m}."""
    t = np.asarray(T.values if isinstance(T, PValueVector) else T, dtype=float)
    m = t.shape[0]
    if m == 0:
        return frozenset()
    order = np.argsort(t, kind="stable")
    ok = np.flatnonzero(t[order] <= alpha * np.arange(1, m + 1) / m)
    if ok.size == 0:
        return frozenset()
    return frozenset(order[: ok[-1] + 1].tolist())
