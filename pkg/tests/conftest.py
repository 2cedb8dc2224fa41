from __future__ import annotations

import math

import numpy as np
import pytest

from dart.core import validate_distance_matrix


def figure1_matrix() -> np.ndarray:
    """Seven-feature fixture: features 1..7 in two clusters plus two loners."""
    d = np.zeros((7, 7))

    def put(i, j, v):
        d[i - 1, j - 1] = d[j - 1, i - 1] = v

    put(1, 2, 2)
    put(3, 4, 2.5)
    put(3, 5, 2.5)
    put(4, 5, 3)
    for i in (1, 2):
        put(i, 3, 4)
        put(i, 4, 4.5)
        put(i, 5, 5)
    put(6, 7, 6)
    for i in range(1, 6):
        put(i, 6, 7)
        put(i, 7, 8)
    return d


@pytest.fixture
def fig1():
    return validate_distance_matrix(figure1_matrix())


@pytest.fixture
def three():
    # d12 = 1, d13 = 2, d23 = 1
    return validate_distance_matrix([[0, 1, 2], [1, 0, 1], [2, 1, 0]])


def reference_layer(prev_sets, prev_ids, d, M, g):
    """Plain transcription of the greedy layer step, O(k^3) per merge.

    Distances are recomputed from features every time, and a veto applies
    to the exact pair that would overflow the cap. Pool order is the slot
    order: previous-layer nodes first, merged nodes appended on creation.
    """
    pool = [{"features": tuple(f), "children": (i,), "new": False} for f, i in zip(prev_sets, prev_ids)]
    vetoed = []  # pairs of pool entries, compared by identity
    frozen = []
    while any(not e["new"] for e in pool):
        best = None
        for a in range(len(pool)):
            for b in range(a + 1, len(pool)):
                if any(pool[a] is x and pool[b] is y for x, y in vetoed):
                    continue
                dist = max(d[i, j] for i in pool[a]["features"] for j in pool[b]["features"])
                if best is None or dist < best[0]:
                    best = (dist, a, b)
        if best is None or best[0] > g:
            break
        _, a, b = best
        A, B = pool[a], pool[b]
        kids = A["children"] + B["children"]
        if len(kids) > M:
            vetoed.append((A, B))
            continue
        new = {"features": tuple(sorted(A["features"] + B["features"])), "children": kids, "new": True}
        pool = [e for e in pool if e is not A and e is not B]
        if len(kids) < M:
            pool.append(new)
        else:
            frozen.append(new)
    return [(e["features"], tuple(sorted(e["children"]))) for e in pool + frozen]


def reference_tree_sets(d, M, L, g):
    """Feature sets per layer (as sorted tuples) from the reference builder."""
    m = d.shape[0]
    sets = [tuple((i,) for i in range(m))]
    ids = list(range(m))
    next_id = m
    layers = [sorted(sets[0])]
    for ell in range(2, L + 1):
        built = reference_layer([s for s in layers[-1]], ids, d, M, g[ell - 2])
        built.sort(key=lambda fc: fc[0][0])
        layers.append([fc[0] for fc in built])
        ids = list(range(next_id, next_id + len(built)))
        next_id += len(built)
    return layers


def grid_threshold(pvalues, sizes, alpha, alpha_m, prior_num=0.0, prior_rej=0, points=10**6):
    """Largest grid point t in [alpha_m, alpha] meeting the FDP-estimate constraint."""
    ps = np.sort(np.asarray(pvalues, dtype=float))
    order = np.argsort(np.asarray(pvalues, dtype=float), kind="stable")
    cum = np.concatenate([[0.0], np.cumsum(np.asarray(sizes, dtype=float)[order])])
    m_layer = float(np.sum(sizes))
    t = np.linspace(alpha_m, alpha, points)
    # count of T_S < t is the number of sorted p-values strictly below t
    k = np.searchsorted(ps, t, side="left")
    den = np.maximum(prior_rej + cum[k], 1.0)
    ok = (prior_num + m_layer * t) <= alpha * den * (1 + 1e-12)
    if not ok.any():
        return None, (alpha - alpha_m) / (points - 1)
    return float(t[ok].max()), (alpha - alpha_m) / (points - 1)


def random_matrix(rng, m, kind=None):
    kind = kind or rng.choice(["euclid", "ties", "uniform"])
    if kind == "euclid":
        x = rng.normal(size=(m, 2))
        d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    elif kind == "ties":
        a = rng.integers(1, 5, size=(m, m)).astype(float)
        d = np.triu(a, 1)
        d = d + d.T
    else:
        a = rng.uniform(0.1, 3, size=(m, m))
        d = np.triu(a, 1)
        d = d + d.T
    return validate_distance_matrix(d)


def log_grid(lo, hi, k):
    return np.exp(np.linspace(math.log(lo), math.log(hi), k))


def replay_layers(tree, outcome, empty_charge="floor"):
    """Per layer: (working p-values, sizes, prior numerator, prior rejections,
    threshold, rejected sources, sources), rebuilt from a finished outcome."""
    from dart.engine import alpha_floor

    a_m = alpha_floor(tree.m)
    fill = a_m if empty_charge == "floor" else 0.0
    history, prior_rej, out = [], 0, []
    for res in outcome.layers:
        pv = np.array([w.pvalue for w in res.working])
        sizes = np.array([len(w.features) for w in res.working])
        prior_num = sum(ml * (fill if t is None else t) for ml, t in history)
        out.append((pv, sizes, prior_num, prior_rej, res.threshold, set(res.rejected_nodes),
                    [w.source for w in res.working]))
        history.append((int(sizes.sum()), res.threshold))
        prior_rej = len(res.cumulative)
    return out


def random_instance(rng, m_max=50):
    """Random Euclidean layout, random tree and p-values with some signal."""
    from dart.tree import build_tree

    m = int(rng.integers(5, m_max + 1))
    d = random_matrix(rng, m, "euclid")
    M = [2, 3, 4, math.inf][int(rng.integers(4))]
    L = int(rng.integers(1, 5))
    g = tuple(np.cumsum(rng.uniform(0.2, 1.0, L - 1)))
    tree = build_tree(d, M, L, g)
    p = rng.uniform(size=m)
    k = int(rng.integers(0, m // 2 + 1))
    p[rng.choice(m, k, replace=False)] = rng.uniform(0, 1e-3, k)
    alpha = float(rng.choice([0.05, 0.1, 0.2]))
    return tree, p, alpha
