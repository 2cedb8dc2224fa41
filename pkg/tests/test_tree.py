from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dart.core import ConfigError, tree_violations, validate_distance_matrix
from dart.tree import build_tree, node_diameter, node_dist, write_merge_log

from conftest import reference_tree_sets, random_matrix


def sets_on(tree, layer):
    return [tuple(f + 1 for f in n.features) for n in tree.layer_nodes(layer)]


class TestLinkage:
    def test_singletons(self, fig1):
        assert node_dist((2,), (5,), fig1) == fig1.d[2, 5]

    def test_figure1_cluster_distance(self, fig1):
        assert node_dist((0, 1), (2, 3, 4), fig1) == 5

    def test_overlap_rejected(self, fig1):
        with pytest.raises(ValueError):
            node_dist((0, 1), (1, 2), fig1)

    def test_diameter(self, fig1):
        assert node_diameter((3,), fig1) == 0
        assert node_diameter((0, 1, 2, 3, 4), fig1) == 5

    def test_diameter_of_union(self, fig1):
        a, b = (0, 1), (2, 3, 4)
        dia = node_diameter(a + b, fig1)
        assert dia == max(node_diameter(a, fig1), node_diameter(b, fig1), node_dist(a, b, fig1))


class TestFigure1:
    def test_layers(self, fig1):
        tree = build_tree(fig1, 3, 3, (3, 5))
        assert sets_on(tree, 2) == [(1, 2), (3, 4, 5), (6,), (7,)]
        assert sets_on(tree, 3) == [(1, 2, 3, 4, 5), (6,), (7,)]

    def test_children_and_carriers(self, fig1):
        tree = build_tree(fig1, 3, 3, (3, 5))
        top = tree.layer_nodes(3)
        assert len(top[0].children) == 2
        assert top[1].is_carrier and top[1].features == (5,)
        assert tree.nodes[top[1].children[0]].features == (5,)

    def test_layer_one_ids_are_features(self, fig1):
        tree = build_tree(fig1, 3, 2, (3,))
        assert [n.id for n in tree.layer_nodes(1)] == list(range(7))

    def test_ids_ordered_by_smallest_feature(self, fig1):
        tree = build_tree(fig1, 3, 3, (3, 5))
        ids = [n.id for layer in range(1, 4) for n in tree.layer_nodes(layer)]
        assert ids == list(range(len(ids)))


class TestHandTraces:
    def test_three_features_merge_fully(self, three):
        tree = build_tree(three, 3, 2, (2.0,))
        assert sets_on(tree, 2) == [(1, 2, 3)]
        assert tree.layer_nodes(2)[0].children == (0, 1, 2)

    def test_three_features_threshold_blocks(self, three):
        tree = build_tree(three, 3, 2, (1.5,))
        assert sets_on(tree, 2) == [(1, 2), (3,)]

    def test_single_feature(self):
        d = validate_distance_matrix([[0.0]])
        tree = build_tree(d, 3, 4, (1, 2, 3))
        assert all(sets_on(tree, layer) == [(1,)] for layer in range(1, 5))

    def test_cap_two_vetoes_third_member(self, three):
        # M = 2: {1,2} is frozen, so {3} stays alone
        tree = build_tree(three, 2, 2, (2.0,))
        assert sets_on(tree, 2) == [(1, 2), (3,)]

    def test_cap_infinity_sentinel(self):
        # {1,2} and {3,4} would give 4 children > M=3; the pair is vetoed
        # and {5} then joins {1,2}
        x = np.array([[0, 0], [0.1, 0], [0.3, 0], [0.4, 0], [0.2, 0.45]])
        d = validate_distance_matrix(np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1)))
        log = []
        tree = build_tree(d, 3, 2, (1.0,), log=log)
        assert any(e.action == "cap-infinity" for e in log)
        assert tree_violations(tree, d) == []
        assert max(len(n.children) for n in tree.layer_nodes(2)) <= 3
        assert sets_on(tree, 2) == [(1, 2, 5), (3, 4)]

    def test_merge_log_csv(self, three):
        log = []
        build_tree(three, 3, 2, (1.5,), log=log)
        buf = io.StringIO()
        write_merge_log(log, buf)
        rows = buf.getvalue().strip().splitlines()
        assert rows[0] == "step,layer,node_a,node_b,distance,action,result"
        assert rows[1].split(",")[5] == "merge"
        assert rows[-1].split(",")[5] == "stop"


class TestErrors:
    def test_non_increasing(self, fig1):
        with pytest.raises(ConfigError):
            build_tree(fig1, 3, 3, (5, 3))

    def test_wrong_count(self, fig1):
        with pytest.raises(ConfigError):
            build_tree(fig1, 3, 3, (5,))

    @pytest.mark.parametrize("M", [1, 2.5, 0])
    def test_bad_cap(self, fig1, M):
        with pytest.raises(ConfigError):
            build_tree(fig1, M, 2, (3,))


class TestProperties:
    def test_unbounded_cap_large_g_stops_when_old_nodes_absorbed(self, fig1):
        # the layer ends once no previous-layer node is left unmerged, so
        # {6,7} and {1..5} only meet on the next layer
        tree = build_tree(fig1, math.inf, 3, (100.0, 101.0))
        assert sets_on(tree, 2) == [(1, 2, 3, 4, 5), (6, 7)]
        assert sets_on(tree, 3) == [tuple(range(1, 8))]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_unbounded_cap_large_g_halves_each_layer(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 30))
        d = random_matrix(rng, m)
        L = math.ceil(math.log2(m)) + 1
        g = tuple(1e6 + np.arange(L - 1))
        tree = build_tree(d, math.inf, L, g)
        for layer in range(2, L + 1):
            below = len(tree.layer_nodes(layer - 1))
            here = tree.layer_nodes(layer)
            if below > 1:
                assert all(len(n.children) >= 2 for n in here)
        assert len(tree.layer_nodes(L)) == 1

    def test_small_g_copies_layer_one(self, fig1):
        tree = build_tree(fig1, 3, 3, (0.5, 1.0))
        for layer in (2, 3):
            assert sets_on(tree, layer) == [(i,) for i in range(1, 8)]
            assert all(n.is_carrier for n in tree.layer_nodes(layer))

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        d = random_matrix(rng, 40, "ties")
        a = build_tree(d, 3, 3, (2.0, 3.0))
        b = build_tree(d, 3, 3, (2.0, 3.0))
        assert a.to_json() == b.to_json()

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_literal_reference(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 13))
        d = random_matrix(rng, m)
        M = [2, 3, math.inf][seed % 3]
        L = int(rng.integers(2, 5))
        g = tuple(np.sort(rng.choice(np.linspace(0.05, 5, 60), L - 1, replace=False)))
        tree = build_tree(d, M, L, g)
        ref = reference_tree_sets(d.d, M, L, g)
        mine = [[n.features for n in tree.layer_nodes(layer)] for layer in range(1, L + 1)]
        assert mine == ref

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_greedy_local_optimality(self, seed):
        """Replay the merge log: each merge took a closest admissible pair."""
        rng = np.random.default_rng(seed)
        m = int(rng.integers(3, 25))
        d = random_matrix(rng, m)
        M = [2, 3, 4, math.inf][seed % 4]
        g = float(rng.uniform(0.3, 3))
        log = []
        tree = build_tree(d, M, 2, (g,), log=log)
        pool = {str(i): ((i,), 1, False) for i in range(m)}  # features, child count, merged
        vetoed = set()
        for e in log:
            if e.action == "stop":
                break
            best = min(
                max(d.d[i, j] for i in pool[a][0] for j in pool[b][0])
                for a in pool for b in pool
                if a < b and frozenset((a, b)) not in vetoed
                and pool[a][1] + pool[b][1] <= M
            )
            if e.action == "cap-infinity":
                vetoed.add(frozenset((e.node_a, e.node_b)))
                continue
            assert e.distance <= best + 1e-12
            fa, ca, _ = pool.pop(e.node_a)
            fb, cb, _ = pool.pop(e.node_b)
            if ca + cb < M:
                pool[e.result] = (fa + fb, ca + cb, True)
        assert tree_violations(tree, d) == []
