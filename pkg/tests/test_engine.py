from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dart.core import ValidationError, WorkingNode, euclidean_distances
from dart.engine import (
    alpha_floor,
    combine_pvalues,
    form_working_nodes,
    layer1_threshold,
    layer_threshold,
    run_bh,
    run_dart,
    sup_threshold,
)
from dart.kernels import SeededRng
from dart.models import gen_layout
from dart.tree import build_tree
from dart.tuning import auto_tree

from conftest import grid_threshold, random_instance, replay_layers


def wn(source, feats, p, children=2):
    return WorkingNode(source, tuple(feats), children, p)


class TestCombine:
    def test_half(self):
        assert combine_pvalues([0.5, 0.5]) == pytest.approx(0.5, abs=1e-15)

    def test_two_small(self):
        assert combine_pvalues([0.05, 0.05]) == pytest.approx(0.01001, abs=1e-4)

    @given(st.floats(1e-12, 1 - 1e-12))
    def test_singleton(self, p):
        assert combine_pvalues([p]) == p

    def test_empty(self):
        with pytest.raises(ValueError):
            combine_pvalues([])

    def test_clipping(self):
        assert combine_pvalues([0.0, 0.0]) == combine_pvalues([1e-15, 1e-15])

    @settings(max_examples=300)
    @given(st.lists(st.floats(1e-6, 0.99), min_size=2, max_size=8), st.data())
    def test_monotone(self, p, data):
        i = data.draw(st.integers(0, len(p) - 1))
        lower = list(p)
        lower[i] = p[i] * 0.9
        assert combine_pvalues(lower) < combine_pvalues(p)


class TestLayerOne:
    def test_alpha_floor(self):
        assert alpha_floor(100) == pytest.approx(1 / (100 * math.sqrt(math.log(100))))

    def test_all_ones(self):
        assert layer1_threshold(np.ones(100), 0.1) == (None, frozenset())

    def test_ten_strong(self):
        p = np.r_[np.full(10, 0.001), np.full(90, 0.9)]
        t, rej = layer1_threshold(p, 0.1)
        assert t == pytest.approx(0.01, abs=1e-15)
        assert rej == frozenset(range(10))
        tg, step = grid_threshold(p, np.ones(100), 0.1, alpha_floor(100))
        assert abs(t - tg) <= step

    def test_single_tiny_below_floor(self):
        # the constraint gives t <= 5e-4, which is under alpha_m(100) = 0.00466
        p = np.r_[1e-6, np.full(99, 0.5)]
        assert layer1_threshold(p, 0.05) == (None, frozenset())
        assert grid_threshold(p, np.ones(100), 0.05, alpha_floor(100))[0] is None

    def test_matches_bh_inside_window(self):
        rng = np.random.default_rng(5)
        hits = 0
        for _ in range(200):
            p = rng.uniform(size=60)
            p[:20] *= 1e-3
            t, rej = layer1_threshold(p, 0.1)
            bh = run_bh(p, 0.1)
            k = len(bh)
            if k and alpha_floor(60) <= k * 0.1 / 60 <= 0.1:
                hits += 1
                assert rej == bh
        assert hits > 100


class TestWorkingNodes:
    def test_figure1_walkthrough(self, fig1):
        tree = build_tree(fig1, 3, 3, (3, 5))
        working = form_working_nodes(tree, 2, frozenset({0, 2}))
        assert [w.features for w in working] == [(3, 4)]
        assert working[0].n_children == 2
        assert tree.nodes[working[0].source].features == (2, 3, 4)

    def test_no_rejections(self, fig1):
        tree = build_tree(fig1, 3, 3, (3, 5))
        working = form_working_nodes(tree, 2, frozenset())
        assert [w.features for w in working] == [n.features for n in tree.layer_nodes(2) if len(n.children) >= 2]

    def test_fully_rejected_node_dropped(self, fig1):
        tree = build_tree(fig1, 3, 3, (3, 5))
        working = form_working_nodes(tree, 2, frozenset({0, 1}))
        assert [w.features for w in working] == [(2, 3, 4)]

    def test_working_pvalue(self, fig1):
        tree = build_tree(fig1, 3, 2, (3,))
        p = np.array([0.05, 0.05, 0.5, 0.5, 0.5, 0.3, 0.3])
        out = run_dart(tree, p, 0.05)
        w = {x.features: x.pvalue for x in out.layers[1].working}
        assert w[(0, 1)] == pytest.approx(combine_pvalues([0.05, 0.05]), rel=1e-12)
        assert w[(2, 3, 4)] == pytest.approx(0.5, abs=1e-12)


class TestLayerThreshold:
    def test_empty(self):
        assert layer_threshold([], 100, [(100, 0.01)], 3, 0.1) == (None, ())

    def test_prior_history(self):
        t, rej = layer_threshold([wn(7, (3, 4), 1e-6)], 100, [(100, 5e-4)], 1, 0.05)
        assert t == pytest.approx(0.05)
        assert rej == (7,)

    def test_prior_numerator_too_large(self):
        assert layer_threshold([wn(7, (3, 4), 1e-6)], 100, [(100, 0.1)], 1, 0.05) == (None, ())

    def test_strict_inequality(self):
        # the cap is loose enough that t-hat = alpha = the second p-value
        t, rej = layer_threshold([wn(1, (0,), 1e-3), wn(2, (1,), 0.1)], 100, [(100, 0.01)], 100, 0.1)
        assert t == 0.1
        assert rej == (1,)

    def test_empty_charge(self):
        node = [wn(7, (3, 4), 1e-6)]
        assert layer_threshold(node, 100, [(100, None)], 0, 0.1, "zero") == (pytest.approx(0.1), (7,))
        # charging the floor adds 100 * alpha_m = 0.466 to the numerator
        assert layer_threshold(node, 100, [(100, None)], 0, 0.1, "floor") == (None, ())

    def test_bad_charge(self):
        with pytest.raises(ValueError):
            layer_threshold([wn(7, (3, 4), 1e-6)], 100, [], 0, 0.1, "half")


class TestSupThreshold:
    def test_ties(self):
        p = np.r_[np.full(5, 0.002), np.full(5, 0.9)]
        t = sup_threshold(p, np.ones(10), 0.1, 0.001)
        assert t == pytest.approx(0.05)

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_grid_oracle(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 30))
        p = rng.uniform(size=k) ** 3
        sizes = rng.integers(1, 5, k)
        alpha = float(rng.choice([0.05, 0.1, 0.2]))
        a_m = alpha_floor(int(rng.integers(10, 200)))
        prior_num = float(rng.uniform(0, 2 * alpha))
        prior_rej = int(rng.integers(0, 10))
        t = sup_threshold(p, sizes, alpha, a_m, prior_num, prior_rej)
        tg, step = grid_threshold(p, sizes, alpha, a_m, prior_num, prior_rej, points=10**5)
        if t is None:
            assert tg is None
        else:
            assert tg is not None and abs(t - tg) <= step
            assert a_m <= t <= alpha


class TestRunDart:
    def test_size_mismatch(self, fig1):
        tree = build_tree(fig1, 3, 2, (3,))
        with pytest.raises(ValidationError):
            run_dart(tree, np.full(6, 0.5), 0.1)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, 1.5])
    def test_alpha_range(self, fig1, alpha):
        tree = build_tree(fig1, 3, 2, (3,))
        with pytest.raises(ValidationError):
            run_dart(tree, np.full(7, 0.5), alpha)

    def test_single_layer_equals_layer_one(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(size=40) ** 4
        from conftest import random_matrix

        tree = build_tree(random_matrix(rng, 40), 3, 1, ())
        out = run_dart(tree, p, 0.1)
        assert (out.layers[0].threshold, out.rejected) == layer1_threshold(p, 0.1)

    def test_all_ones(self, fig1):
        tree = build_tree(fig1, 3, 3, (3, 5))
        out = run_dart(tree, np.ones(7), 0.2)
        assert out.rejected == frozenset()
        assert all(layer.threshold is None for layer in out.layers)

    def test_layer_two_rejection(self):
        # fifty tight pairs; twenty features at 0.03 fail alone but their
        # pairs combine to about 0.004 and clear layer 2
        x = np.array([(10.0 * (i // 2) + 0.1 * (i % 2), 0.0) for i in range(100)])
        tree = build_tree(euclidean_distances(x), 3, 2, (1.0,))
        p = np.r_[np.full(20, 0.03), np.full(80, 0.9)]
        out = run_dart(tree, p, 0.1)
        assert out.layers[0].threshold is None
        # (100 alpha_m + 100 t) / 20 <= 0.1 gives t = 0.02 - alpha_m
        assert out.layers[1].threshold == pytest.approx(0.02 - alpha_floor(100), rel=1e-12)
        assert out.layers[1].rejected_features == frozenset(range(20))

    def test_seeded_small_design(self):
        rng = SeededRng(0)
        layout = gen_layout(100, rng.child(0))
        tree, _ = auto_tree(layout.distances, 90)
        from dart.models import gen_pvalues_direct, gen_theta

        theta = gen_theta("SE1", 90, 100, layout.distances).theta
        p = gen_pvalues_direct("SE1", theta, 90, rng.child(1))
        out = run_dart(tree, p, 0.1)
        assert len(out.rejected_through(2)) >= len(out.rejected_through(1))

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["floor", "zero"]))
    def test_structure(self, seed, charge):
        tree, p, alpha = random_instance(np.random.default_rng(seed))
        out = run_dart(tree, p, alpha, charge)
        seen = set()
        prev = 0
        for layer in out.layers:
            assert not (layer.rejected_features & seen)
            seen |= layer.rejected_features
            assert layer.cumulative == frozenset(seen)
            assert len(layer.cumulative) >= prev
            prev = len(layer.cumulative)
            if layer.threshold is None:
                assert not layer.rejected_features
        # every working node holds at least two live children and no rejected feature
        for ell in range(2, tree.L + 1):
            before = out.rejected_through(ell - 1)
            for w in out.layers[ell - 1].working:
                assert w.n_children >= 2 and not set(w.features) & before

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_grid_oracle_per_layer(self, seed):
        tree, p, alpha = random_instance(np.random.default_rng(seed), m_max=30)
        out = run_dart(tree, p, alpha)
        a_m = alpha_floor(tree.m)
        for pv, sizes, num, rej, thr, rejected, sources in replay_layers(tree, out):
            if len(pv) == 0:
                assert thr is None
                continue
            tg, step = grid_threshold(pv, sizes, alpha, a_m, num, rej, points=10**5)
            if thr is None:
                assert tg is None
            else:
                assert abs(thr - tg) <= step
                assert {s for s, v in zip(sources, pv) if v < tg} == rejected

    def test_null_calibration(self):
        d = gen_layout(200, SeededRng(11).child(0)).distances
        tree, _ = auto_tree(d, 90)
        assert tree.L == 2
        any_rej = 0
        for r in range(500):
            p = SeededRng(11).child(1, r).gen.uniform(size=200)
            any_rej += bool(run_dart(tree, p, 0.1).rejected)
        assert any_rej / 500 <= 0.15


class TestBH:
    def test_example(self):
        assert run_bh([0.01, 0.02, 0.04, 0.9], 0.1) == frozenset({0, 1, 2})

    def test_all_ones(self):
        assert run_bh(np.ones(10), 0.1) == frozenset()

    def test_boundary_inclusive(self):
        assert run_bh([0.1], 0.1) == frozenset({0})

    def test_step_up(self):
        # p_(1) fails its own bound but p_(2) passes, so both go
        assert run_bh([0.04, 0.05], 0.1) == frozenset({0, 1})

    @settings(max_examples=200)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.sampled_from([0.05, 0.1, 0.2]))
    def test_exhaustive(self, p, alpha):
        m = len(p)
        k = max([k for k in range(1, m + 1) if sorted(p)[k - 1] <= k * alpha / m], default=0)
        got = run_bh(p, alpha)
        assert len(got) == k
        if k:
            cut = sorted(p)[k - 1]
            assert all(p[i] <= cut for i in got)
