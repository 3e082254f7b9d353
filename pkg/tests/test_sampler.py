import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import random_graph
from oracles import dense_rho, walk_emission_distribution
from cosam.graph import InteractionGraph
from cosam.sampler import (SamplerConfig, SamplerModel, Terminal, WalkPath, apply_gradient,
                           arw_sample, draw_candidate_set, draw_candidates, enumerate_paths,
                           exact_policy_gradient, exact_rho, log_path_grad, path_strength,
                           policy_gradient, sample_walks, truncated_rho, uniform_component_p0)


def model_for(graph, c1=0.5, c2=0.5, l_max=10, mult=5.0, logits=None):
    return SamplerModel(graph, SamplerConfig(c1, c2, l_max, mult), logits)


class TestConfig:
    @pytest.mark.parametrize("c1,c2,l_max,mult", [(1, 1, 10, 5), (0.5, 1.2, 10, 5),
                                                   (0.5, 0.5, 0, 5), (0.5, 0.5, 3, 0)])
    def test_invalid(self, c1, c2, l_max, mult):
        with pytest.raises(ValueError):
            SamplerConfig(c1, c2, l_max, mult)

    def test_single_one_allowed(self):
        SamplerConfig(1.0, 0.5)
        SamplerConfig(0.5, 1.0)

    def test_draw_count(self):
        cfg = SamplerConfig(candidate_multiplier=5)
        assert cfg.draw_count([4, 0, 1]).tolist() == [20, 1, 5]


class TestWeights:
    def test_init_uniform(self):
        g = InteractionGraph(2, 3, [(0, 0), (0, 1), (0, 2), (1, 2)])
        sm = SamplerModel.init(g, SamplerConfig())
        np.testing.assert_allclose(sm.transition_weights(0), [1 / 3] * 3)
        np.testing.assert_allclose(sm.transition_weights(1), [1.0])

    def test_isolated_node(self):
        g = InteractionGraph(2, 1, [(0, 0)])
        sm = SamplerModel.init(g, SamplerConfig())
        assert sm.is_degenerate(1)
        with pytest.raises(ValueError):
            sm.transition_weights(1)

    def test_softmax_values_and_shift(self):
        g = InteractionGraph(1, 2, [(0, 0), (0, 1)])
        sm = model_for(g, logits=[math.log(2), 0.0, 0.0, 0.0])
        np.testing.assert_allclose(sm.transition_weights(0), [2 / 3, 1 / 3], atol=1e-15)
        shifted = model_for(g, logits=sm.logits + 5.0)
        np.testing.assert_allclose(shifted.transition_weights(0), [2 / 3, 1 / 3], atol=1e-15)
        np.testing.assert_allclose(model_for(g).transition_weights(0), [0.5, 0.5])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, 5, 6, 0.4)
        sm = model_for(g, logits=rng.normal(0, 3, len(g.indices)))
        sums = np.bincount(g.edge_src, weights=sm.weights, minlength=g.num_nodes)
        np.testing.assert_allclose(sums[g.degrees > 0], 1.0, atol=1e-12)
        assert np.all(sm.weights > 0)


class TestP0:
    def test_values(self):
        assert uniform_component_p0(SamplerConfig(0.0, 0.7), 8) == pytest.approx(1 / 8)
        assert uniform_component_p0(SamplerConfig(0.5, 0.5), 4) == pytest.approx(1 / 6)
        assert uniform_component_p0(SamplerConfig(1.0, 0.5), 4) == 0.0


class TestWalks:
    def test_c1_zero_is_uniform(self, small_graph):
        sm = model_for(small_graph, c1=0.0)
        w = sample_walks(sm, np.zeros(50_000, dtype=int), np.random.default_rng(0))
        assert np.all(w.lengths == 0) and np.all(w.terminal == Terminal.USER)
        counts = np.bincount(w.emitted, minlength=small_graph.m)
        assert stats.chisquare(counts).pvalue > 0.001

    def test_c2_zero_two_step_mixture(self):
        g = InteractionGraph(2, 3, [(0, 0), (0, 1), (1, 1), (1, 2)])
        c = 0.7
        sm = model_for(g, c1=c, c2=0.0, logits=[math.log(3), 0.0, 0, 0, 0, 0, 0, 0])
        # user 0 moves to item 0 w.p. 3/4, item 1 w.p. 1/4, then stops there
        expected = (1 - c) / 3 + c * np.array([0.75, 0.25, 0.0])
        np.testing.assert_allclose(exact_rho(sm, [0], tol=1e-14).rho[0], expected, atol=1e-12)
        w = sample_walks(sm, np.zeros(100_000, dtype=int), np.random.default_rng(1))
        freq = np.bincount(w.emitted, minlength=3) / len(w)
        np.testing.assert_allclose(freq, expected, atol=4 * np.sqrt(0.25 / len(w)))
        assert w.lengths.max() <= 1

    def test_isolated_start_user(self):
        g = InteractionGraph(2, 2, [(0, 0), (0, 1)])
        p = arw_sample(model_for(g, c1=0.99), 1, np.random.default_rng(0))
        assert p.length == 0 and p.terminal == Terminal.USER

    def test_path_structure(self, small_graph):
        g = small_graph
        sm = model_for(g, c1=0.9, c2=0.9, l_max=6,
                       logits=np.random.default_rng(2).normal(0, 1, len(g.indices)))
        w = sample_walks(sm, np.arange(g.n).repeat(500), np.random.default_rng(3))
        assert w.lengths.max() <= 6
        assert np.any(w.terminal == Terminal.TRUNCATED)
        for k in range(0, len(w), 97):
            p = w.path(k)
            side = p.nodes < g.n
            assert side[0] and np.all(side[::2]) and not np.any(side[1::2])
            for a, b, e in zip(p.nodes[:-1], p.nodes[1:], p.edges):
                assert g.edge_src[e] == a and g.indices[e] == b
            if p.terminal == Terminal.ITEM:
                assert p.emitted_item == p.nodes[-1] - g.n

    def test_walk_length_bound(self, small_graph):
        sm = model_for(small_graph, c1=0.5, c2=0.5, l_max=10)
        w = sample_walks(sm, np.zeros(100_000, dtype=int), np.random.default_rng(4))
        se = w.lengths.std() / np.sqrt(len(w))
        assert w.lengths.mean() <= 2 / (1 - 0.5) + 3 * se

    def test_matches_truncated_distribution(self, small_graph):
        g = small_graph
        logits = np.random.default_rng(5).normal(0, 1, len(g.indices))
        sm = model_for(g, c1=0.8, c2=0.7, l_max=4, logits=logits)
        ref, _ = walk_emission_distribution(g, logits, 0.8, 0.7, 2, 4)
        np.testing.assert_allclose(truncated_rho(sm, [2]).rho[0], ref, atol=1e-13)
        w = sample_walks(sm, np.full(100_000, 2), np.random.default_rng(6))
        freq = np.bincount(w.emitted, minlength=g.m) / len(w)
        assert 0.5 * np.abs(freq - ref).sum() < 0.01


class TestCandidateSet:
    def test_counts(self):
        g = InteractionGraph(2, 5, [(0, 0), (0, 1), (0, 2), (0, 3)])
        sm = model_for(g)
        b = draw_candidate_set(sm, 0, np.random.default_rng(0))
        assert len(b) == 20 and len(b.walks) == 20
        assert np.array_equal(b.walks.emitted, b.items)
        assert len(draw_candidate_set(sm, 1, np.random.default_rng(0))) == 1

    def test_split_views(self, small_graph):
        g = small_graph
        b = draw_candidates(model_for(g), np.arange(g.n), np.random.default_rng(1))
        for k in range(g.n):
            pos = set(g.user_items(k).tolist())
            assert set(b.positive_part(k).tolist()) <= pos
            assert not set(b.rest_part(k).tolist()) & pos
            assert len(b.positive_part(k)) + len(b.rest_part(k)) == b.counts[k]
            assert len(b.paths(k)) == b.counts[k]

    def test_replay(self, small_graph):
        sm = model_for(small_graph)
        a = draw_candidates(sm, [0, 1, 2], np.random.default_rng(9))
        b = draw_candidates(sm, [0, 1, 2], np.random.default_rng(9))
        assert np.array_equal(a.items, b.items)
        assert np.array_equal(a.walks.nodes, b.walks.nodes)


class TestExactRho:
    def test_no_propagation_is_uniform(self, small_graph):
        r = exact_rho(model_for(small_graph, 0.0, 0.0), np.arange(small_graph.n))
        np.testing.assert_allclose(r.rho, 1 / small_graph.m)

    def test_toy_dense_solve(self, toy_graph):
        sm = model_for(toy_graph, 0.5, 0.5)
        ref = dense_rho(toy_graph, sm.logits, 0.5, 0.5)
        r = exact_rho(sm, [0, 1], tol=1e-13)
        assert r.converged
        np.testing.assert_allclose(r.rho, ref, atol=1e-12)

    @pytest.mark.parametrize("c1,c2", [(0.6, 0.6), (1.0, 0.4), (0.3, 1.0), (0.9, 0.9)])
    def test_random_dense_solve(self, c1, c2):
        rng = np.random.default_rng(11)
        g = random_graph(rng, 6, 7, 0.35)
        logits = rng.normal(0, 1.5, len(g.indices))
        r = exact_rho(model_for(g, c1, c2, logits=logits), np.arange(g.n), tol=1e-13,
                      max_sweeps=2000)
        np.testing.assert_allclose(r.rho, dense_rho(g, logits, c1, c2), atol=1e-10)

    def test_non_convergence_flag(self, small_graph):
        r = exact_rho(model_for(small_graph, 0.9, 0.9), [0], tol=1e-12, max_sweeps=3)
        assert not r.converged and r.residual > 1e-12 and r.sweeps == 3
        np.testing.assert_allclose(r.rho.sum(), 1.0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 100_000), st.floats(0.0, 1.0), st.floats(0.0, 0.99))
    def test_normalized_and_floor(self, seed, c1, c2):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, int(rng.integers(1, 8)), int(rng.integers(1, 8)), 0.3,
                         connected_nodes=bool(seed % 2))
        sm = model_for(g, c1, c2, logits=rng.normal(0, 2, len(g.indices)))
        r = exact_rho(sm, np.arange(g.n), tol=1e-12, max_sweeps=5000)
        np.testing.assert_allclose(r.rho.sum(axis=1), 1.0, atol=1e-9)
        assert r.rho.min() >= sm.p0 - 1e-9


class TestPathStrength:
    def test_length_zero(self, toy_graph):
        sm = model_for(toy_graph, 0.5, 0.5)
        p = WalkPath(np.array([0]), np.array([], dtype=int), 1, Terminal.USER)
        assert path_strength(sm, p) == pytest.approx(0.5 / 2)

    def test_one_step(self, toy_graph):
        # user 0 -> item 0 with weight 0.4
        sm = model_for(toy_graph, 0.5, 0.5, logits=[math.log(0.4), math.log(0.6), 0, 0, 0, 0])
        p = WalkPath(np.array([0, 2]), np.array([0]), 0, Terminal.ITEM)
        assert path_strength(sm, p) == pytest.approx(0.5 * 0.4 * 0.5)

    def test_truncated_factor(self, toy_graph):
        sm = model_for(toy_graph, 0.5, 0.5, l_max=1)
        p = WalkPath(np.array([0, 2]), np.array([0]), 0, Terminal.TRUNCATED)
        assert path_strength(sm, p) == pytest.approx(0.5 * 0.5)

    def test_enumeration_sums_to_truncated_rho(self, small_graph):
        g = small_graph
        sm = model_for(g, 0.7, 0.6, l_max=5,
                       logits=np.random.default_rng(3).normal(0, 1, len(g.indices)))
        for u in range(g.n):
            acc = np.zeros(g.m)
            for path, s in enumerate_paths(sm, u):
                assert s == pytest.approx(
                    path_strength(sm, path) * (g.m if path.emitted_item < 0 else 1))
                if path.emitted_item < 0:
                    acc += s / g.m
                else:
                    acc[path.emitted_item] += s
            np.testing.assert_allclose(acc, truncated_rho(sm, [u]).rho[0], atol=1e-13)


def _log_strength(model, path):
    return math.log(path_strength(model, path))


class TestLogPathGrad:
    def test_zero_length(self, toy_graph):
        p = WalkPath(np.array([0]), np.array([], dtype=int), 1, Terminal.USER)
        assert log_path_grad(model_for(toy_graph), p).values.size == 0

    def test_two_neighbors(self, toy_graph):
        p = WalkPath(np.array([0, 2]), np.array([0]), 0, Terminal.ITEM)
        g = log_path_grad(model_for(toy_graph), p).to_dense(6)
        np.testing.assert_allclose(g, [0.5, -0.5, 0, 0, 0, 0])

    def test_finite_differences(self, small_graph):
        g = small_graph
        rng = np.random.default_rng(8)
        sm = model_for(g, 0.9, 0.8, l_max=8, logits=rng.normal(0, 1, len(g.indices)))
        walks = sample_walks(sm, np.zeros(40, dtype=int), rng)
        h = 1e-5
        for k in range(len(walks)):
            path = walks.path(k)
            if path.length < 2:
                continue
            analytic = log_path_grad(sm, path).to_dense(len(g.indices))
            for e in rng.choice(len(g.indices), 4, replace=False):
                lp, lm = sm.logits.copy(), sm.logits.copy()
                lp[e] += h
                lm[e] -= h
                num = (_log_strength(model_for(g, 0.9, 0.8, 8, logits=lp), path)
                       - _log_strength(model_for(g, 0.9, 0.8, 8, logits=lm), path)) / (2 * h)
                assert num == pytest.approx(analytic[e], rel=1e-4, abs=1e-9)


class TestPolicyGradient:
    def _batch(self, graph, model, seed=0):
        return draw_candidates(model, np.arange(graph.n), np.random.default_rng(seed))

    def test_zero_rewards_no_positives_is_zero(self):
        g = InteractionGraph(2, 2, [(0, 0), (1, 1)])
        sm = model_for(g, 0.5, 0.5)
        b = self._batch(g, sm)
        b.positive[:] = False
        np.testing.assert_array_equal(policy_gradient(sm, b, np.zeros(len(b))), 0.0)

    def test_unhit_positive_contributes_nothing(self, small_graph):
        g = small_graph
        sm = model_for(g, c1=0.0)  # walks never reach the graph: no positive hits
        b = self._batch(g, sm)
        rewards = np.random.default_rng(1).normal(size=len(b))
        np.testing.assert_array_equal(policy_gradient(sm, b, rewards), 0.0)
        # denominator of an unhit positive is N_u * p0
        assert b.counts[0] * sm.p0 == pytest.approx(b.counts[0] / g.m)

    def test_matches_per_path_sum(self, small_graph):
        g = small_graph
        rng = np.random.default_rng(4)
        sm = model_for(g, 0.8, 0.8, logits=rng.normal(0, 1, len(g.indices)))
        b = self._batch(g, sm, 5)
        rewards = -rng.random(len(b))
        ref = np.zeros(len(g.indices))
        offsets = b.offsets
        for k, u in enumerate(b.users.tolist()):
            paths = b.paths(k)
            rw = rewards[offsets[k]:offsets[k + 1]]
            graph_hit = [p.emitted_item if p.nodes[-1] >= g.n else -1 for p in paths]
            for i in g.user_items(u).tolist():
                hits = [p for p, j in zip(paths, graph_hit) if j == i]
                denom = b.counts[k] * sm.p0 + len(hits)
                for p in hits:
                    ref += log_path_grad(sm, p).to_dense(len(ref)) / denom
            for p, r in zip(paths, rw):
                ref += r * log_path_grad(sm, p).to_dense(len(ref))
        np.testing.assert_allclose(policy_gradient(sm, b, rewards), ref, atol=1e-12)

    def test_large_sample_approaches_exact(self):
        rng = np.random.default_rng(12)
        g = random_graph(rng, 3, 4, 0.5)
        logits = rng.normal(0, 0.5, len(g.indices))
        cfg = SamplerConfig(0.7, 0.7, 6, 400.0)
        sm = SamplerModel(g, cfg, logits)
        rewards = -rng.random((g.n, g.m)) * 0.5
        for u in range(g.n):
            rewards[u, g.user_items(u)] = 0.0
        counts = cfg.draw_count(g.degrees[:g.n])
        exact = exact_policy_gradient(sm, np.arange(g.n), [g.user_items(u) for u in range(g.n)],
                                      rewards, counts)
        est = np.zeros_like(exact)
        reps = 60
        for r in range(reps):
            b = draw_candidates(sm, np.arange(g.n), np.random.default_rng(100 + r))
            rw = rewards[b.owner, b.items]
            est += policy_gradient(sm, b, rw) / reps
        # ratio estimator is consistent; truncated user stops add a small bias
        cos = est @ exact / np.linalg.norm(est) / np.linalg.norm(exact)
        assert cos > 0.97


class TestApplyGradient:
    def test_zero_gradient(self, small_graph):
        sm = model_for(small_graph, logits=np.random.default_rng(0).normal(size=len(small_graph.indices)))
        new, _ = apply_gradient(sm, np.zeros(len(sm.logits)))
        np.testing.assert_array_equal(new.logits, sm.logits)

    def test_pure_and_normalized(self, small_graph):
        g = small_graph
        sm = model_for(g)
        grad = np.random.default_rng(1).normal(size=len(g.indices))
        a, sa = apply_gradient(sm, grad, lr=0.1)
        b, sb = apply_gradient(sm, grad, lr=0.1)
        np.testing.assert_array_equal(a.logits, b.logits)
        assert sa.t == sb.t == 1
        assert not np.array_equal(a.logits, sm.logits)
        sums = np.bincount(g.edge_src, weights=a.weights, minlength=g.num_nodes)
        np.testing.assert_allclose(sums[g.degrees > 0], 1.0, atol=1e-12)


def test_exact_gradient_matches_bound_differences():
    rng = np.random.default_rng(21)
    g = random_graph(rng, 3, 4, 0.5)
    cfg = SamplerConfig(0.6, 0.6, 5, 5.0)
    logits = rng.normal(0, 0.7, len(g.indices))
    pos = [g.user_items(u) for u in range(g.n)]
    rewards = -rng.random((g.n, g.m))
    for u in range(g.n):
        rewards[u, pos[u]] = 0.0
    counts = cfg.draw_count(g.degrees[:g.n])

    def bound(lg):
        rho = truncated_rho(SamplerModel(g, cfg, lg), np.arange(g.n)).rho
        return sum(np.log(rho[u, pos[u]]).sum() + counts[u] * rho[u] @ rewards[u]
                   for u in range(g.n))

    exact = exact_policy_gradient(SamplerModel(g, cfg, logits), np.arange(g.n), pos,
                                  rewards, counts)
    h = 1e-6
    fd = np.array([(bound(logits + h * e) - bound(logits - h * e)) / (2 * h)
                   for e in np.eye(len(logits))])
    np.testing.assert_allclose(exact, fd, rtol=1e-3, atol=1e-7)
