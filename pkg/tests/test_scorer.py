import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone
from sklearn.metrics import roc_auc_score

from conftest import (central_difference, hand_world, random_graph, relative_error, separable_snapshots,
                      walk_bank)
from dualnav import gat
from dualnav.memory import MemoryBank
from dualnav.runner import HeuristicPolicy
from dualnav.scorer import (EDGE_DIM, NODE_DIM, TrajectoryGraph, TrajectoryScorer, build_features,
                            collect_snapshots, load_snapshots, pseudo_label, save_snapshots)
from dualnav.world import generate_episodes, generate_world
from test_world import brute_force_shortest


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def loop_forward(params, graph):
    """Per-node loop version of the two-layer GAT, written from the layer equations."""
    n = len(graph.x)
    edges = [(int(s), int(d), graph.edge_attr[k]) for k, (s, d) in enumerate(zip(graph.src, graph.dst))]
    edges += [(i, i, np.zeros(graph.edge_attr.shape[1])) for i in range(n)]
    h = graph.x
    for layer in (1, 2):
        W, We, a = (params[f"gat{layer}.{k}"] for k in ("W", "We", "a"))
        H = W.shape[1]
        z = h @ W
        out = np.zeros((n, H))
        for i in range(n):
            incoming = [(j, f) for j, d, f in edges if d == i]
            logits = []
            for j, f in incoming:
                s = a[:H] @ z[i] + a[H:2 * H] @ z[j] + a[2 * H:] @ (f @ We)
                logits.append(s if s > 0 else 0.2 * s)
            w = np.exp(np.array(logits) - max(logits))
            w /= w.sum()
            m = sum(wk * (z[j] + f @ We) for wk, (j, f) in zip(w, incoming))
            out[i] = np.where(m > 0, m, np.expm1(np.minimum(m, 0)))
        h = out
    return sigmoid(float(h.mean(axis=0) @ params["readout.w"] + params["readout.b"]))


@pytest.fixture(scope="module")
def separable(separable_world):
    X, y = separable_snapshots(separable_world, 600, 5)
    Xt, yt = separable_snapshots(separable_world, 400, 105)
    return X, y, Xt, yt


@pytest.fixture(scope="module")
def fitted(separable):
    X, y, _, _ = separable
    return TrajectoryScorer().fit(X, y)


class TestFeatures:
    def test_frontier_embedding_is_mean_of_partial_views(self):
        w = hand_world({"u1": (0, 0), "u2": (3, 0), "f": (1.5, 2.0)}, [("u1", "u2"), ("u1", "f"), ("u2", "f")])
        g = build_features(walk_bank(w, ["u1", "u2"]), w)
        e1 = np.array(w.slot_toward("u1", "f").feature)
        e2 = np.array(w.slot_toward("u2", "f").feature)
        k = g.node_ids.index("f")
        np.testing.assert_allclose(g.x[k, 4:], (e1 + e2) / 2)
        assert g.x[k, 3] == -1.0

    def test_single_step_graph(self, cross_world):
        g = build_features(walk_bank(cross_world, ["id_0"]), cross_world)
        assert g.node_ids[0] == "id_0" and len(g.node_ids) == 5
        assert np.all(g.edge_attr[:, 4] == 1.0)  # frontier links only
        assert len(g.src) == 8

    def test_traversal_edges_in_order(self, line_world):
        g = build_features(walk_bank(line_world, ["id_0", "id_1", "id_2"]), line_world, step_cap=40)
        pairs = [(g.node_ids[s], g.node_ids[d]) for s, d in zip(g.src, g.dst)]
        assert pairs == [("id_0", "id_1"), ("id_1", "id_2")]
        np.testing.assert_allclose(g.edge_attr[:, 3], [1 / 40, 2 / 40])
        np.testing.assert_allclose(g.edge_attr[0, :3], [4.0, 0.0, 0.0])

    def test_positions_relative_to_start(self, line_world):
        g = build_features(walk_bank(line_world, ["id_1", "id_2"]), line_world)
        np.testing.assert_allclose(g.x[g.node_ids.index("id_0"), :3], [-4.0, 0.0, 0.0])

    def test_last_visit_scaled_by_step_cap(self, line_world):
        g = build_features(walk_bank(line_world, ["id_0", "id_1", "id_0"]), line_world, step_cap=20)
        assert g.x[g.node_ids.index("id_0"), 3] == pytest.approx(2 / 20)
        assert g.x[g.node_ids.index("id_1"), 3] == pytest.approx(1 / 20)

    def test_empty_bank(self, line_world):
        with pytest.raises(ValueError):
            build_features(MemoryBank(), line_world)

    def test_dict_round_trip(self, line_world):
        g = build_features(walk_bank(line_world, ["id_0", "id_1"]), line_world)
        h = TrajectoryGraph.from_dict(g.to_dict())
        np.testing.assert_array_equal(g.x, h.x)
        np.testing.assert_array_equal(g.edge_attr, h.edge_attr)


class TestNetwork:
    def test_zero_params_give_one_half(self, line_world):
        g = build_features(walk_bank(line_world, ["id_0", "id_1"]), line_world)
        assert gat.forward(gat.zero_params(NODE_DIM, EDGE_DIM), g) == 0.5

    def test_hand_two_node_instance(self):
        # x = [1], [2]; one edge 0 -> 1 with feature 1; hidden width 1.
        # layer 1 attends by source value, so node 1 weighs (edge from 0, self loop) by softmax(1, 2)
        g = TrajectoryGraph(["a", "b"], np.array([[1.0], [2.0]]), np.array([0]), np.array([1]), np.array([[1.0]]))
        params = {
            "gat1.W": np.array([[1.0]]), "gat1.We": np.array([[0.5]]), "gat1.a": np.array([0.0, 1.0, 0.0]),
            "gat2.W": np.array([[1.0]]), "gat2.We": np.array([[0.0]]), "gat2.a": np.zeros(3),
            "readout.w": np.array([1.0]), "readout.b": np.asarray(0.0),
        }
        h0 = 1.0
        h1 = sigmoid(-1.0) * (1.0 + 0.5) + sigmoid(1.0) * 2.0
        h1_second = (h0 + h1) / 2  # uniform attention in layer 2
        expected = sigmoid((h0 + h1_second) / 2)
        assert gat.forward(params, g) == pytest.approx(expected, abs=1e-12)

    def test_matches_loop_implementation(self):
        rng = np.random.default_rng(3)
        params = gat.init_params(NODE_DIM, EDGE_DIM, 8, rng)
        for _ in range(10):
            g = random_graph(rng)
            assert gat.forward(params, g) == pytest.approx(loop_forward(params, g), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        params = gat.init_params(NODE_DIM, EDGE_DIM, 8, rng)
        g = random_graph(rng)
        order = rng.permutation(len(g.x))
        assert gat.forward(params, g.permute(order)) == pytest.approx(gat.forward(params, g), abs=1e-12)

    def test_batch_equals_single(self):
        rng = np.random.default_rng(4)
        params = gat.init_params(NODE_DIM, EDGE_DIM, 8, rng)
        graphs = [random_graph(rng) for _ in range(6)]
        batch = gat.sigmoid(gat.forward_logits(params, gat.make_batch(graphs)))
        np.testing.assert_allclose(batch, [gat.forward(params, g) for g in graphs], atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        graphs = [random_graph(rng) for _ in range(20)]
        labels = rng.integers(0, 2, size=20).astype(float)
        params = gat.init_params(NODE_DIM, EDGE_DIM, 6, rng)
        params["readout.b"] = np.asarray(0.1)
        batch = gat.make_batch(graphs)
        _, grads = gat.bce_loss_and_grad(params, batch, labels)
        num = central_difference(lambda p: gat.bce_loss_and_grad(p, batch, labels)[0], params)
        for k in params:
            assert relative_error(grads[k], num[k]) <= 1e-4, k

    def test_shape_check(self):
        params = gat.init_params(NODE_DIM, EDGE_DIM, 8)
        params["gat2.W"] = np.zeros((4, 8))
        with pytest.raises(ValueError, match="layer 2"):
            gat.check_shapes(params, NODE_DIM, EDGE_DIM)


class TestEstimator:
    def test_separable_set(self, separable, fitted):
        _, _, Xt, yt = separable
        assert roc_auc_score(yt, fitted.predict_proba(Xt)[:, 1]) >= 0.99
        assert fitted.n_epochs_ <= 200

    def test_shuffled_labels_are_chance(self, separable_world):
        X, y = separable_snapshots(separable_world, 1100, 7)
        y = np.random.default_rng(0).permutation(y)  # labels carry no information
        scorer = TrajectoryScorer().fit(X[:300], y[:300])
        auc = roc_auc_score(y[300:], scorer.predict_proba(X[300:])[:, 1])
        assert 0.4 <= auc <= 0.6

    def test_checkpoint_round_trip(self, tmp_path, separable, fitted):
        _, _, Xt, _ = separable
        fitted.save(tmp_path / "scorer.ckpt.json")
        loaded = TrajectoryScorer.load(tmp_path / "scorer.ckpt.json")
        np.testing.assert_array_equal(loaded.predict_proba(Xt[:20]), fitted.predict_proba(Xt[:20]))
        assert loaded.get_params() == fitted.get_params()

    def test_last_visit_changes_the_score(self, separable, fitted):
        _, _, Xt, _ = separable
        g = Xt[0]
        k = next(i for i in range(len(g.x)) if g.x[i, 3] >= 0)
        moved = TrajectoryGraph(g.node_ids, g.x.copy(), g.src, g.dst, g.edge_attr)
        moved.x[k, 3] += 0.25
        assert fitted.score_graph(moved) != fitted.score_graph(g)

    def test_threshold_is_strict(self, line_world):
        g = build_features(walk_bank(line_world, ["id_0"]), line_world)
        scorer = TrajectoryScorer(threshold=0.5)
        scorer.params_ = gat.zero_params(NODE_DIM, EDGE_DIM)
        scorer.node_scale_ = (np.zeros(NODE_DIM), np.ones(NODE_DIM))
        scorer.edge_scale_ = (np.zeros(EDGE_DIM), np.ones(EDGE_DIM))
        scorer.classes_ = np.array([0, 1])
        assert scorer.score_graph(g) == 0.5
        assert scorer.predict([g])[0] == 0

    def test_sklearn_contract(self, separable):
        X, y, _, _ = separable
        est = clone(TrajectoryScorer(hidden=8, max_epochs=5))
        assert est.fit(X, y) is est
        proba = est.predict_proba(X[:7])
        assert proba.shape == (7, 2)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        with pytest.raises(ValueError):
            TrajectoryScorer(threshold=1.2).fit(X, y)
        with pytest.raises(ValueError):
            TrajectoryScorer().fit(X, y[:-1])

    def test_grouped_split_keeps_groups_apart(self, separable):
        X, y, _, _ = separable
        groups = np.arange(len(y)) // 3
        scorer = TrajectoryScorer(hidden=8, max_epochs=3, validation_fraction=0.25)
        train, val = scorer._split(y, groups)
        assert not set(groups[train]) & set(groups[val])


class TestPseudoLabels:
    def test_success_is_nominal(self):
        assert pseudo_label(["a", "x", "y", "b"], ["a", "b"], True) == 0

    def test_failed_prefix_on_route_is_nominal(self):
        gt = ["a", "b", "c", "d"]
        assert [pseudo_label(gt[:k], gt, False) for k in range(1, 4)] == [0, 0, 0]

    def test_leaving_the_route_flips_the_label(self):
        gt = ["a", "b", "c", "d"]
        traj = ["a", "b", "c", "x", "y"]
        assert [pseudo_label(traj[:k + 1], gt, False) for k in range(5)] == [0, 0, 0, 1, 1]

    def test_collection_agrees_with_recomputation(self, tmp_path):
        worlds = [generate_world(s, 40) for s in (31, 32)]
        episodes = [generate_episodes(w, 25, 3, min_hops=3, max_hops=6) for w in worlds]
        policy = HeuristicPolicy(noise=0.2, trap_prob=0.3, premature_stop_prob=0.1, seed=4)
        snaps = collect_snapshots(worlds, episodes, policy, 40)
        assert len({s.episode_id for s in snaps}) == 50
        by_id = {e.id: (w, e) for w, eps in zip(worlds, episodes) for e in eps}
        labels = set()
        for s in snaps:
            w, ep = by_id[s.episode_id]
            final = [x for x in snaps if x.episode_id == s.episode_id][-1].trajectory[-1]
            success = brute_force_shortest(w, final, ep.goal)[0] < 3.0
            on_route = all(v in ep.gt_path for v in s.trajectory)
            assert s.label == (0 if success or on_route else 1)
            labels.add(s.label)
        assert labels == {0, 1}
        save_snapshots(snaps[:5], tmp_path / "s.jsonl")
        back = load_snapshots(tmp_path / "s.jsonl")
        assert [b.label for b in back] == [s.label for s in snaps[:5]]

    def test_leakage_guard(self):
        w = generate_world(31, 20)
        with pytest.raises(ValueError, match="overlap"):
            collect_snapshots([w], [generate_episodes(w, 1, 0)], HeuristicPolicy(), 10, eval_worlds=[w])
