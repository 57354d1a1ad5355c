from __future__ import annotations

import numpy as np
import pytest

from fd import fd_gradients
from rotavg import refinement, so3, synthgen, viewgraph
from rotavg.autodiff import ParamStore, Tape
from rotavg.mpnn import MpnnConfig
from rotavg.so3 import UnitQuaternion
from rotavg.viewgraph import ViewGraph, ViewGraphError

TINY_CFG = MpnnConfig(rounds=2, hidden_dim=5, msg_dim=4, edge_feat_dim=4, node_init_dim=4)


def tiny_refine_weights(seed=0, cfg=TINY_CFG, random_head=False):
    from rotavg import mpnn

    store = ParamStore()
    rng = np.random.default_rng(seed)
    mpnn.init_weights(cfg, rng, store)
    if random_head:
        store.add("head_refine.w", rng.normal(0.0, 0.3, size=(cfg.hidden_dim, 4)))
    else:
        store.add("head_refine.w", np.zeros((cfg.hidden_dim, 4)))
    store.add("head_refine.b", np.array([1.0, 0.0, 0.0, 0.0]))
    return store


def referenced_graph(seed=0, n=14, sigma=6.0, outliers=0.0):
    """Graph re-referenced so ground truth at the chosen root is identity."""
    cfg = synthgen.SynthConfig(
        n_cameras=(n, n), edge_fraction=(0.35, 0.35),
        sigma_deg=(sigma, sigma), outlier_fraction=(outliers, outliers), seed=seed,
    )
    g = synthgen.generate_graph(cfg, np.random.default_rng(seed))
    root = viewgraph.select_root(g)
    gt_ref = viewgraph.rereference(list(g.gt), root)
    return ViewGraph(g.n_nodes, list(g.edges), gt_ref), root


def spt_init(g, root):
    return viewgraph.bootstrap_orientations(g, viewgraph.shortest_path_tree(g, root)).orientations


class TestForward:
    def test_perfect_init_on_clean_graph_gives_identity_features(self):
        g, root = referenced_graph(sigma=0.0)
        init = list(g.gt)
        rows = np.stack([q.as_array() for q in init])
        _, feats = refinement._edge_discrepancy(g, rows)
        ident = np.zeros_like(feats)
        ident[:, 0] = 1.0
        assert np.max(so3.qangle_deg(feats, ident)) < 1e-9

    def test_identity_init_head_returns_init(self):
        g, root = referenced_graph(seed=1)
        init = spt_init(g, root)
        out = refinement.refine_forward(g, init, tiny_refine_weights(1), root, TINY_CFG)
        for a, b in zip(out, init):
            assert so3.geodesic_deg(a, b) < 1e-9

    def test_outputs_valid_unit_quaternions_under_random_weights(self):
        g, root = referenced_graph(seed=2)
        store = tiny_refine_weights(2, random_head=True)
        out = refinement.refine_forward(g, spt_init(g, root), store, root, TINY_CFG)
        for q in out:
            assert abs(np.linalg.norm(q.as_array()) - 1.0) < 1e-9

    def test_output_rereferenced_at_root(self):
        g, root = referenced_graph(seed=3)
        store = tiny_refine_weights(3, random_head=True)
        out = refinement.refine_forward(g, spt_init(g, root), store, root, TINY_CFG)
        assert so3.geodesic_deg(out[root], UnitQuaternion.identity()) < 1e-9

    def test_unreferenced_init_rejected(self):
        g, root = referenced_graph(seed=4)
        init = spt_init(g, root)
        init[root] = so3.yaw_deg(10.0)
        with pytest.raises(ViewGraphError, match="referenced"):
            refinement.refine_forward(g, init, tiny_refine_weights(4), root, TINY_CFG)

    def test_missing_init_rejected(self):
        g, root = referenced_graph(seed=5)
        with pytest.raises(ViewGraphError, match="cover"):
            refinement.refine_forward(g, [UnitQuaternion.identity()], tiny_refine_weights(5), root, TINY_CFG)


class TestLoss:
    def test_ground_truth_scores_zero(self):
        g, root = referenced_graph(seed=6)
        assert refinement.refine_loss(list(g.gt), g, root) < 1e-9

    def test_beta_zero_is_gauge_invariant(self):
        g, root = referenced_graph(seed=7)
        rng = np.random.default_rng(7)
        pred = [so3.compose(so3.sample_noise(5.0, False, rng), q) for q in g.gt]
        base = refinement.refine_loss(pred, g, root, beta=0.0)
        r = so3.sample_uniform(np.random.default_rng(8))
        shifted = [so3.compose(q, r) for q in pred]
        assert abs(refinement.refine_loss(shifted, g, root, beta=0.0) - base) < 1e-9

    def test_beta_positive_breaks_gauge_invariance(self):
        g, root = referenced_graph(seed=9)
        rng = np.random.default_rng(9)
        pred = [so3.compose(so3.sample_noise(5.0, False, rng), q) for q in g.gt]
        base = refinement.refine_loss(pred, g, root, beta=0.1)
        r = so3.sample_uniform(np.random.default_rng(10))
        shifted = [so3.compose(q, r) for q in pred]
        assert abs(refinement.refine_loss(shifted, g, root, beta=0.1) - base) > 1e-4

    def test_reference_mismatch_errors(self):
        g, root = referenced_graph(seed=11)
        bad_gt = [so3.compose(q, so3.yaw_deg(25.0)) for q in g.gt]
        bad_graph = ViewGraph(g.n_nodes, list(g.edges), bad_gt)
        with pytest.raises(ViewGraphError, match="referenced"):
            refinement.refine_loss(list(bad_graph.gt), bad_graph, root)

    def test_gradient_vs_finite_differences(self):
        g, root = referenced_graph(seed=12, n=8)
        store = tiny_refine_weights(12, random_head=True)
        init_rows = np.stack([q.as_array() for q in spt_init(g, root)])
        params = dict(store.params)

        def build(tape, p):
            pred = refinement.forward_tensors(tape, g, init_rows, p, TINY_CFG)
            return refinement.loss_from_pred(tape, pred, g, root)

        assert fd_gradients(build, params) < 1e-3

    def test_gradient_flows_to_init_and_features(self):
        g, root = referenced_graph(seed=13, n=8)
        store = tiny_refine_weights(13, random_head=True)
        init_rows = np.stack([q.as_array() for q in spt_init(g, root)])
        uv, feats = refinement._edge_discrepancy(g, init_rows)
        tape = Tape()
        weights = store.bind(tape)
        init_t = tape.leaf(init_rows, requires_grad=True)
        feat_t = tape.leaf(feats, requires_grad=True)
        pred = refinement.forward_tensors(
            tape, g, init_rows, weights, TINY_CFG, init_tensor=init_t, feat_tensor=feat_t
        )
        loss = refinement.loss_from_pred(tape, pred, g, root)
        tape.backward(loss)
        assert init_t.grad is not None and np.any(init_t.grad != 0.0)
        assert feat_t.grad is not None and np.any(feat_t.grad != 0.0)
