"""View-graph cleaning network.

Per measured edge the network predicts a small corrective rotation (applied
on the left of the measurement) and a probability that the edge is an
outlier.  Edge features are the raw measurement quaternions; hidden states
start at zero.  Heads read the final-round message of the stored (canonical)
edge direction; the reverse direction still shapes the hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mpnn, so3, viewgraph
from .autodiff import AutodiffError, ParamStore, Tape, Tensor
from .mpnn import MpnnConfig
from .so3 import UnitQuaternion
from .viewgraph import Edge, ViewGraph, ViewGraphError

DEFAULT_CONFIG = MpnnConfig(node_init_dim=0)
OUTLIER_THRESHOLD_DEG = 20.0   # ground-truth labelling rule
EPSILON_DEFAULT = 0.75         # removal threshold on predicted probability
BCE_WEIGHT_DEFAULT = 10.0


@dataclass
class CleanPrediction:
    """Per stored edge: rectified orientation and outlier probability."""

    rect: list[UnitQuaternion]
    outlier_prob: np.ndarray  # (E,)
    logits: np.ndarray        # (E,) raw head outputs, kept for stable BCE


@dataclass
class CleanedGraph:
    """Cleaned view-graph restricted to its largest component."""

    graph: ViewGraph
    node_ids: list[int]        # new index -> old node id
    removed_edges: int
    dropped_nodes: list[int]


def weight_spec(cfg: MpnnConfig = DEFAULT_CONFIG) -> dict[str, tuple[int, ...]]:
    spec = mpnn.weight_spec(cfg)
    spec["head_rect.w"] = (cfg.msg_dim, 4)
    spec["head_rect.b"] = (4,)
    spec["head_out.w"] = (cfg.msg_dim, 1)
    spec["head_out.b"] = (1,)
    return spec


def new_weights(seed: int = 0, cfg: MpnnConfig = DEFAULT_CONFIG) -> ParamStore:
    """Fresh parameters.

    Heads start at zero weights with an identity-quaternion bias, so an
    untrained network applies exactly no correction and scores every edge
    at probability 0.5.
    """
    store = ParamStore()
    mpnn.init_weights(cfg, np.random.default_rng(seed), store)
    store.add("head_rect.w", np.zeros((cfg.msg_dim, 4)))
    store.add("head_rect.b", np.array([1.0, 0.0, 0.0, 0.0]))
    store.add("head_out.w", np.zeros((cfg.msg_dim, 1)))
    store.add("head_out.b", np.zeros(1))
    return store


def _head_tensors(
    tape: Tape, g: ViewGraph, weights: dict[str, Tensor], cfg: MpnnConfig
) -> tuple[Tensor, Tensor]:
    """Raw head outputs: correction quaternions (E, 4) and logits (E,)."""
    uv, quats = viewgraph.directed_arrays(g)
    feats = tape.constant(quats)
    _, msgs = mpnn.forward(tape, weights, cfg, uv, feats, None, g.n_nodes)
    m = len(g.edges)
    fwd = tape.gather(msgs, np.arange(m))
    delta_raw = tape.linear(fwd, weights["head_rect.w"], weights["head_rect.b"])
    logits = tape.reshape(
        tape.linear(fwd, weights["head_out.w"], weights["head_out.b"]), (m,)
    )
    return delta_raw, logits


def clean_forward(
    g: ViewGraph, store: ParamStore, cfg: MpnnConfig = DEFAULT_CONFIG
) -> CleanPrediction:
    """Predict rectified orientations and outlier probabilities.

    Total on any graph with at least one edge: correction rows whose norm
    underflows are replaced by the identity rotation.
    """
    if not g.edges:
        raise ViewGraphError("cannot clean a graph without edges")
    tape = Tape(recording=False)
    weights = store.bind(tape)
    delta_raw, logits = _head_tensors(tape, g, weights, cfg)
    delta = delta_raw.values.copy()
    norms = np.linalg.norm(delta, axis=1)
    degenerate = norms < 1e-12
    delta[degenerate] = (1.0, 0.0, 0.0, 0.0)
    delta = so3.qcanon(delta)
    rect_rows = so3.qcanon(so3.qmul(delta, g.edge_quat_array()))
    rect = [UnitQuaternion.from_array(row) for row in rect_rows]
    probs = 1.0 / (1.0 + np.exp(-logits.values))
    return CleanPrediction(rect=rect, outlier_prob=probs, logits=logits.values.copy())


def gt_outlier_labels(g: ViewGraph) -> np.ndarray:
    """1.0 where the measurement sits more than 20 degrees from the
    ground-truth relative orientation, else 0.0."""
    if not g.has_full_gt:
        raise ViewGraphError("outlier labels require full ground truth")
    angles = so3.qangle_deg(g.edge_quat_array(), g.relative_gt_array())
    return (angles > OUTLIER_THRESHOLD_DEG).astype(np.float64)


def _degree_weights(g: ViewGraph) -> np.ndarray:
    """Per-edge 1 / (deg(u) * deg(v)) for the orientation-error term."""
    degrees = g.degree_array()
    u, v = g.endpoint_arrays()
    return 1.0 / (degrees[u] * degrees[v])


def clean_loss_graph(
    tape: Tape,
    g: ViewGraph,
    weights: dict[str, Tensor],
    cfg: MpnnConfig = DEFAULT_CONFIG,
    bce_weight: float = BCE_WEIGHT_DEFAULT,
) -> Tensor:
    """Differentiable loss: degree-normalized rectification error plus
    ``bce_weight`` times the mean outlier cross-entropy."""
    if not g.has_full_gt:
        raise ViewGraphError("training loss requires full ground truth")
    delta_raw, logits = _head_tensors(tape, g, weights, cfg)
    rect_raw = tape.quat_compose(delta_raw, tape.constant(g.edge_quat_array()))
    gt_rel = tape.constant(g.relative_gt_array())
    dists = tape.quat_dist_loss(tape.quat_normalize(rect_raw), gt_rel)
    mre = tape.sum(tape.mul(dists, tape.constant(_degree_weights(g))))
    bce = tape.mean(tape.bce_with_logits(logits, tape.constant(gt_outlier_labels(g))))
    return tape.add(mre, tape.scale(bce, bce_weight))


def clean_loss(
    pred: CleanPrediction,
    g: ViewGraph,
    bce_weight: float = BCE_WEIGHT_DEFAULT,
) -> float:
    """Loss value for an existing prediction (evaluation path)."""
    if not g.has_full_gt:
        raise ViewGraphError("loss requires full ground truth")
    w = _degree_weights(g)
    rect_rows = np.stack([q.as_array() for q in pred.rect])
    gt_rel = g.relative_gt_array()
    d_minus = np.linalg.norm(rect_rows - gt_rel, axis=1)
    d_plus = np.linalg.norm(rect_rows + gt_rel, axis=1)
    mre = float(w @ np.minimum(d_minus, d_plus))
    z = pred.logits
    t = gt_outlier_labels(g)
    bce = float(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))
    return float(mre + bce_weight * bce)


def clean_graph(
    g: ViewGraph, pred: CleanPrediction, epsilon: float = EPSILON_DEFAULT
) -> CleanedGraph:
    """Drop edges scored above ``epsilon`` and install rectified orientations.

    If the removal disconnects the graph the result is restricted to the
    largest component.  Removing every edge is an error.
    """
    if len(pred.rect) != len(g.edges):
        raise ViewGraphError("prediction does not cover every edge")
    kept = [
        Edge(e.u, e.v, pred.rect[i])
        for i, e in enumerate(g.edges)
        if pred.outlier_prob[i] <= epsilon
    ]
    if not kept:
        raise ViewGraphError("empty cleaned graph: every edge was removed")
    removed = len(g.edges) - len(kept)
    full = ViewGraph(g.n_nodes, kept, list(g.gt))
    sub, remap = viewgraph.largest_component(full)
    node_ids = sorted(remap, key=remap.get)
    dropped = sorted(set(range(g.n_nodes)) - set(node_ids))
    return CleanedGraph(graph=sub, node_ids=node_ids, removed_edges=removed, dropped_nodes=dropped)
