"""Orientation refinement network.

Takes bootstrapped absolute orientations plus the observed measurements and
regresses refined absolute orientations in one shot.  Hidden states start at
the initial orientation quaternions (zero-padded); the feature of directed
edge ``u -> v`` is the discrepancy ``init_v^-1 * q_uv * init_u`` between the
measurement and the initialization.  The head maps final node states to a
corrective rotation applied on the left of the initialization.

The reference camera (root) must carry the identity in the initialization;
losses also require it to carry the identity in the ground truth, which the
trainer arranges by re-referencing.
"""

from __future__ import annotations

import numpy as np

from . import mpnn, so3, viewgraph
from .autodiff import ParamStore, Tape, Tensor
from .mpnn import MpnnConfig
from .so3 import UnitQuaternion
from .viewgraph import ViewGraph, ViewGraphError

DEFAULT_CONFIG = MpnnConfig(node_init_dim=4)
BETA_DEFAULT = 0.1      # weight of the per-node anchoring term
REFERENCE_TOL = 1e-6    # max angle (deg) tolerated for "identity at the root"


def weight_spec(cfg: MpnnConfig = DEFAULT_CONFIG) -> dict[str, tuple[int, ...]]:
    spec = mpnn.weight_spec(cfg)
    spec["head_refine.w"] = (cfg.hidden_dim, 4)
    spec["head_refine.b"] = (4,)
    return spec


def new_weights(seed: int = 0, cfg: MpnnConfig = DEFAULT_CONFIG) -> ParamStore:
    """Fresh parameters; the zero-weight, identity-bias head makes an
    untrained network return its initialization unchanged."""
    store = ParamStore()
    mpnn.init_weights(cfg, np.random.default_rng(seed), store)
    store.add("head_refine.w", np.zeros((cfg.hidden_dim, 4)))
    store.add("head_refine.b", np.array([1.0, 0.0, 0.0, 0.0]))
    return store


def _init_rows(g: ViewGraph, init: list[UnitQuaternion]) -> np.ndarray:
    if len(init) != g.n_nodes:
        raise ViewGraphError("initialization must cover every node")
    return np.stack([q.as_array() for q in init])


def _edge_discrepancy(g: ViewGraph, init_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Directed edge arrays plus per-edge discrepancy features."""
    uv, quats = viewgraph.directed_arrays(g)
    src = init_rows[uv[:, 0]]
    dst = init_rows[uv[:, 1]]
    feats = so3.qmul(so3.qconj(dst), so3.qmul(quats, src))
    return uv, feats


def forward_tensors(
    tape: Tape,
    g: ViewGraph,
    init_rows: np.ndarray,
    weights: dict[str, Tensor],
    cfg: MpnnConfig = DEFAULT_CONFIG,
    init_tensor: Tensor | None = None,
    feat_tensor: Tensor | None = None,
) -> Tensor:
    """Refined orientations as an (N, 4) tensor (not yet re-referenced).

    ``init_tensor``/``feat_tensor`` may be supplied as differentiable leaves
    for gradient checks; by default they enter as constants.
    """
    uv, feats = _edge_discrepancy(g, init_rows)
    node_init = init_tensor if init_tensor is not None else tape.constant(init_rows)
    edge_feats = feat_tensor if feat_tensor is not None else tape.constant(feats)
    h, _ = mpnn.forward(tape, weights, cfg, uv, edge_feats, node_init, g.n_nodes)
    delta_raw = tape.linear(h, weights["head_refine.w"], weights["head_refine.b"])
    return tape.quat_compose(tape.quat_normalize(delta_raw), node_init)


def refine_forward(
    g: ViewGraph,
    init: list[UnitQuaternion],
    store: ParamStore,
    root: int,
    cfg: MpnnConfig = DEFAULT_CONFIG,
) -> list[UnitQuaternion]:
    """Refine an initialization; the result is re-referenced at ``root``.

    Total on valid inputs: corrective rows whose norm underflows fall back
    to the identity rotation.
    """
    init_rows = _init_rows(g, init)
    if so3.geodesic_deg(init[root], UnitQuaternion.identity()) > REFERENCE_TOL:
        raise ViewGraphError(f"initialization is not referenced at root {root}")
    tape = Tape(recording=False)
    weights = store.bind(tape)
    uv, feats = _edge_discrepancy(g, init_rows)
    h, _ = mpnn.forward(tape, weights, cfg, uv, tape.constant(feats), tape.constant(init_rows), g.n_nodes)
    delta = (h.values @ store.params["head_refine.w"]) + store.params["head_refine.b"]
    norms = np.linalg.norm(delta, axis=1)
    delta[norms < 1e-12] = (1.0, 0.0, 0.0, 0.0)
    pred_rows = so3.qcanon(so3.qmul(so3.qcanon(delta), init_rows))
    pred = [UnitQuaternion.from_array(row) for row in pred_rows]
    return viewgraph.rereference(pred, root)


def _check_reference(g: ViewGraph, root: int) -> None:
    if not 0 <= root < g.n_nodes:
        raise ViewGraphError(f"root {root} out of range")
    gt_root = g.gt[root]
    if gt_root is None:
        raise ViewGraphError("loss requires ground truth at the root")
    if so3.geodesic_deg(gt_root, UnitQuaternion.identity()) > REFERENCE_TOL:
        raise ViewGraphError(
            "ground truth is not referenced at the root; re-reference before the loss"
        )


def loss_from_pred(
    tape: Tape,
    pred: Tensor,
    g: ViewGraph,
    root: int,
    beta: float = BETA_DEFAULT,
) -> Tensor:
    """Consistency loss over edges plus the anchoring term over nodes.

    Edge term: degree-normalized quaternion distance between predicted and
    ground-truth relative orientations.  Node term: ``beta / deg(v)`` times
    the quaternion distance to the ground-truth absolute orientation.
    """
    if not g.has_full_gt:
        raise ViewGraphError("loss requires full ground truth")
    _check_reference(g, root)
    degrees = g.degree_array()

    u_idx, v_idx = g.endpoint_arrays()
    pred_u = tape.gather(pred, u_idx)
    pred_v = tape.gather(pred, v_idx)
    rel = tape.quat_normalize(tape.quat_compose(pred_v, tape.quat_conjugate(pred_u)))
    gt_rel = tape.constant(g.relative_gt_array())
    edge_w = tape.constant(1.0 / (degrees[u_idx] * degrees[v_idx]))
    edge_term = tape.sum(tape.mul(tape.quat_dist_loss(rel, gt_rel), edge_w))

    gt_abs = tape.constant(g.gt_array())
    node_d = tape.quat_dist_loss(tape.quat_normalize(pred), gt_abs)
    node_term = tape.sum(tape.mul(node_d, tape.constant(beta / degrees)))
    return tape.add(edge_term, node_term)


def refine_loss(
    pred: list[UnitQuaternion],
    g: ViewGraph,
    root: int,
    beta: float = BETA_DEFAULT,
) -> float:
    """Loss value for concrete predictions (evaluation path)."""
    tape = Tape(recording=False)
    rows = tape.constant(np.stack([q.as_array() for q in pred]))
    return float(loss_from_pred(tape, rows, g, root, beta).values)
