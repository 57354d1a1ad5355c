"""Training loops for the cleaning and refinement networks.

Both networks train per graph (batch size one) with Adam and decoupled
weight decay.  Each epoch re-samples an edge-dropout mask per training
graph; validation always runs on the full graphs, and the parameters with
the best validation loss are returned.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cleaning, refinement, viewgraph
from .autodiff import ParamStore, Tape
from .mpnn import MpnnConfig
from .so3 import UnitQuaternion
from .viewgraph import ViewGraph, ViewGraphError

DESK_LR = 2e-3          # larger steps suit the short desk-scale schedule
DESK_EPOCHS = 100


class TrainingError(RuntimeError):
    """Non-finite loss or unusable training data."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    lr: float = 0.5e-4
    weight_decay: float = 1e-4
    edge_dropout: float = 0.25
    seed: int = 0
    desk_scale: bool = False
    validation_metric: str = "loss"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.edge_dropout < 1.0:
            raise ValueError("edge_dropout must lie in [0, 1)")
        if self.validation_metric != "loss":
            raise ValueError("only the 'loss' validation metric is supported")

    @classmethod
    def desk(cls, seed: int = 0, **overrides) -> "TrainConfig":
        kwargs = dict(epochs=DESK_EPOCHS, lr=DESK_LR, seed=seed, desk_scale=True)
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class TrainLog:
    """Per-epoch training curve: (epoch, train_loss, val_loss, wall_ms)."""

    rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf

    def write_csv(self, path: str | Path) -> None:
        lines = ["epoch,train_loss,val_loss,wall_ms"]
        for epoch, train_loss, val_loss, wall_ms in self.rows:
            lines.append(f"{epoch},{train_loss:.9g},{val_loss:.9g},{wall_ms:.3f}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _check_corpus(train_graphs: list[ViewGraph], val_graphs: list[ViewGraph]) -> None:
    if not train_graphs or not val_graphs:
        raise TrainingError("training and validation sets must be nonempty")
    for i, g in enumerate(train_graphs + val_graphs):
        if not g.has_full_gt:
            raise TrainingError(f"graph {i} lacks ground-truth orientations")


def _dropout_subgraph(g: ViewGraph, dropout: float, rng: np.random.Generator) -> ViewGraph:
    """Drop a fraction of undirected edges (both directions together)."""
    if dropout == 0.0:
        return g
    m = len(g.edges)
    keep = max(1, int(round((1.0 - dropout) * m)))
    idx = np.sort(rng.choice(m, size=keep, replace=False))
    return ViewGraph(g.n_nodes, [g.edges[i] for i in idx], list(g.gt))


def _finite_or_raise(value: float, epoch: int, graph_index: int) -> float:
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss at epoch {epoch}, graph {graph_index}: {value!r}"
        )
    return value


# ---------------------------------------------------------------------------
# Cleaning network
# ---------------------------------------------------------------------------

def _clean_val_loss(graphs: list[ViewGraph], store: ParamStore, cfg: MpnnConfig) -> float:
    total = 0.0
    for g in graphs:
        tape = Tape(recording=False)
        total += float(cleaning.clean_loss_graph(tape, g, store.bind(tape), cfg).values)
    return total / len(graphs)


def train_cleannet(
    train_graphs: list[ViewGraph],
    val_graphs: list[ViewGraph],
    cfg: TrainConfig,
    net_cfg: MpnnConfig = cleaning.DEFAULT_CONFIG,
) -> tuple[ParamStore, TrainLog]:
    """Train the edge-cleaning network; returns the best-validation weights."""
    _check_corpus(train_graphs, val_graphs)
    store = cleaning.new_weights(cfg.seed, net_cfg)
    best = store.copy()
    log = TrainLog()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_graphs))
        epoch_loss = 0.0
        for gi in order:
            sub = _dropout_subgraph(train_graphs[gi], cfg.edge_dropout, rng)
            tape = Tape()
            loss = cleaning.clean_loss_graph(tape, sub, store.bind(tape), net_cfg)
            epoch_loss += _finite_or_raise(float(loss.values), epoch, int(gi))
            tape.backward(loss)
            store.adam_step(cfg.lr, cfg.weight_decay)
        val_loss = _clean_val_loss(val_graphs, store, net_cfg)
        wall_ms = (time.perf_counter() - t0) * 1e3
        log.rows.append((epoch, epoch_loss / len(train_graphs), val_loss, wall_ms))
        if val_loss < log.best_val_loss:
            log.best_val_loss = val_loss
            log.best_epoch = epoch
            best = store.copy()
    return best, log


# ---------------------------------------------------------------------------
# Refinement network
# ---------------------------------------------------------------------------

def prepare_refinement_sample(
    g: ViewGraph,
    clean_store: ParamStore | None,
    epsilon: float = cleaning.EPSILON_DEFAULT,
    clean_cfg: MpnnConfig = cleaning.DEFAULT_CONFIG,
) -> tuple[ViewGraph, list[UnitQuaternion], int]:
    """Build one refinement training/eval sample from a (sub)graph.

    With a cleaning network: clean, bootstrap on the cleaned graph, then pair
    the init with the graph of *observed* measurements over the surviving
    nodes.  Without one: bootstrap directly on the noisy graph's largest
    component.  Ground truth is re-referenced at the tree root.
    """
    if clean_store is not None:
        pred = cleaning.clean_forward(g, clean_store, clean_cfg)
        cleaned = cleaning.clean_graph(g, pred, epsilon)
        base = cleaned.graph
        node_ids = cleaned.node_ids
    else:
        base, remap = viewgraph.largest_component(g)
        node_ids = sorted(remap, key=remap.get)  # new index -> old id
    root = viewgraph.select_root(base)
    boot = viewgraph.bootstrap_orientations(base, viewgraph.shortest_path_tree(base, root))

    observed, _ = viewgraph.induced_subgraph(g, node_ids)
    # induced_subgraph sorts node ids, so indices line up with `base`
    if observed.has_full_gt:
        gt_ref = viewgraph.rereference(list(observed.gt), root)  # type: ignore[arg-type]
        observed = ViewGraph(observed.n_nodes, list(observed.edges), gt_ref)
    return observed, boot.orientations, root


def _refine_val_loss(
    graphs: list[ViewGraph],
    store: ParamStore,
    clean_store: ParamStore | None,
    net_cfg: MpnnConfig,
) -> float:
    total = 0.0
    for g in graphs:
        sample, init, root = prepare_refinement_sample(g, clean_store)
        tape = Tape(recording=False)
        weights = store.bind(tape)
        init_rows = np.stack([q.as_array() for q in init])
        pred = refinement.forward_tensors(tape, sample, init_rows, weights, net_cfg)
        total += float(refinement.loss_from_pred(tape, pred, sample, root).values)
    return total / len(graphs)


def train_finenet(
    train_graphs: list[ViewGraph],
    val_graphs: list[ViewGraph],
    cfg: TrainConfig,
    clean_store: ParamStore | None = None,
    net_cfg: MpnnConfig = refinement.DEFAULT_CONFIG,
) -> tuple[ParamStore, TrainLog]:
    """Train the refinement network.

    ``clean_store`` selects the initialization source: a trained cleaning
    network (pipeline-faithful) or, when ``None``, spanning-tree bootstraps
    on the raw noisy graphs.  Inits are recomputed per epoch on the
    dropout-filtered edges.
    """
    _check_corpus(train_graphs, val_graphs)
    store = refinement.new_weights(cfg.seed, net_cfg)
    best = store.copy()
    log = TrainLog()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_graphs))
        epoch_loss = 0.0
        for gi in order:
            sub = _dropout_subgraph(train_graphs[gi], cfg.edge_dropout, rng)
            try:
                sample, init, root = prepare_refinement_sample(sub, clean_store)
            except ViewGraphError as exc:
                raise TrainingError(
                    f"cannot build init at epoch {epoch}, graph {gi}: {exc}"
                ) from exc
            tape = Tape()
            weights = store.bind(tape)
            init_rows = np.stack([q.as_array() for q in init])
            pred = refinement.forward_tensors(tape, sample, init_rows, weights, net_cfg)
            loss = refinement.loss_from_pred(tape, pred, sample, root)
            epoch_loss += _finite_or_raise(float(loss.values), epoch, int(gi))
            tape.backward(loss)
            store.adam_step(cfg.lr, cfg.weight_decay)
        val_loss = _refine_val_loss(val_graphs, store, clean_store, net_cfg)
        wall_ms = (time.perf_counter() - t0) * 1e3
        log.rows.append((epoch, epoch_loss / len(train_graphs), val_loss, wall_ms))
        if val_loss < log.best_val_loss:
            log.best_val_loss = val_loss
            log.best_epoch = epoch
            best = store.copy()
    return best, log
