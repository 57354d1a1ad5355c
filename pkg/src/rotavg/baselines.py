"""Classical robust rotation-averaging solvers.

Two baselines operating on the same view-graph inputs as the networks:

* ``weiszfeld_mra`` -- Gauss-Seidel sweeps where each camera is replaced by
  the tangent-space L1 median of the candidates proposed by its neighbors.
* ``irls_mra`` -- iteratively reweighted least squares in the rotation
  tangent space, an L1 phase followed by an L1/2 phase, each inner step a
  conjugate-gradient solve on the weighted graph Laplacian.

Both keep the root camera exactly fixed to pin the gauge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import so3, viewgraph
from .so3 import UnitQuaternion
from .viewgraph import ViewGraph, ViewGraphError

WEISZFELD_FLOOR = 1e-6   # radians; caps the 1/distance weights
IRLS_DELTA = 1e-5        # residual floor in the IRLS weights
IRLS_STEP_TOL = 1e-3     # radians; stop when the largest update is below
CG_TOL = 1e-12           # relative residual target of the inner CG solve


class SolverError(RuntimeError):
    """Numerical failure inside a solver (CG non-convergence etc.)."""


# ---------------------------------------------------------------------------
# Weiszfeld
# ---------------------------------------------------------------------------

def _weiszfeld_median_rows(cands: np.ndarray, iters: int) -> np.ndarray:
    """Tangent-space Weiszfeld iteration over unit quaternion rows.

    Inlined quaternion math: this sits in the innermost loop of the solver
    sweeps, where the generic kernels' canonicalization overhead dominates.
    """
    aw, ax, ay, az = cands[:, 0], cands[:, 1], cands[:, 2], cands[:, 3]
    # start at the candidate with the smallest summed geodesic distance
    dots = np.abs(cands @ cands.T)
    np.clip(dots, -1.0, 1.0, out=dots)
    m = cands[int(np.argmin(np.arccos(dots).sum(axis=1)))].copy()
    for _ in range(iters):
        w, x, y, z = m
        # rel = cands * conj(m)
        cw = aw * w + ax * x + ay * y + az * z
        cx = -aw * x + ax * w - ay * z + az * y
        cy = -aw * y + ax * z + ay * w - az * x
        cz = -aw * z - ax * y + ay * x + az * w
        nv = np.sqrt(cx * cx + cy * cy + cz * cz)
        ang = 2.0 * np.arctan2(nv, np.abs(cw))
        # log-map direction, sign-corrected so the angle stays in [0, pi]
        scale = np.where(nv > 1e-12, np.copysign(ang, cw) / np.maximum(nv, 1e-300), 0.0)
        weights = 1.0 / np.maximum(ang, WEISZFELD_FLOOR)
        coef = weights * scale / weights.sum()
        sx = float(coef @ cx)
        sy = float(coef @ cy)
        sz = float(coef @ cz)
        step = math.sqrt(sx * sx + sy * sy + sz * sz)
        if step < 1e-12:
            break
        half = 0.5 * step
        s = math.sin(half) / step
        ew, ex, ey, ez = math.cos(half), sx * s, sy * s, sz * s
        # m = exp(step) * m
        m = np.array(
            [
                ew * w - ex * x - ey * y - ez * z,
                ew * x + ex * w + ey * z - ez * y,
                ew * y - ex * z + ey * w + ez * x,
                ew * z + ex * y - ey * x + ez * w,
            ]
        )
        m /= math.sqrt(float(m @ m))
    return m


def weiszfeld_median(candidates: list[UnitQuaternion], iters: int = 10) -> UnitQuaternion:
    """Geodesic L1 median via the tangent-space Weiszfeld iteration."""
    if not candidates:
        raise ViewGraphError("median of an empty candidate set")
    if len(candidates) == 1:
        return candidates[0]
    rows = np.stack([q.as_array() for q in candidates])
    return UnitQuaternion.from_array(_weiszfeld_median_rows(rows, iters))


@dataclass
class WeiszfeldResult:
    orientations: list[UnitQuaternion]
    objective_trace: list[float] = field(default_factory=list)


def _consistency_objective(g: ViewGraph, rows: np.ndarray) -> float:
    u = np.array([e.u for e in g.edges])
    v = np.array([e.v for e in g.edges])
    rel = so3.qmul(rows[v], so3.qconj(rows[u]))
    return float(np.sum(so3.qangle_deg(rel, g.edge_quat_array())))


def weiszfeld_mra(
    g: ViewGraph,
    init: list[UnitQuaternion],
    sweeps: int = 50,
    median_iters: int = 10,
) -> WeiszfeldResult:
    """L1 averaging sweeps; one sweep updates every non-root node once, in
    ascending id order, in place (Gauss-Seidel)."""
    if not viewgraph.is_connected(g):
        raise ViewGraphError("solver requires a connected graph")
    if len(init) != g.n_nodes:
        raise ViewGraphError("initialization must cover every node")
    root = viewgraph.select_root(g)
    rows = np.stack([q.as_array() for q in init])
    adj = g.adjacency()
    edge_rows = g.edge_quat_array()
    edges = g.edges
    trace = [_consistency_objective(g, rows)]
    for _ in range(sweeps):
        for v in range(g.n_nodes):
            if v == root:
                continue
            cands = np.empty((len(adj[v]), 4))
            for k, (u, ei) in enumerate(adj[v]):
                e = edges[ei]
                q = edge_rows[ei] if (e.u, e.v) == (u, v) else so3.qconj(edge_rows[ei])
                cands[k] = so3.qmul(q, rows[u])
            rows[v] = _weiszfeld_median_rows(cands, median_iters)
        trace.append(_consistency_objective(g, rows))
    out = [UnitQuaternion.from_array(r) for r in so3.qcanon(rows)]
    return WeiszfeldResult(orientations=out, objective_trace=trace)


# ---------------------------------------------------------------------------
# IRLS
# ---------------------------------------------------------------------------

@dataclass
class IrlsResult:
    orientations: list[UnitQuaternion]
    iterations: int
    max_step_trace: list[float] = field(default_factory=list)
    cg_residual: float = 0.0


def _cg_multi(apply_op, rhs: np.ndarray, max_iter: int, tol: float) -> tuple[np.ndarray, float]:
    """Conjugate gradient for an SPD operator with 3 right-hand sides."""
    x = np.zeros_like(rhs)
    r = rhs - apply_op(x)
    p = r.copy()
    rs = np.sum(r * r, axis=0)
    norm_b = np.maximum(np.sqrt(np.sum(rhs * rhs, axis=0)), 1e-300)
    for it in range(max_iter):
        if np.all(np.sqrt(rs) / norm_b <= tol):
            break
        ap = apply_op(p)
        denom = np.sum(p * ap, axis=0)
        alpha = np.where(denom > 0.0, rs / np.maximum(denom, 1e-300), 0.0)
        x += alpha * p
        r -= alpha * ap
        rs_new = np.sum(r * r, axis=0)
        p = r + (rs_new / np.maximum(rs, 1e-300)) * p
        rs = rs_new
    else:
        raise SolverError(
            f"conjugate gradient did not converge within {max_iter} iterations"
        )
    rel_res = float(np.max(np.sqrt(np.sum((rhs - apply_op(x)) ** 2, axis=0)) / norm_b))
    return x, rel_res


def irls_mra(
    g: ViewGraph,
    init: list[UnitQuaternion],
    max_iters: tuple[int, int] = (5, 20),
    delta: float = IRLS_DELTA,
    step_tol: float = IRLS_STEP_TOL,
) -> IrlsResult:
    """Two-phase IRLS: L1 reweighting, then the more robust L1/2 weights.

    Each iteration computes per-edge discrepancies in the body frame,
    ``log(q_v^-1 * measurement * q_u)``, linearizes them as differences of
    per-node tangent updates (``step_v - step_u ~ r_uv``, exact to first
    order for right-multiplicative updates ``q_v <- q_v * exp(step_v)``),
    and solves the weighted normal equations (a graph Laplacian with 3-dof
    blocks) by conjugate gradient, with the root held fixed.
    """
    if not viewgraph.is_connected(g):
        raise ViewGraphError("solver requires a connected graph")
    if len(init) != g.n_nodes:
        raise ViewGraphError("initialization must cover every node")
    n = g.n_nodes
    root = viewgraph.select_root(g)
    rows = np.stack([q.as_array() for q in init])
    u_idx = np.array([e.u for e in g.edges], dtype=np.int64)
    v_idx = np.array([e.v for e in g.edges], dtype=np.int64)
    meas = g.edge_quat_array()

    # reduced index map without the anchored root
    keep = np.array([v for v in range(n) if v != root], dtype=np.int64)
    red = -np.ones(n, dtype=np.int64)
    red[keep] = np.arange(n - 1)
    u_red = red[u_idx]
    v_red = red[v_idx]

    total_iters = 0
    trace: list[float] = []
    cg_residual = 0.0
    first_solve = True
    for phase_iters, exponent in ((max_iters[0], 1.0), (max_iters[1], 1.5)):
        for _ in range(phase_iters):
            total_iters += 1
            # body-frame residual; its norm is the edge's geodesic error
            resid = so3.qlog(
                so3.qmul(so3.qconj(rows[v_idx]), so3.qmul(meas, rows[u_idx]))
            )  # (E, 3)
            norms = np.linalg.norm(resid, axis=1)
            if first_solve:
                # plain least squares before any reweighting, as in standard
                # IRLS; otherwise exactly-consistent tree edges pin the init
                w = np.ones_like(norms)
                first_solve = False
            else:
                w = 1.0 / np.maximum(norms**exponent, delta)

            rhs = np.zeros((n - 1, 3))
            wr = w[:, None] * resid
            for e in range(len(g.edges)):
                if v_red[e] >= 0:
                    rhs[v_red[e]] += wr[e]
                if u_red[e] >= 0:
                    rhs[u_red[e]] -= wr[e]

            diag = np.zeros(n - 1)
            np.add.at(diag, v_red[v_red >= 0], w[v_red >= 0])
            np.add.at(diag, u_red[u_red >= 0], w[u_red >= 0])

            both = (u_red >= 0) & (v_red >= 0)
            uu = u_red[both]
            vv = v_red[both]
            ww = w[both]

            def apply_laplacian(x: np.ndarray) -> np.ndarray:
                out = diag[:, None] * x
                np.subtract.at(out, uu, ww[:, None] * x[vv])
                np.subtract.at(out, vv, ww[:, None] * x[uu])
                return out

            x, cg_residual = _cg_multi(apply_laplacian, rhs, max_iter=10 * n, tol=CG_TOL)
            step = np.zeros((n, 3))
            step[keep] = x
            rows = so3.qcanon(so3.qmul(rows, so3.qexp(step)))
            max_step = float(np.max(np.linalg.norm(step, axis=1)))
            trace.append(max_step)
            if max_step < step_tol:
                break
    out = [UnitQuaternion.from_array(r) for r in rows]
    return IrlsResult(
        orientations=out,
        iterations=total_iters,
        max_step_trace=trace,
        cg_residual=cg_residual,
    )
