"""SE(2) pose graph and its Levenberg-Marquardt optimizer.

Edge residuals are ``log(Z^-1 * (X_i^-1 * X_j))`` and poses are perturbed
on the right, ``X <- X * exp(delta)``. Loop-closure edges go through a
Cauchy kernel whose scale is the edge's translational information, so a
1 m error sits at the kernel knee whatever the edge weight.
"""
from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cc
from scipy.sparse.linalg import splu

from .geometry import ParameterError, Pose2, Tangent2, compose, log, log_batch, right_jacobian_inv_batch, wrap_angles


class GraphError(RuntimeError):
    pass


class EdgeKind(enum.Enum):
    ODOMETRY = "Odometry"
    LOOP_INTRA = "LoopIntra"
    LOOP_INTER = "LoopInter"

    @property
    def is_loop(self) -> bool:
        return self is not EdgeKind.ODOMETRY


@dataclass
class GraphNode:
    node_id: int
    agent_id: int
    keyframe_id: int
    pose: Pose2
    fixed: bool = False


@dataclass
class GraphEdge:
    src: int
    dst: int
    measurement: Pose2
    information: np.ndarray
    kind: EdgeKind = EdgeKind.ODOMETRY

    def __post_init__(self):
        if self.src == self.dst:
            raise ParameterError("edge endpoints must differ")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (3, 3) or not np.allclose(info, info.T, atol=1e-12 * max(1.0, np.abs(info).max())):
            raise ParameterError("information must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(info).min() <= 0:
            raise ParameterError("information must be positive definite")
        self.information = info


@dataclass
class OptimizeConfig:
    max_iters: int = 100
    rel_tol: float = 1e-9
    step_tol: float = 1e-8
    # chi2 this far below its starting value is at rounding level
    abs_tol: float = 1e-15
    robust_loops: bool = True
    lambda_init: float = 1e-5


@dataclass
class OptimizeReport:
    initial_chi2: float
    final_chi2: float
    iterations: int
    max_pose_delta: float
    chi2_history: list[float] = field(default_factory=list)


def odometry_information(sigma_t: float = 0.1, sigma_r: float = 0.01) -> np.ndarray:
    return np.diag([1.0 / sigma_t**2, 1.0 / sigma_t**2, 1.0 / sigma_r**2])


def loop_information(fitness: float, sigma_t: float = 0.1, sigma_r: float = 0.01, cap: float = 10.0) -> np.ndarray:
    """Odometry information scaled by the inverse registration fitness.

    The scale is ``sigma_t^2 / max(fitness, 1e-4)`` so that a fitness equal
    to the odometry variance yields odometry weight; it is capped at ``cap``.
    """
    scale = min(sigma_t**2 / max(fitness, 1e-4), cap)
    return scale * odometry_information(sigma_t, sigma_r)


class PoseGraph:
    def __init__(self):
        self.nodes: dict[int, GraphNode] = {}
        self.edges: list[GraphEdge] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def add_node(self, node: GraphNode) -> GraphNode:
        if node.node_id in self.nodes:
            raise GraphError(f"duplicate node {node.node_id}")
        self.nodes[node.node_id] = node
        return node

    def add_edge(self, edge: GraphEdge) -> GraphEdge:
        for n in (edge.src, edge.dst):
            if n not in self.nodes:
                raise GraphError(f"edge references missing node {n}")
        self.edges.append(edge)
        return edge

    def poses(self) -> dict[int, Pose2]:
        return {k: n.pose for k, n in self.nodes.items()}

    def connected_components(self) -> list[list[int]]:
        """Node-id partition, each part sorted, parts ordered by smallest id."""
        ids = list(self.nodes)
        if not ids:
            return []
        pos = {n: k for k, n in enumerate(ids)}
        rows = [pos[e.src] for e in self.edges]
        cols = [pos[e.dst] for e in self.edges]
        adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
        _, labels = _cc(adj, directed=False)
        groups: dict[int, list[int]] = {}
        for n, lab in zip(ids, labels):
            groups.setdefault(int(lab), []).append(n)
        return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])

    # -- text dump ---------------------------------------------------------

    def dump(self) -> str:
        out = io.StringIO()
        for n in self.nodes.values():
            out.write(f"NODE {n.node_id} {n.agent_id} {n.keyframe_id} {n.pose.x!r} {n.pose.y!r} "
                      f"{n.pose.theta!r} {int(n.fixed)}\n")
        for e in self.edges:
            m, I = e.measurement, e.information
            vals = (I[0, 0], I[0, 1], I[0, 2], I[1, 1], I[1, 2], I[2, 2])
            out.write(f"EDGE {e.src} {e.dst} {m.x!r} {m.y!r} {m.theta!r} "
                      + " ".join(repr(float(v)) for v in vals) + f" {e.kind.value}\n")
        return out.getvalue()

    @classmethod
    def load(cls, text: str) -> "PoseGraph":
        g = cls()
        kinds = {k.value: k for k in EdgeKind}
        for line in text.splitlines():
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "NODE":
                g.add_node(GraphNode(int(tok[1]), int(tok[2]), int(tok[3]),
                                     Pose2(float(tok[4]), float(tok[5]), float(tok[6])), tok[7] == "1"))
            elif tok[0] == "EDGE":
                i11, i12, i13, i22, i23, i33 = map(float, tok[6:12])
                info = np.array([[i11, i12, i13], [i12, i22, i23], [i13, i23, i33]])
                g.add_edge(GraphEdge(int(tok[1]), int(tok[2]),
                                     Pose2(float(tok[3]), float(tok[4]), float(tok[5])), info, kinds[tok[12]]))
            else:
                raise GraphError(f"unknown record {tok[0]!r}")
        return g


def residual(edge: GraphEdge, poses) -> Tangent2:
    """Tangent-space error of one edge given a node-id -> Pose2 mapping."""
    try:
        a, b = poses[edge.src], poses[edge.dst]
    except KeyError as exc:
        raise GraphError(f"missing node {exc.args[0]}") from None
    rel = compose(a.inverse(), b)
    return log(compose(edge.measurement.inverse(), rel))


# -- vectorized machinery ----------------------------------------------------

@dataclass
class _Problem:
    ii: np.ndarray
    jj: np.ndarray
    meas: np.ndarray  # (m, 3)
    info: np.ndarray  # (m, 3, 3)
    robust: np.ndarray  # (m,) bool
    c2: np.ndarray  # (m,) kernel scale


def _build_problem(graph: PoseGraph, ids: list[int], cfg: OptimizeConfig) -> _Problem:
    pos = {n: k for k, n in enumerate(ids)}
    m = len(graph.edges)
    ii = np.fromiter((pos[e.src] for e in graph.edges), dtype=np.int64, count=m)
    jj = np.fromiter((pos[e.dst] for e in graph.edges), dtype=np.int64, count=m)
    meas = np.array([e.measurement.as_array() for e in graph.edges]).reshape(m, 3)
    info = np.array([e.information for e in graph.edges]).reshape(m, 3, 3)
    robust = np.array([cfg.robust_loops and e.kind.is_loop for e in graph.edges], dtype=bool)
    c2 = 0.5 * (info[:, 0, 0] + info[:, 1, 1])
    return _Problem(ii, jj, meas, info, robust, c2)


def edge_residuals(X: np.ndarray, prob: _Problem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residuals (m, 3) and Jacobians w.r.t. right perturbations of both ends."""
    xi, xj = X[prob.ii], X[prob.jj]
    ci, si = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    dx = xj[:, 0] - xi[:, 0]
    dy = xj[:, 1] - xi[:, 1]
    rel_x = ci * dx + si * dy
    rel_y = -si * dx + ci * dy
    rel_t = xj[:, 2] - xi[:, 2]
    cm, sm = np.cos(prob.meas[:, 2]), np.sin(prob.meas[:, 2])
    ex = cm * (rel_x - prob.meas[:, 0]) + sm * (rel_y - prob.meas[:, 1])
    ey = -sm * (rel_x - prob.meas[:, 0]) + cm * (rel_y - prob.meas[:, 1])
    et = wrap_angles(rel_t - prob.meas[:, 2])
    r = log_batch(ex, ey, et)
    jr_inv = right_jacobian_inv_batch(r)
    # Ad(X_j^-1 X_i) with X_j^-1 X_i = rel^-1
    cr, sr = np.cos(rel_t), np.sin(rel_t)
    inv_x = -(cr * rel_x + sr * rel_y)
    inv_y = -(-sr * rel_x + cr * rel_y)
    ad = np.zeros((len(r), 3, 3))
    ad[:, 0, 0] = cr
    ad[:, 0, 1] = sr
    ad[:, 1, 0] = -sr
    ad[:, 1, 1] = cr
    ad[:, 0, 2] = inv_y
    ad[:, 1, 2] = -inv_x
    ad[:, 2, 2] = 1.0
    jac_i = -(jr_inv @ ad)
    jac_j = jr_inv
    return r, jac_i, jac_j


def _cost(r: np.ndarray, prob: _Problem) -> tuple[float, np.ndarray]:
    s = np.sum((prob.info @ r[:, :, None])[:, :, 0] * r, axis=1)
    rho = np.where(prob.robust, prob.c2 * np.log1p(s / prob.c2), s)
    w = np.where(prob.robust, 1.0 / (1.0 + s / prob.c2), 1.0)
    return float(rho.sum()), w


def _retract(X: np.ndarray, delta: np.ndarray) -> np.ndarray:
    th = delta[:, 2]
    small = np.abs(th) < 1e-6
    safe = np.where(small, 1.0, th)
    a = np.where(small, 1.0 - th * th / 6.0, np.sin(safe) / safe)
    b = np.where(small, th / 2.0, (1.0 - np.cos(safe)) / safe)
    lx = a * delta[:, 0] - b * delta[:, 1]
    ly = b * delta[:, 0] + a * delta[:, 1]
    c, s = np.cos(X[:, 2]), np.sin(X[:, 2])
    out = np.empty_like(X)
    out[:, 0] = X[:, 0] + c * lx - s * ly
    out[:, 1] = X[:, 1] + s * lx + c * ly
    out[:, 2] = wrap_angles(X[:, 2] + th)
    return out


def graph_chi2(graph: PoseGraph, cfg: OptimizeConfig = OptimizeConfig()) -> float:
    if not graph.edges:
        return 0.0
    ids = list(graph.nodes)
    prob = _build_problem(graph, ids, cfg)
    X = np.array([graph.nodes[n].pose.as_array() for n in ids])
    r, _, _ = edge_residuals(X, prob)
    return _cost(r, prob)[0]


def optimize(graph: PoseGraph, cfg: OptimizeConfig = OptimizeConfig()) -> OptimizeReport:
    """Minimize the (robustified) chi-square in place and report the outcome."""
    ids = list(graph.nodes)
    comps = graph.connected_components()
    for comp in comps:
        n_fixed = sum(graph.nodes[n].fixed for n in comp)
        if n_fixed == 0:
            raise GraphError(f"component containing node {comp[0]} has no fixed anchor")
    if not graph.edges:
        return OptimizeReport(0.0, 0.0, 0, 0.0, [0.0])

    prob = _build_problem(graph, ids, cfg)
    X0 = np.array([graph.nodes[n].pose.as_array() for n in ids])
    free = np.array([not graph.nodes[n].fixed for n in ids])
    var_of = -np.ones(len(ids), dtype=np.int64)
    var_of[free] = np.arange(free.sum())
    nvar = int(free.sum())

    X = X0.copy()
    r, ji, jj = edge_residuals(X, prob)
    chi2, w = _cost(r, prob)
    initial = chi2
    history = [chi2]
    lam = cfg.lambda_init
    it = 0
    if nvar == 0:
        return OptimizeReport(initial, chi2, 0, 0.0, history)

    vi = var_of[prob.ii]
    vj = var_of[prob.jj]
    while it < cfg.max_iters and chi2 > 0.0:
        it += 1
        done = False
        wi = prob.info * w[:, None, None]
        jti_w = np.swapaxes(ji, 1, 2) @ wi
        jtj_w = np.swapaxes(jj, 1, 2) @ wi
        hii = jti_w @ ji
        hjj = jtj_w @ jj
        hij = jti_w @ jj
        gi = (jti_w @ r[:, :, None])[:, :, 0]
        gj = (jtj_w @ r[:, :, None])[:, :, 0]

        g = np.zeros(3 * nvar)
        rows, cols, vals = [], [], []
        blk_r = np.repeat(np.arange(3), 3)
        blk_c = np.tile(np.arange(3), 3)

        def add_block(va, vb, blocks):
            ok = (va >= 0) & (vb >= 0)
            if not ok.any():
                return
            rows.append((3 * va[ok])[:, None] + blk_r[None, :])
            cols.append((3 * vb[ok])[:, None] + blk_c[None, :])
            vals.append(blocks[ok].reshape(-1, 9))

        add_block(vi, vi, hii)
        add_block(vj, vj, hjj)
        add_block(vi, vj, hij)
        add_block(vj, vi, np.transpose(hij, (0, 2, 1)))
        oki = vi >= 0
        okj = vj >= 0
        np.add.at(g, (3 * vi[oki])[:, None] + np.arange(3)[None, :], gi[oki])
        np.add.at(g, (3 * vj[okj])[:, None] + np.arange(3)[None, :], gj[okj])
        H = sp.coo_matrix((np.concatenate(vals).ravel(),
                           (np.concatenate(rows).ravel(), np.concatenate(cols).ravel())),
                          shape=(3 * nvar, 3 * nvar)).tocsc()
        diag = H.diagonal()
        # unconstrained variables (no edges touch them) still need a pivot
        diag = np.where(diag > 0, diag, 1.0)

        while True:
            A = (H + sp.diags(lam * diag + 1e-12)).tocsc()
            # A is SPD, so a symmetric ordering without pivoting is safe
            lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
            step = -lu.solve(g)
            delta = np.zeros_like(X)
            delta[free] = step.reshape(-1, 3)
            X_new = _retract(X, delta)
            r_new, ji_new, jj_new = edge_residuals(X_new, prob)
            chi2_new, w_new = _cost(r_new, prob)
            if chi2_new < chi2:
                rel = (chi2 - chi2_new) / chi2
                X, r, ji, jj, w = X_new, r_new, ji_new, jj_new, w_new
                chi2 = chi2_new
                history.append(chi2)
                lam = max(lam / 10.0, 1e-12)
                done = (rel < cfg.rel_tol or np.linalg.norm(step) < cfg.step_tol
                        or chi2 <= cfg.abs_tol * initial)
                break
            lam *= 10.0
            if lam > 1e12 or np.linalg.norm(step) < cfg.step_tol:
                done = True
                break
        if done:
            break
    for k, n in enumerate(ids):
        if free[k]:
            graph.nodes[n].pose = Pose2(X[k, 0], X[k, 1], X[k, 2])
    moved = np.hypot(X[:, 0] - X0[:, 0], X[:, 1] - X0[:, 1])
    return OptimizeReport(initial, chi2, len(history) - 1, float(moved.max()) if len(moved) else 0.0, history)
