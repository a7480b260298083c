"""Centralized backend: keyframe ingest, loop closure, component merging."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .frontend import Keyframe
from .geometry import Frame, PointCloud, Pose2, compose, transform_cloud, voxel_downsample
from .perception import ObjectKind
from .posegraph import (EdgeKind, GraphEdge, GraphNode, OptimizeConfig, PoseGraph, loop_information,
                        odometry_information, optimize)
from .registration import IcpConfig, scan_match
from .scancontext import DescriptorIndex, ScanContextConfig, shift_to_yaw

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    pass


class CandidateSource(enum.Enum):
    RADIUS = "Radius"
    DESCRIPTOR = "Descriptor"


@dataclass(frozen=True)
class LoopCandidate:
    query: int
    match: int
    source: CandidateSource
    init_guess: Pose2
    descriptor_distance: float | None = None

    def __post_init__(self):
        if self.query == self.match and self.source is CandidateSource.RADIUS:
            raise ValueError("radius candidate must pair distinct nodes")


@dataclass(frozen=True)
class MapUpdate:
    revision: int
    max_pose_delta: float
    merged_components: tuple[tuple[int, int], ...] = ()
    optimized: bool = False
    new_loops: int = 0


@dataclass(frozen=True)
class ServerConfig:
    r_loop: float = 15.0
    w_recent: int = 30
    f_max: float = 0.5
    i_min: float = 0.6
    c_max: int = 5
    n_opt: int = 10
    optimize_on_loop: bool = True
    # after an accepted closure an agent skips loop search for this many meters
    loop_min_travel: float = 10.0
    sigma_t: float = 0.1
    sigma_r: float = 0.01
    map_voxel: float = 0.5
    icp: IcpConfig = field(default_factory=lambda: IcpConfig(max_corr_dist=2.0, coarse_factor=4.0,
                                                               coarse_iters=8, z_weight=0.1,
                                                               yaw_restarts=()))
    scan_context: ScanContextConfig = field(default_factory=lambda: ScanContextConfig(height_offset=1.8))
    optimizer: OptimizeConfig = field(default_factory=OptimizeConfig)
    # world pose of each agent's first keyframe; agents not listed start at identity
    priors: dict = field(default_factory=dict)


@dataclass
class LoopStats:
    intra: int = 0
    inter: int = 0
    rejected: int = 0


@dataclass(frozen=True)
class GraphSnapshot:
    """Immutable view handed to scene-graph consumers."""
    revision: int
    poses: dict
    component_of: dict
    node_of: dict  # (agent_id, keyframe_id) -> node_id


class SlamServer:
    def __init__(self, cfg: ServerConfig = ServerConfig()):
        self.cfg = cfg
        self.graph = PoseGraph()
        self.index = DescriptorIndex(cfg.scan_context)
        self.keyframes: dict[int, Keyframe] = {}
        self.node_of: dict[tuple[int, int], int] = {}
        self.agent_nodes: dict[int, list[int]] = {}
        self.component_of: dict[int, int] = {}  # node -> anchor node id
        self.members: dict[int, list[int]] = {}  # anchor node id -> nodes
        self.stats = LoopStats()
        self.revision = 0
        self.bytes_in: dict[int, int] = {}
        self.merge_log: list[tuple[int, int, int]] = []  # (revision, kept, absorbed)
        self._since_opt = 0
        self._travel: dict[int, float] = {}
        self._quiet_until: dict[int, float] = {}
        self._last_opt_poses: dict[int, Pose2] = {}

    # -- ingest --------------------------------------------------------------

    def ingest_keyframe(self, kf: Keyframe, nbytes: int = 0) -> MapUpdate | None:
        """Add a keyframe; returns None when the message is dropped."""
        try:
            node = self._add_node(kf)
        except ProtocolError as exc:
            log.warning("dropped keyframe: %s", exc)
            return None
        self.bytes_in[kf.agent_id] = self.bytes_in.get(kf.agent_id, 0) + nbytes
        self.index.add(node, kf.descriptor)
        accepted: list[GraphEdge] = []
        merged: list[tuple[int, int]] = []
        agent = kf.agent_id
        if self._travel[agent] >= self._quiet_until.get(agent, -math.inf):
            for cand in self.find_candidates(node):
                edge = self.validate_candidate(cand)
                if edge is None:
                    self.stats.rejected += 1
                    continue
                pair = self.merge_components(edge)
                if pair is not None:
                    merged.append(pair)
                accepted.append(edge)
                self._quiet_until[agent] = self._travel[agent] + self.cfg.loop_min_travel
                # one closure per keyframe is enough to constrain it
                break
        self._since_opt += 1
        run_opt = (accepted and self.cfg.optimize_on_loop) or self._since_opt >= self.cfg.n_opt
        delta = 0.0
        if run_opt:
            delta = self._optimize()
        elif merged:
            delta = self._pose_change()
        self.revision += 1
        return MapUpdate(self.revision, delta, tuple(merged), bool(run_opt), len(accepted))

    def _add_node(self, kf: Keyframe) -> int:
        key = (kf.agent_id, kf.keyframe_id)
        if key in self.node_of:
            raise ProtocolError(f"duplicate keyframe {key}")
        prev = self.agent_nodes.get(kf.agent_id)
        if prev:
            last = self.keyframes[prev[-1]]
            if kf.keyframe_id <= last.keyframe_id or kf.timestamp_us <= last.timestamp_us:
                raise ProtocolError(f"out-of-order keyframe {key}")
        node_id = len(self.graph.nodes)
        if not prev:
            prior = self.cfg.priors.get(kf.agent_id, Pose2.identity())
            self.graph.add_node(GraphNode(node_id, kf.agent_id, kf.keyframe_id, prior, fixed=True))
            self.component_of[node_id] = node_id
            self.members[node_id] = [node_id]
            self.agent_nodes[kf.agent_id] = [node_id]
            self._travel[kf.agent_id] = 0.0
        else:
            p = prev[-1]
            inc = compose(self.keyframes[p].odom_pose.inverse(), kf.odom_pose)
            pose = compose(self.graph.nodes[p].pose, inc)
            self.graph.add_node(GraphNode(node_id, kf.agent_id, kf.keyframe_id, pose))
            self.graph.add_edge(GraphEdge(p, node_id, inc, odometry_information(self.cfg.sigma_t, self.cfg.sigma_r)))
            comp = self.component_of[p]
            self.component_of[node_id] = comp
            self.members[comp].append(node_id)
            self.agent_nodes[kf.agent_id].append(node_id)
            self._travel[kf.agent_id] += math.hypot(inc.x, inc.y)
        self.keyframes[node_id] = kf
        self.node_of[key] = node_id
        return node_id

    # -- loop closure --------------------------------------------------------

    def find_candidates(self, node: int) -> list[LoopCandidate]:
        cfg = self.cfg
        me = self.graph.nodes[node]
        comp = self.component_of[node]
        recent = set(self.agent_nodes[me.agent_id][-(cfg.w_recent + 1):])
        pool = [n for n in self.members[comp] if n not in recent]
        out: list[LoopCandidate] = []
        near: set[int] = set()
        if pool:
            xy = np.array([[self.graph.nodes[n].pose.x, self.graph.nodes[n].pose.y] for n in pool])
            d = np.hypot(xy[:, 0] - me.pose.x, xy[:, 1] - me.pose.y)
            hits = np.nonzero(d <= cfg.r_loop)[0]
            near = {pool[i] for i in hits}
            for i in hits[np.lexsort((hits, d[hits]))]:
                m = pool[i]
                guess = compose(me.pose.inverse(), self.graph.nodes[m].pose)
                out.append(LoopCandidate(node, m, CandidateSource.RADIUS, guess))

        def excluded(h):
            return h in recent or h in near

        for m, dist, shift in self.index.query(self.keyframes[node].descriptor, k=cfg.c_max, exclude=excluded):
            # descriptor candidates in other components come first
            yaw = -shift_to_yaw(shift, cfg.scan_context.n_sector)
            out.append(LoopCandidate(node, m, CandidateSource.DESCRIPTOR, Pose2(0.0, 0.0, yaw), dist))
        other = [c for c in out if self.component_of[c.match] != comp]
        same = [c for c in out if self.component_of[c.match] == comp]
        return (other + same)[:cfg.c_max]

    def validate_candidate(self, c: LoopCandidate) -> GraphEdge | None:
        """Scan-match the two keyframes; the edge measures match pose in the query frame."""
        src = self.keyframes[c.match].cloud
        dst = self.keyframes[c.query].cloud
        if len(src) == 0 or len(dst) == 0:
            return None
        res = scan_match(src, dst, c.init_guess, self.cfg.icp)
        if not (res.converged and res.fitness <= self.cfg.f_max and res.inlier_fraction >= self.cfg.i_min):
            return None
        a, b = self.graph.nodes[c.query], self.graph.nodes[c.match]
        kind = EdgeKind.LOOP_INTRA if a.agent_id == b.agent_id else EdgeKind.LOOP_INTER
        if c.query == c.match:
            return _self_edge(c.query, res.transform, kind)
        info = loop_information(res.fitness, self.cfg.sigma_t, self.cfg.sigma_r)
        edge = GraphEdge(c.query, c.match, res.transform, info, kind)
        assert res.fitness <= self.cfg.f_max
        return edge

    def merge_components(self, edge: GraphEdge) -> tuple[int, int] | None:
        """Insert a validated loop edge, unifying its endpoints' components.

        The component whose anchor was created first keeps its anchor; the
        other one is moved rigidly so the new edge has zero residual.
        Returns the merged (kept, absorbed) pair, or None for a same-component edge.
        """
        if edge.src == edge.dst:
            return None
        kind = edge.kind
        ca, cb = self.component_of[edge.src], self.component_of[edge.dst]
        self.graph.add_edge(edge)
        if kind is EdgeKind.LOOP_INTER:
            self.stats.inter += 1
        elif kind is EdgeKind.LOOP_INTRA:
            self.stats.intra += 1
        if ca == cb:
            return None
        keep, drop = (ca, cb) if ca < cb else (cb, ca)
        nodes = self.graph.nodes
        if self.component_of[edge.dst] == drop:
            target = compose(nodes[edge.src].pose, edge.measurement)
            moving = nodes[edge.dst].pose
        else:
            target = compose(nodes[edge.dst].pose, edge.measurement.inverse())
            moving = nodes[edge.src].pose
        T = compose(target, moving.inverse())
        for n in self.members[drop]:
            nodes[n].pose = compose(T, nodes[n].pose)
            self.component_of[n] = keep
        nodes[drop].fixed = False
        self.members[keep].extend(self.members.pop(drop))
        self.merge_log.append((self.revision + 1, keep, drop))
        return keep, drop

    # -- optimization ----------------------------------------------------------

    def _pose_change(self) -> float:
        best = 0.0
        for n, node in self.graph.nodes.items():
            old = self._last_opt_poses.get(n)
            if old is not None:
                best = max(best, math.hypot(node.pose.x - old.x, node.pose.y - old.y))
        self._last_opt_poses = self.graph.poses()
        return best

    def _optimize(self) -> float:
        self._since_opt = 0
        if self.graph.edges:
            optimize(self.graph, self.cfg.optimizer)
        return self._pose_change()

    def finalize(self) -> MapUpdate:
        """Run a last optimization after the message stream ends."""
        delta = self._optimize()
        self.revision += 1
        return MapUpdate(self.revision, delta, (), True, 0)

    # -- read side -------------------------------------------------------------

    def components(self) -> list[list[int]]:
        return sorted((sorted(m) for m in self.members.values()), key=lambda g: g[0])

    def snapshot(self) -> GraphSnapshot:
        return GraphSnapshot(self.revision, self.graph.poses(), dict(self.component_of), dict(self.node_of))

    def assemble_map(self, voxel: float | None = None) -> PointCloud:
        return assemble_map(self.graph, self.keyframes, self.cfg.map_voxel if voxel is None else voxel,
                            self.cfg.scan_context.height_offset)


def _self_edge(node: int, measurement: Pose2, kind: EdgeKind) -> GraphEdge:
    # a self-pairing validates trivially; it is represented but never inserted
    edge = object.__new__(GraphEdge)
    edge.src = edge.dst = node
    edge.measurement = measurement
    edge.information = np.eye(3)
    edge.kind = kind
    return edge


def assemble_map(graph: PoseGraph, keyframes: dict, voxel: float = 0.5, z_offset: float = 0.0) -> PointCloud:
    """World-frame semantic cloud from all keyframes at their current poses.

    Points inherit the class label of a static observation whose box
    contains them; everything else is ``"unlabeled"``. ``z_offset`` (the
    sensor mount height) lifts points to height above ground.
    """
    clouds = []
    for n in sorted(graph.nodes):
        kf = keyframes.get(n)
        if kf is None or len(kf.cloud) == 0:
            continue
        pts = kf.cloud.points
        labels = np.full(len(pts), "unlabeled", dtype=object)
        for obs in kf.observations:
            if obs.kind == ObjectKind.STATIC and len(obs.points):
                labels[obs.aabb.inflated(0.05).contains(pts)] = obs.class_label
        local = PointCloud(pts + np.array([0.0, 0.0, z_offset]), Frame.KEYFRAME, labels)
        clouds.append(transform_cloud(graph.nodes[n].pose, local))
    if not clouds:
        return PointCloud(np.zeros((0, 3)), Frame.WORLD)
    return voxel_downsample(PointCloud.concatenate(clouds), voxel)
