"""Hierarchical scene graph: regions, fused static objects and dynamic tracks.

Layers, top to bottom: the root, the region layer (intersections joined by
road edges), static object nodes, dynamic tracks, and the map layer (a
reference to the pose-graph revision plus the assembled semantic cloud).
Static nodes are only fused with observations from the same pose-graph
component, because unmerged components live in unrelated frames.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import DBSCAN

from .geometry import Box, Pose2, wrap_angles
from .perception import ObjectKind, ObjectObservation

ROOT = "root"


class StaleNodeError(KeyError):
    """The observation's source keyframe is not in the pose snapshot yet."""


@dataclass(frozen=True)
class SceneGraphConfig:
    tau_ov: float = 0.3
    tau_upd: float = 0.5
    # thin point sets (a pole seen from one side) are grown to this extent before overlap tests
    min_extent: float = 0.5
    track_gap: float = 30.0
    window: int = 3
    theta_turn: float = math.radians(45.0)
    eps_int: float = 15.0
    r_assoc: float = 25.0
    # observation z is relative to the sensor; the graph stores height above ground
    sensor_height: float = 1.8


ObsRef = tuple  # (agent_id, keyframe_id, index within keyframe)


@dataclass
class StaticObjectNode:
    object_id: int
    class_label: str
    contributing: list  # (ObsRef, node_id), canonical order
    world_points: np.ndarray
    world_aabb: Box
    observer_agents: set
    component: int
    region: str = ROOT

    @property
    def refs(self) -> frozenset:
        return frozenset(r for r, _ in self.contributing)


@dataclass
class TrackNode:
    track_id: int
    agent_id: int
    instance_id: int
    class_label: str
    samples: list  # (t_us, np.ndarray(3))
    region: str = ROOT

    @property
    def moving(self) -> bool:
        return is_moving([s[1] for s in self.samples])


@dataclass
class Intersection:
    node_id: int
    position: np.ndarray


@dataclass
class RoadEdge:
    edge_id: int
    a: int
    b: int
    polyline: np.ndarray


@dataclass
class UpdateReport:
    triggered: bool
    merges: int = 0
    splits: int = 0


def is_moving(positions, threshold: float = 8.0) -> bool:
    """True iff some sample lies more than ``threshold`` (planar) from the first."""
    if len(positions) < 2:
        return False
    p = np.asarray(positions, dtype=float)[:, :2]
    return bool(np.max(np.hypot(*(p - p[0]).T)) > threshold)


def split_track(samples, gap: float = 30.0) -> list[list]:
    """Cut a time-ordered sample list wherever consecutive planar gaps exceed ``gap``."""
    out: list[list] = []
    for s in samples:
        if out and math.hypot(s[1][0] - out[-1][-1][1][0], s[1][1] - out[-1][-1][1][1]) <= gap:
            out[-1].append(s)
        else:
            out.append([s])
    return out


def _to_world(pose: Pose2, pts: np.ndarray) -> np.ndarray:
    out = np.array(pts, dtype=float, copy=True)
    out[:, :2] = pose.transform_xy(pts[:, :2])
    return out


# -- region layer --------------------------------------------------------------

def disfluency(xy: np.ndarray, window: int = 3) -> np.ndarray:
    """Heading change across a +-window neighbourhood; NaN where undefined.

    heading(j) is the direction of the displacement from sample j to j+1.
    """
    xy = np.asarray(xy, dtype=float)
    n = len(xy)
    out = np.full(n, np.nan)
    if n < 2:
        return out
    d = np.diff(xy, axis=0)
    heading = np.arctan2(d[:, 1], d[:, 0])
    idx = np.arange(window, n - 1 - window)
    if len(idx):
        out[idx] = np.abs(wrap_angles(heading[idx + window] - heading[idx - window]))
    return out


def detect_intersections(trajectories, cfg: SceneGraphConfig = SceneGraphConfig()) -> list[np.ndarray]:
    """Cluster sharp-turn positions of all trajectories into intersection nodes.

    Returns cluster centroids sorted lexicographically, so the result does
    not depend on the order of the trajectories.
    """
    pts = []
    for traj in trajectories:
        xy = np.asarray(traj, dtype=float)[:, :2]
        if len(xy) < 2:
            continue
        dis = disfluency(xy, cfg.window)
        turn = np.nan_to_num(dis, nan=0.0) > cfg.theta_turn
        pts.extend(xy[turn])
    if not pts:
        return []
    pts = np.array(pts)
    labels = DBSCAN(eps=cfg.eps_int, min_samples=1).fit(pts).labels_
    cents = [pts[labels == k].mean(axis=0) for k in np.unique(labels)]
    cents.sort(key=lambda c: (round(float(c[0]), 9), round(float(c[1]), 9)))
    return cents


def build_road_edges(trajectories, intersections, cfg: SceneGraphConfig = SceneGraphConfig()) -> list[RoadEdge]:
    """Segments of trajectories between successive intersection disks, de-duplicated."""
    if len(intersections) == 0:
        return []
    centers = np.asarray(intersections, dtype=float).reshape(-1, 2)
    edges: dict[tuple[int, int], np.ndarray] = {}
    for traj in trajectories:
        xy = np.asarray(traj, dtype=float)[:, :2]
        if len(xy) == 0:
            continue
        d = np.hypot(xy[:, None, 0] - centers[None, :, 0], xy[:, None, 1] - centers[None, :, 1])
        inside = np.where(d.min(axis=1) <= cfg.r_assoc, d.argmin(axis=1), -1)
        prev, start, cur = None, 0, -1
        for k, c in enumerate(inside):
            if c >= 0 and c != cur:
                if prev is not None and c != prev:
                    key = (min(prev, c), max(prev, c))
                    if key not in edges:
                        edges[key] = xy[start:k + 1].copy()
                prev, start = int(c), k
            cur = c
    return [RoadEdge(i, a, b, edges[(a, b)]) for i, (a, b) in enumerate(sorted(edges))]


def _segment_distance(p: np.ndarray, poly: np.ndarray) -> float:
    if len(poly) == 1:
        return float(np.hypot(*(p - poly[0])))
    a, b = poly[:-1], poly[1:]
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-12), 0.0, 1.0)
    return float(np.min(np.hypot(*(a + t[:, None] * ab - p).T)))


# -- the graph -------------------------------------------------------------------

@dataclass
class _StaticRecord:
    ref: ObsRef
    node_id: int
    agent_id: int
    class_label: str
    local: np.ndarray


@dataclass
class _DynamicRecord:
    node_id: int
    t_us: int
    class_label: str
    local_centroid: np.ndarray


@dataclass
class SceneGraph:
    cfg: SceneGraphConfig = field(default_factory=SceneGraphConfig)
    revision: int = 0
    intersections: list = field(default_factory=list)
    roads: list = field(default_factory=list)
    objects: dict = field(default_factory=dict)
    tracks: list = field(default_factory=list)
    map_cloud: object = None
    _static: dict = field(default_factory=dict, repr=False)  # ObsRef -> _StaticRecord
    _dynamic: dict = field(default_factory=dict, repr=False)  # (agent, instance) -> [_DynamicRecord]
    _next_object: int = 0
    _poses: dict = field(default_factory=dict, repr=False)
    _components: dict = field(default_factory=dict, repr=False)
    _last_track: dict = field(default_factory=dict, repr=False)

    # -- static objects ------------------------------------------------------

    def _world_box(self, pts: np.ndarray) -> Box:
        return Box.from_points(pts).with_min_extent(self.cfg.min_extent)

    def fuse_static_observation(self, ref: ObsRef, obs: ObjectObservation, node_id: int, poses: dict,
                                components: dict | None = None) -> int:
        if obs.kind != ObjectKind.STATIC:
            raise ValueError("only static observations are fused")
        if node_id not in poses:
            raise StaleNodeError(node_id)
        if len(obs.points) == 0:
            raise ValueError("empty observation")
        comp = (components or {}).get(node_id, 0)
        local = obs.points.points.copy()
        local[:, 2] += self.cfg.sensor_height
        rec = _StaticRecord(ref, node_id, obs.agent_id, obs.class_label, local)
        self._static[ref] = rec
        world = _to_world(poses[node_id], rec.local)
        return self._associate(rec, world, comp)

    def _associate(self, rec: _StaticRecord, world: np.ndarray, comp: int) -> int:
        box = self._world_box(world)
        best, best_ratio = None, -1.0
        for oid, node in self.objects.items():
            if node.class_label != rec.class_label or node.component != comp:
                continue
            r = box.overlap_ratio(node.world_aabb.with_min_extent(self.cfg.min_extent))
            if r > best_ratio:
                best, best_ratio = oid, r
        if best is not None and best_ratio >= self.cfg.tau_ov:
            node = self.objects[best]
            node.contributing.append((rec.ref, rec.node_id))
            node.world_points = np.vstack([node.world_points, world])
            node.world_aabb = Box.from_points(node.world_points)
            node.observer_agents.add(rec.agent_id)
            return best
        oid = self._next_object
        self._next_object += 1
        self.objects[oid] = StaticObjectNode(oid, rec.class_label, [(rec.ref, rec.node_id)], world,
                                             Box.from_points(world), {rec.agent_id}, comp,
                                             self._region_of(world.mean(axis=0)))
        return oid

    # -- dynamic tracks ------------------------------------------------------

    def ingest_dynamic_observation(self, obs: ObjectObservation, node_id: int, poses: dict) -> int:
        if obs.kind != ObjectKind.DYNAMIC:
            raise ValueError("only dynamic observations form tracks")
        if node_id not in poses:
            raise StaleNodeError(node_id)
        key = (obs.agent_id, obs.instance_id)
        seq = self._dynamic.setdefault(key, [])
        if seq and obs.timestamp_us <= seq[-1].t_us:
            raise ValueError("dynamic observations must arrive in time order")
        rec = _DynamicRecord(node_id, obs.timestamp_us, obs.class_label,
                             obs.centroid + np.array([0.0, 0.0, self.cfg.sensor_height]))
        seq.append(rec)
        p = _to_world(poses[node_id], rec.local_centroid[None, :])[0]
        k = self._last_track.get(key)
        if k is not None:
            last = self.tracks[k].samples[-1][1]
            if math.hypot(p[0] - last[0], p[1] - last[1]) <= self.cfg.track_gap:
                self.tracks[k].samples.append((rec.t_us, p))
                return self.tracks[k].track_id
        tr = TrackNode(len(self.tracks), key[0], key[1], rec.class_label, [(rec.t_us, p)], self._region_of(p))
        self.tracks.append(tr)
        self._last_track[key] = len(self.tracks) - 1
        return tr.track_id

    def _rebuild_tracks(self, poses: dict) -> None:
        tracks = []
        self._last_track = {}
        for (agent, inst) in sorted(self._dynamic):
            recs = self._dynamic[(agent, inst)]
            samples = [(r.t_us, _to_world(poses[r.node_id], r.local_centroid[None, :])[0]) for r in recs]
            for seg in split_track(samples, self.cfg.track_gap):
                tracks.append(TrackNode(len(tracks), agent, inst, recs[0].class_label, seg, self._region_of(seg[0][1])))
            self._last_track[(agent, inst)] = len(tracks) - 1
        self.tracks = tracks

    # -- keyframe-level entry point -------------------------------------------

    def add_keyframe_observations(self, agent_id: int, keyframe_id: int, observations, node_id: int,
                                  poses: dict, components: dict | None = None) -> None:
        self._poses = dict(poses)
        if components is not None:
            self._components = dict(components)
        for k, obs in enumerate(observations):
            if len(obs.points) == 0:
                continue
            if obs.kind == ObjectKind.STATIC:
                self.fuse_static_observation((agent_id, keyframe_id, k), obs, node_id, poses, components)
            else:
                self.ingest_dynamic_observation(obs, node_id, poses)

    # -- map updates -----------------------------------------------------------

    def on_map_update(self, max_pose_delta: float, poses: dict, components: dict | None = None,
                      trajectories=None, revision: int | None = None, merged: bool = False) -> UpdateReport:
        """React to a pose-graph update.

        Nothing happens unless the update moved some pose by at least
        ``tau_upd`` or merged components. Otherwise every contribution is
        re-transformed and static membership is replayed in reference order,
        which merges nodes that now overlap and splits nodes whose
        contributors drifted apart; tracks and regions are rebuilt too.
        """
        if revision is not None:
            self.revision = revision
        if max_pose_delta < self.cfg.tau_upd and not merged:
            return UpdateReport(False)
        self._poses = dict(poses)
        if components is not None:
            self._components = dict(components)
        if trajectories is not None:
            self.rebuild_regions(trajectories)
        merges, splits = self._refresh_static(poses)
        self._rebuild_tracks(poses)
        for node in self.objects.values():
            node.region = self._region_of(node.world_points.mean(axis=0))
        return UpdateReport(True, merges, splits)

    def _refresh_static(self, poses: dict) -> tuple[int, int]:
        """Recompute static membership from all records at the current poses.

        Object ids survive when a new group shares references with an old
        node; returns (merges, splits) relative to the previous membership.
        """
        records = self.static_records()
        groups = _replay(records, poses, self._components, self.cfg)
        owner = {r: oid for oid, node in self.objects.items() for r, _ in node.contributing}
        old_regions = {oid: node.region for oid, node in self.objects.items()}
        merges = 0
        pieces: dict[int, int] = {}
        used: set[int] = set()
        new_objects: dict[int, StaticObjectNode] = {}
        pending = []
        for members, comp in groups:
            counts: dict[int, int] = {}
            for i in members:
                o = owner.get(records[i].ref)
                if o is not None:
                    counts[o] = counts.get(o, 0) + 1
            merges += max(len(counts) - 1, 0)
            for o in counts:
                pieces[o] = pieces.get(o, 0) + 1
            best = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
            oid = next((o for o, _ in best if o not in used), None)
            if oid is None:
                pending.append((members, comp))
                continue
            used.add(oid)
            new_objects[oid] = self._node_from(oid, records, members, poses, comp, old_regions.get(oid, ROOT))
        for members, comp in pending:
            oid = self._next_object
            self._next_object += 1
            new_objects[oid] = self._node_from(oid, records, members, poses, comp, ROOT)
        self.objects = dict(sorted(new_objects.items()))
        splits = sum(n - 1 for n in pieces.values())
        return merges, splits

    def _node_from(self, oid: int, records, members, poses, comp: int, region: str) -> StaticObjectNode:
        recs = [records[i] for i in members]
        pts = np.vstack([_to_world(poses[r.node_id], r.local) for r in recs])
        return StaticObjectNode(oid, recs[0].class_label, [(r.ref, r.node_id) for r in recs], pts,
                                Box.from_points(pts), {r.agent_id for r in recs}, comp, region)

    # -- regions ---------------------------------------------------------------

    def rebuild_regions(self, trajectories) -> None:
        trajectories = [np.asarray(t, dtype=float) for t in trajectories]
        cents = detect_intersections(trajectories, self.cfg)
        self.intersections = [Intersection(i, c) for i, c in enumerate(cents)]
        self.roads = build_road_edges(trajectories, cents, self.cfg)

    def _region_of(self, p) -> str:
        p = np.asarray(p, dtype=float)[:2]
        if self.intersections:
            d = [float(np.hypot(*(i.position - p))) for i in self.intersections]
            k = int(np.argmin(d))
            if d[k] <= self.cfg.r_assoc or not self.roads:
                return f"intersection:{self.intersections[k].node_id}"
            dr = [_segment_distance(p, r.polyline) for r in self.roads]
            j = int(np.argmin(dr))
            return f"road:{self.roads[j].edge_id}" if dr[j] < d[k] else f"intersection:{self.intersections[k].node_id}"
        return ROOT

    # -- consistency -------------------------------------------------------------

    def static_partition(self) -> set[frozenset]:
        return {n.refs for n in self.objects.values()}

    def static_records(self) -> list[_StaticRecord]:
        return [self._static[r] for r in sorted(self._static)]


def _grow(lo: np.ndarray, hi: np.ndarray, extent: float) -> tuple[np.ndarray, np.ndarray]:
    g = np.maximum(extent - (hi - lo), 0.0) / 2.0
    return lo - g, hi + g


def _overlap_ratios(lo, hi, los, his) -> np.ndarray:
    """Overlap ratio of one box against many (intersection over the smaller volume)."""
    inter = np.prod(np.clip(np.minimum(his, hi) - np.maximum(los, lo), 0.0, None), axis=-1)
    denom = np.minimum(np.prod(hi - lo), np.prod(his - los, axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, inter / denom, 0.0)


def _replay(records, poses: dict, components: dict, cfg: SceneGraphConfig) -> list[tuple[list[int], int]]:
    """Canonical static fusion: greedy association in record order, then the merge fixpoint.

    ``records`` must be sorted by reference. Returns (record indices,
    component) per object, ordered by the first record of each group.
    Everything works on bounding boxes: the box of a union of point sets is
    the union of their boxes.
    """
    n = len(records)
    raw_lo, raw_hi = np.empty((n, 3)), np.empty((n, 3))
    lo, hi = np.empty((n, 3)), np.empty((n, 3))
    key = np.empty(n, dtype=np.int64)
    comps: list[int] = []
    members: list[list[int]] = []
    keys: dict = {}
    m = 0
    for i, r in enumerate(records):
        w = _to_world(poses[r.node_id], r.local)
        blo, bhi = w.min(axis=0), w.max(axis=0)
        glo, ghi = _grow(blo, bhi, cfg.min_extent)
        comp = components.get(r.node_id, 0)
        k = keys.setdefault((r.class_label, comp), len(keys))
        cand = np.nonzero(key[:m] == k)[0]
        if len(cand):
            ratio = _overlap_ratios(glo, ghi, lo[cand], hi[cand])
            j = int(np.argmax(ratio))
            if ratio[j] >= cfg.tau_ov:
                t = cand[j]
                raw_lo[t] = np.minimum(raw_lo[t], blo)
                raw_hi[t] = np.maximum(raw_hi[t], bhi)
                lo[t], hi[t] = _grow(raw_lo[t], raw_hi[t], cfg.min_extent)
                members[t].append(i)
                continue
        raw_lo[m], raw_hi[m], lo[m], hi[m], key[m] = blo, bhi, glo, ghi, k
        comps.append(comp)
        members.append([i])
        m += 1
    raw_lo, raw_hi, lo, hi, key = raw_lo[:m], raw_hi[:m], lo[:m], hi[:m], key[:m]
    alive = np.ones(m, dtype=bool)
    # merge the lowest overlapping pair into the lower index until none remain
    k = 0
    while k < m:
        if not alive[k]:
            k += 1
            continue
        ok = alive & (key == key[k]) & (_overlap_ratios(lo[k], hi[k], lo, hi) >= cfg.tau_ov)
        ok[:k + 1] = False
        if not ok.any():
            k += 1
            continue
        j = int(np.argmax(ok))
        raw_lo[k] = np.minimum(raw_lo[k], raw_lo[j])
        raw_hi[k] = np.maximum(raw_hi[k], raw_hi[j])
        lo[k], hi[k] = _grow(raw_lo[k], raw_hi[k], cfg.min_extent)
        members[k] = sorted(members[k] + members[j])
        alive[j] = False
        # the grown box may now overlap lower indices
        k = 0
    return [(members[t], comps[t]) for t in range(m) if alive[t]]


def rebuild_static_layer(records, poses: dict, components: dict, cfg: SceneGraphConfig = SceneGraphConfig()
                         ) -> set[frozenset]:
    """From-scratch fusion of every static record in canonical (reference) order.

    Returns the partition of observation references into objects, which is
    what the maintained graph must reproduce up to object relabeling.
    """
    records = sorted(records, key=lambda r: r.ref)
    return {frozenset(records[i].ref for i in members) for members, _ in _replay(records, poses, components, cfg)}


# -- export --------------------------------------------------------------------

def _r6(v) -> float:
    return round(float(v), 6)


def export_scene_graph(sg: SceneGraph) -> str:
    doc = {
        "revision": int(sg.revision),
        "root": {"id": ROOT},
        "intersections": [{"id": int(i.node_id), "x": _r6(i.position[0]), "y": _r6(i.position[1])}
                          for i in sg.intersections],
        "roads": [{"id": int(r.edge_id), "a": int(r.a), "b": int(r.b), "polyline": [[_r6(x), _r6(y)] for x, y in r.polyline]}
                  for r in sg.roads],
        "static_objects": [
            {"id": int(o.object_id), "class": o.class_label,
             "aabb": {"min": [_r6(v) for v in o.world_aabb.lo], "max": [_r6(v) for v in o.world_aabb.hi]},
             "region": o.region, "observers": sorted(int(a) for a in o.observer_agents)}
            for o in sorted(sg.objects.values(), key=lambda o: o.object_id)],
        "tracks": [
            {"id": int(t.track_id), "agent": int(t.agent_id), "instance": int(t.instance_id), "class": t.class_label,
             "moving": t.moving, "region": t.region,
             "samples": [{"t_us": int(ts), "x": _r6(p[0]), "y": _r6(p[1]), "z": _r6(p[2])} for ts, p in t.samples]}
            for t in sg.tracks],
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


@dataclass
class SceneGraphDocument:
    """Plain structural view of an exported scene graph."""
    revision: int
    intersections: list
    roads: list
    static_objects: list
    tracks: list

    @classmethod
    def from_graph(cls, sg: SceneGraph) -> "SceneGraphDocument":
        return cls.from_json(export_scene_graph(sg))

    @classmethod
    def from_json(cls, text: str) -> "SceneGraphDocument":
        d = json.loads(text)
        for key in ("revision", "root", "intersections", "roads", "static_objects", "tracks"):
            if key not in d:
                raise ValueError(f"scene graph document lacks {key!r}")
        return cls(d["revision"], d["intersections"], d["roads"], d["static_objects"], d["tracks"])


def import_scene_graph(text: str, cfg: SceneGraphConfig = SceneGraphConfig()) -> SceneGraph:
    """Rebuild the exported layers; contributor provenance is not part of the document."""
    doc = SceneGraphDocument.from_json(text)
    sg = SceneGraph(cfg, revision=doc.revision)
    sg.intersections = [Intersection(i["id"], np.array([i["x"], i["y"]])) for i in doc.intersections]
    sg.roads = [RoadEdge(r["id"], r["a"], r["b"], np.array(r["polyline"], dtype=float).reshape(-1, 2))
                for r in doc.roads]
    for o in doc.static_objects:
        box = Box(tuple(o["aabb"]["min"]), tuple(o["aabb"]["max"]))
        pts = np.array([box.lo, box.hi])
        sg.objects[o["id"]] = StaticObjectNode(o["id"], o["class"], [], pts, box, set(o["observers"]), 0, o["region"])
    sg._next_object = max(sg.objects, default=-1) + 1
    for t in doc.tracks:
        samples = [(s["t_us"], np.array([s["x"], s["y"], s["z"]])) for s in t["samples"]]
        sg.tracks.append(TrackNode(t["id"], t["agent"], t["instance"], t["class"], samples, t["region"]))
    return sg
