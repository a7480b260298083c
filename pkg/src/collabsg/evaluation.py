"""Trajectory, intersection and object metrics."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box, wrap_angles
from .scenegraph import SceneGraphConfig, disfluency


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered planar poses of one agent."""
    t_us: np.ndarray  # (N,) int64
    poses: np.ndarray  # (N, 3) x, y, theta
    agent_id: int = 0

    def __post_init__(self):
        t = np.asarray(self.t_us, dtype=np.int64)
        p = np.asarray(self.poses, dtype=float).reshape(-1, 3)
        if len(t) != len(p):
            raise EvaluationError("timestamps and poses differ in length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise EvaluationError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "t_us", t)
        object.__setattr__(self, "poses", p)

    @classmethod
    def from_samples(cls, samples, agent_id: int = 0) -> "Trajectory":
        samples = list(samples)
        t = np.array([s[0] for s in samples], dtype=np.int64)
        p = np.array([[s[1].x, s[1].y, s[1].theta] for s in samples], dtype=float).reshape(-1, 3)
        return cls(t, p, agent_id)

    def __len__(self) -> int:
        return len(self.t_us)


@dataclass(frozen=True)
class AteResult:
    mean: float
    std: float
    matched: int
    dropped: int


def associate(est: Trajectory, gt: Trajectory, max_dt: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (est, gt) matching each estimate to the nearest gt stamp within ``max_dt``."""
    if len(est) == 0 or len(gt) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    pos = np.searchsorted(gt.t_us, est.t_us)
    lo = np.clip(pos - 1, 0, len(gt) - 1)
    hi = np.clip(pos, 0, len(gt) - 1)
    d_lo = np.abs(est.t_us - gt.t_us[lo])
    d_hi = np.abs(gt.t_us[hi] - est.t_us)
    # ties resolve to the earlier ground-truth sample
    j = np.where(d_hi < d_lo, hi, lo)
    ok = np.abs(gt.t_us[j] - est.t_us) <= max_dt
    return np.nonzero(ok)[0], j[ok]


def ate(est: Trajectory, gt: Trajectory, max_dt: int = 100_000) -> AteResult:
    """Mean and population std of planar position errors, without alignment."""
    i, j = associate(est, gt, max_dt)
    if len(i) == 0:
        raise EvaluationError("no timestamp-matched pairs")
    err = np.hypot(*(est.poses[i, :2] - gt.poses[j, :2]).T)
    return AteResult(float(err.mean()), float(err.std()), len(i), len(est) - len(i))


def ate_errors(est: Trajectory, gt: Trajectory, max_dt: int = 100_000) -> np.ndarray:
    i, j = associate(est, gt, max_dt)
    return np.hypot(*(est.poses[i, :2] - gt.poses[j, :2]).T)


def _between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batch a^-1 * b for (N, 3) pose arrays."""
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    return np.stack([c * dx + s * dy, -s * dx + c * dy, b[:, 2] - a[:, 2]], axis=1)


def relative_errors(est: Trajectory, gt: Trajectory, segment_lengths=(50.0, 100.0, 150.0, 200.0),
                    max_dt: int = 100_000) -> tuple[float, float]:
    """Segment-averaged translational (%) and rotational (deg/km) drift.

    Every matched sample starts one segment per length L; the segment ends
    at the first sample whose ground-truth path length from the start
    reaches L. The error transform is ``(gt_i^-1 gt_j)^-1 (est_i^-1 est_j)``.
    """
    i, j = associate(est, gt, max_dt)
    if len(i) < 2:
        raise EvaluationError("too few matched samples")
    E, G = est.poses[i], gt.poses[j]
    step = np.hypot(*np.diff(G[:, :2], axis=0).T)
    dist = np.concatenate([[0.0], np.cumsum(step)])
    t_err, r_err = [], []
    for L in segment_lengths:
        end = np.searchsorted(dist, dist + L - 1e-9)
        ok = end < len(dist)
        if not ok.any():
            continue
        a, b = np.nonzero(ok)[0], end[ok]
        rg = _between(G[a], G[b])
        re = _between(E[a], E[b])
        d = _between(rg, re)
        t_err.append(np.hypot(d[:, 0], d[:, 1]) / L)
        r_err.append(np.abs(wrap_angles(d[:, 2])) / L)
    if not t_err:
        raise EvaluationError(f"trajectory shorter than the shortest segment ({min(segment_lengths)} m)")
    t_all = np.concatenate(t_err)
    r_all = np.concatenate(r_err)
    return float(100.0 * t_all.mean()), float(np.degrees(r_all.mean()) * 1000.0)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


class Scope(enum.Enum):
    ALL = "All"
    TURNED = "Turned"


@dataclass(frozen=True)
class IntersectionReference:
    positions: np.ndarray  # (K, 2)
    scope: Scope = Scope.ALL


def intersection_prf(est, ref, r_match: float = 50.0) -> PRF:
    """Nearest-reference matching; each reference is detected at most once."""
    ref_pos = ref.positions if isinstance(ref, IntersectionReference) else ref
    est = np.asarray(est, dtype=float).reshape(-1, 2)
    ref_pos = np.asarray(ref_pos, dtype=float).reshape(-1, 2)
    if len(est) == 0 or len(ref_pos) == 0:
        return PRF(0.0, 0.0, 0.0)
    d = np.hypot(est[:, None, 0] - ref_pos[None, :, 0], est[:, None, 1] - ref_pos[None, :, 1])
    nearest = d.argmin(axis=1)
    correct = d[np.arange(len(est)), nearest] < r_match
    detected = set(nearest[correct].tolist())
    p = float(correct.sum()) / len(est)
    r = len(detected) / len(ref_pos)
    return PRF(p, r, _f1(p, r))


@dataclass(frozen=True)
class GroundTruthObject:
    class_label: str
    box: Box


def object_prf(est, gt, r_match: float = 2.0, class_strict: bool = True) -> tuple[float, float, float]:
    """Greedy matching by descending IoU; returns (precision, recall, mean IoU over matches).

    ``est`` items need ``class_label`` and ``world_aabb`` (or ``box``); ``gt``
    items need ``class_label`` and ``box``.
    """
    est = list(est)
    gt = list(gt)
    if not est or not gt:
        return 0.0, 0.0, 0.0
    eb = [getattr(e, "world_aabb", None) or e.box for e in est]
    pairs = []
    for a, e in enumerate(est):
        for b, g in enumerate(gt):
            if class_strict and e.class_label != g.class_label:
                continue
            if float(np.linalg.norm(eb[a].center - g.box.center)) >= r_match:
                continue
            pairs.append((-eb[a].iou(g.box), a, b))
    pairs.sort()
    used_e, used_g, ious = set(), set(), []
    for neg_iou, a, b in pairs:
        if a in used_e or b in used_g:
            continue
        used_e.add(a)
        used_g.add(b)
        ious.append(-neg_iou)
    return len(ious) / len(est), len(ious) / len(gt), float(np.mean(ious)) if ious else 0.0


@dataclass(frozen=True)
class NamedSegment:
    name: str
    a: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class ReferenceConfig:
    d_merge: float = 20.0
    route_dist: float = 12.0
    r_assoc: float = 25.0
    theta_turn: float = math.radians(45.0)
    window: int = 3


def _junctions(segments: list[NamedSegment], tol: float = 1e-6) -> list[np.ndarray]:
    ends: list[tuple[np.ndarray, str]] = []
    for s in segments:
        ends.append((np.asarray(s.a, dtype=float), s.name))
        ends.append((np.asarray(s.b, dtype=float), s.name))
    points: list[tuple[np.ndarray, set]] = []
    for p, name in ends:
        for q, names in points:
            if np.hypot(*(p - q)) <= tol:
                names.add(name)
                break
        else:
            points.append((p, {name}))
    return [p for p, names in points if len(names) >= 2]


def _merge_close(points: list[np.ndarray], d_merge: float) -> list[np.ndarray]:
    """Single-link groups closer than ``d_merge`` collapse to their mean."""
    n = len(points)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if np.hypot(*(points[i] - points[j])) < d_merge:
                parent[find(j)] = find(i)
    groups: dict[int, list[np.ndarray]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(points[i])
    return [np.mean(g, axis=0) for g in groups.values()]


def reference_from_map(segments: list[NamedSegment], routes, scope: Scope = Scope.ALL,
                       cfg: ReferenceConfig = ReferenceConfig()) -> IntersectionReference:
    """Reference intersections along the travelled routes.

    A junction needs at least two distinct road names; junctions closer
    than ``d_merge`` merge; only those within ``route_dist`` of a route are
    kept. The Turned scope also needs a route heading change above
    ``theta_turn`` within ``r_assoc`` of the junction.
    """
    routes = [np.asarray(r, dtype=float)[:, :2] for r in routes]
    pts = _merge_close(_junctions(segments), cfg.d_merge)
    out = []
    for p in pts:
        near = [np.hypot(*(r - p).T) for r in routes if len(r)]
        if not near or min(float(n.min()) for n in near) >= cfg.route_dist:
            continue
        if scope is Scope.TURNED:
            turned = False
            for r, dn in zip([r for r in routes if len(r)], near):
                dis = np.nan_to_num(disfluency(r, cfg.window), nan=0.0)
                if np.any((dn <= cfg.r_assoc) & (dis > cfg.theta_turn)):
                    turned = True
                    break
            if not turned:
                continue
        out.append(p)
    out.sort(key=lambda q: (float(q[0]), float(q[1])))
    return IntersectionReference(np.array(out).reshape(-1, 2), scope)


def segments_from_world(world) -> list[NamedSegment]:
    return [NamedSegment(r.name, r.polyline[0], r.polyline[-1]) for r in world.roads]


def reference_config_for(sg_cfg: SceneGraphConfig) -> ReferenceConfig:
    return ReferenceConfig(r_assoc=sg_cfg.r_assoc, theta_turn=sg_cfg.theta_turn, window=sg_cfg.window)


def pose_array(poses) -> np.ndarray:
    return np.array([[p.x, p.y, p.theta] for p in poses], dtype=float).reshape(-1, 3)

