"""3D object observations, a noisy detection oracle and the depth filter.

The oracle replaces camera-based open-vocabulary detection and tracking:
it reads point memberships straight from the ray caster, then degrades
them with mask bleed, misses, label flips and tracker ID switches.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Box, Frame, PointCloud, Pose2
from .world import HIT_BUILDING, HIT_GROUND, STATIC_CLASSES, SensorConfig, World, raycast, _noise_seed


class ObjectKind(enum.IntEnum):
    STATIC = 0
    DYNAMIC = 1


@dataclass
class ObjectObservation:
    agent_id: int
    keyframe_id: int
    timestamp_us: int
    class_label: str
    kind: ObjectKind
    points: PointCloud
    instance_id: int | None = None

    def __post_init__(self):
        if self.kind == ObjectKind.DYNAMIC and self.instance_id is None:
            raise ValueError("dynamic observations need an instance id")

    @property
    def centroid(self) -> np.ndarray:
        return self.points.points.mean(axis=0)

    @property
    def aabb(self) -> Box:
        return Box.from_points(self.points.points)

    def with_points(self, pts: np.ndarray) -> "ObjectObservation":
        return replace(self, points=PointCloud(pts, self.points.frame))


@dataclass(frozen=True)
class DepthFilterConfig:
    delta_min: float = 1.0
    k_mad: float = 2.0


def median_depth_filter(obs: ObjectObservation, viewpoint=(0.0, 0.0, 0.0),
                        cfg: DepthFilterConfig = DepthFilterConfig()) -> ObjectObservation:
    """Drop points whose range is far in front of or behind the median range."""
    pts = obs.points.points
    if len(pts) == 0:
        return obs
    ranges = np.linalg.norm(pts - np.asarray(viewpoint, dtype=float), axis=1)
    med = np.median(ranges)
    mad = np.median(np.abs(ranges - med))
    band = max(cfg.delta_min, cfg.k_mad * mad)
    keep = np.abs(ranges - med) <= band
    return obs.with_points(pts[keep])


@dataclass(frozen=True)
class OracleNoise:
    rho_fp: float = 0.0  # per-point mask-bleed contamination rate
    p_miss: float = 0.0
    p_cls: float = 0.0
    p_sw: float = 0.0
    # contaminants are drawn at least this far (in range) from the object median
    bleed_min_offset: float = 0.0
    bleed_max_offset: float = 15.0


@dataclass
class DetectionOracle:
    """Per-agent detection oracle with persistent tracker state."""

    world: World
    noise: OracleNoise = field(default_factory=OracleNoise)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    seed: int = 0
    det_range: float = 50.0
    min_points: int = 3
    vocabulary: tuple[str, ...] = STATIC_CLASSES + ("car",)
    _ids: dict = field(default_factory=dict, repr=False)
    _next_id: dict = field(default_factory=dict, repr=False)

    def detect(self, agent_id: int, frame_id: int, pose: Pose2, scan: PointCloud, t: float,
               hits: np.ndarray | None = None) -> list[ObjectObservation]:
        """Observations for one scan taken at ``pose`` and time ``t`` seconds.

        ``hits`` are the per-point hit ids returned by the ray caster; they
        are recomputed (noise-free) when omitted.
        """
        if hits is None:
            _, hits = raycast(pose, self.world, t, self.sensor, noise=0.0)
        if len(hits) != len(scan):
            raise ValueError("hit ids do not match the scan")
        rng = np.random.default_rng(_noise_seed(self.seed + 7919, agent_id, t))
        n_static = len(self.world.static_objects)
        pts = scan.points
        ranges = np.linalg.norm(pts, axis=1)
        az = np.arctan2(pts[:, 1], pts[:, 0])
        background = (hits == HIT_GROUND) | (hits == HIT_BUILDING)
        out = []
        t_us = int(round(t * 1e6))
        for target in np.unique(hits[hits >= 0]):
            members = np.nonzero(hits == target)[0]
            if len(members) < self.min_points:
                continue
            if np.median(ranges[members]) > self.det_range:
                continue
            # draws happen in a fixed order so results stay reproducible
            miss = rng.random() < self.noise.p_miss
            flip = rng.random() < self.noise.p_cls
            switch = rng.random() < self.noise.p_sw
            n_bleed = rng.binomial(len(members), self.noise.rho_fp) if self.noise.rho_fp > 0 else 0
            if miss:
                continue
            if target < n_static:
                label = self.world.static_objects[target].label
                kind = ObjectKind.STATIC
            else:
                label = self.world.dynamic_actors[target - n_static].label
                kind = ObjectKind.DYNAMIC
            if flip:
                others = [c for c in self.vocabulary if c != label]
                label = others[int(rng.integers(len(others)))]
            obj_pts = pts[members]
            if n_bleed:
                obj_pts = np.vstack([obj_pts, self._bleed(rng, pts, ranges, az, members, background, n_bleed)])
            instance = None
            if kind == ObjectKind.DYNAMIC:
                instance = self._instance(agent_id, int(target), switch)
            out.append(ObjectObservation(agent_id, frame_id, t_us, label, kind,
                                         PointCloud(obj_pts, Frame.KEYFRAME), instance))
        return out

    def _instance(self, agent_id: int, target: int, switch: bool) -> int:
        key = (agent_id, target)
        if key not in self._ids or switch:
            nxt = self._next_id.get(agent_id, 0)
            self._next_id[agent_id] = nxt + 1
            self._ids[key] = nxt
        return self._ids[key]

    def _bleed(self, rng, pts, ranges, az, members, background, n) -> np.ndarray:
        med = np.median(ranges[members])
        lo_az, hi_az = az[members].min(), az[members].max()
        if hi_az - lo_az > np.pi:  # object straddles the +-pi seam
            window = (az >= hi_az - 0.05) | (az <= lo_az + 0.05)
        else:
            window = (az >= lo_az - 0.05) & (az <= hi_az + 0.05)
        pool = np.nonzero(background & window & (np.abs(ranges - med) >= self.noise.bleed_min_offset))[0]
        if len(pool) >= n:
            return pts[rng.choice(pool, size=n, replace=False)]
        # not enough background behind the mask: push object returns outwards
        src = pts[rng.choice(members, size=n, replace=True)]
        offset = rng.uniform(self.noise.bleed_min_offset, self.noise.bleed_max_offset, size=n)
        offset = np.maximum(offset, 1e-3)
        dirs = src / np.linalg.norm(src, axis=1, keepdims=True)
        return src + dirs * offset[:, None]
