"""Agent-side pipeline: preprocessing, scan-matching odometry and keyframes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Frame, PointCloud, Pose2, compose, exp, remove_outliers, voxel_downsample
from .perception import DepthFilterConfig, ObjectKind, ObjectObservation, median_depth_filter
from .registration import IcpConfig, scan_match
from .scancontext import ScanContextConfig, ScanDescriptor, encode


@dataclass(frozen=True)
class FrontendConfig:
    outlier_radius: float = 1.0
    outlier_min_neighbors: int = 2
    # points below this sensor-frame height are treated as ground and cropped
    ground_z: float | None = -1.5
    voxel: float = 0.5
    kf_dist: float = 2.0
    kf_angle: float = math.radians(20.0)
    m_dyn: float = 0.2
    min_inlier_fraction: float = 0.3
    # consecutive scans sample the scene differently, so yaw restarts buy nothing here
    icp: IcpConfig = field(default_factory=lambda: IcpConfig(coarse_factor=3.0, coarse_iters=5, z_weight=0.1,
                                                             yaw_restarts=()))
    scan_context: ScanContextConfig = field(default_factory=lambda: ScanContextConfig(height_offset=1.8))
    depth_filter: DepthFilterConfig = field(default_factory=DepthFilterConfig)
    # extra zero-mean noise on every odometry increment (x, y, theta sigmas)
    odom_noise: tuple[float, float, float] = (0.0, 0.0, 0.0)
    odom_noise_seed: int = 0


@dataclass
class Keyframe:
    agent_id: int
    keyframe_id: int
    timestamp_us: int
    odom_pose: Pose2
    cloud: PointCloud
    cloud_raw: PointCloud
    descriptor: ScanDescriptor
    observations: list[ObjectObservation] = field(default_factory=list)


@dataclass
class OdometryState:
    pose: Pose2 | None = None
    increment: Pose2 = field(default_factory=Pose2.identity)
    prev_cloud: PointCloud | None = None
    last_t_us: int | None = None
    degraded: bool = False
    n_degraded: int = 0


@dataclass
class KeyframeState:
    last_pose: Pose2 | None = None
    next_id: int = 0


def preprocess(scan: PointCloud, cfg: FrontendConfig) -> PointCloud:
    cloud = scan
    if cfg.ground_z is not None and len(cloud):
        cloud = cloud.subset(cloud.points[:, 2] > cfg.ground_z)
    if cfg.outlier_min_neighbors > 0:
        cloud = remove_outliers(cloud, cfg.outlier_radius, cfg.outlier_min_neighbors)
    return voxel_downsample(cloud, cfg.voxel)


def step_odometry(state: OdometryState, scan: PointCloud, t_us: int, cfg: FrontendConfig = FrontendConfig(),
                  rng: np.random.Generator | None = None) -> tuple[OdometryState, Pose2]:
    """Advance odometry with a preprocessed scan; returns the new state and pose.

    The previous increment seeds registration (constant velocity). When
    registration is rejected the agent coasts on that increment and the
    state is flagged as degraded.
    """
    if state.last_t_us is not None and t_us <= state.last_t_us:
        raise ValueError("scans must arrive in time order")
    if state.pose is None or state.prev_cloud is None or len(state.prev_cloud) == 0 or len(scan) == 0:
        pose = state.pose or Pose2.identity()
        inc = state.increment if state.pose is not None else Pose2.identity()
        if state.pose is not None:
            pose = compose(pose, inc)
        return OdometryState(pose, inc, scan, t_us, state.pose is not None, state.n_degraded), pose
    res = scan_match(scan, state.prev_cloud, state.increment, cfg.icp)
    degraded = not math.isfinite(res.fitness) or res.inlier_fraction < cfg.min_inlier_fraction
    inc = state.increment if degraded else res.transform
    if any(cfg.odom_noise) and rng is not None:
        inc = compose(inc, exp(rng.normal(0.0, 1.0, size=3) * np.asarray(cfg.odom_noise)))
    pose = compose(state.pose, inc)
    return OdometryState(pose, inc, scan, t_us, degraded, state.n_degraded + int(degraded)), pose


def remove_dynamic_points(cloud: PointCloud, dynamic_obs: list[ObjectObservation], margin: float = 0.2) -> PointCloud:
    """Drop points inside any dynamic observation box grown by ``margin``."""
    keep = np.ones(len(cloud), dtype=bool)
    for obs in dynamic_obs:
        if obs.kind != ObjectKind.DYNAMIC or len(obs.points) == 0:
            continue
        keep &= ~obs.aabb.inflated(margin).contains(cloud.points)
    return cloud.subset(keep)


def should_emit(state: KeyframeState, pose: Pose2, cfg: FrontendConfig) -> bool:
    if state.last_pose is None:
        return True
    moved = math.hypot(pose.x - state.last_pose.x, pose.y - state.last_pose.y)
    turned = abs(math.atan2(math.sin(pose.theta - state.last_pose.theta),
                            math.cos(pose.theta - state.last_pose.theta)))
    return moved >= cfg.kf_dist or turned >= cfg.kf_angle


def maybe_emit_keyframe(state: KeyframeState, agent_id: int, t_us: int, pose: Pose2, scan: PointCloud,
                        detections: list[ObjectObservation], cfg: FrontendConfig = FrontendConfig()
                        ) -> Keyframe | None:
    """Emit a keyframe when the agent moved or turned enough since the last one.

    ``scan`` is the preprocessed (downsampled) cloud; detections are raw
    oracle/recorded observations in the same sensor frame.
    """
    if not should_emit(state, pose, cfg):
        return None
    kf_id = state.next_id
    state.next_id += 1
    state.last_pose = pose
    dynamic = [d for d in detections if d.kind == ObjectKind.DYNAMIC]
    raw = PointCloud(scan.points, Frame.KEYFRAME)
    clean = remove_dynamic_points(raw, dynamic, cfg.m_dyn)
    observations = []
    for d in detections:
        if d.kind == ObjectKind.STATIC:
            d = median_depth_filter(d, (0.0, 0.0, 0.0), cfg.depth_filter)
        if len(d.points) == 0:
            continue
        observations.append(replace(d, agent_id=agent_id, keyframe_id=kf_id, timestamp_us=t_us))
    return Keyframe(agent_id, kf_id, t_us, pose, clean, raw, encode(clean, cfg.scan_context), observations)


class Frontend:
    """One agent's odometry and keyframe generator."""

    def __init__(self, agent_id: int, cfg: FrontendConfig = FrontendConfig()):
        self.agent_id = agent_id
        self.cfg = cfg
        self.odom = OdometryState()
        self.kf_state = KeyframeState()
        self.rng = np.random.default_rng([cfg.odom_noise_seed, agent_id])

    def process(self, scan: PointCloud, t_us: int, detections: list[ObjectObservation] = ()) -> Keyframe | None:
        cloud = preprocess(scan, self.cfg)
        self.odom, pose = step_odometry(self.odom, cloud, t_us, self.cfg, self.rng)
        return maybe_emit_keyframe(self.kf_state, self.agent_id, t_us, pose, cloud, list(detections), self.cfg)
