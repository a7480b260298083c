"""Point-to-point ICP with 3D correspondences and planar (SE(2)) alignment."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, Pose2, compose

REJECTED_FITNESS = math.inf


class RegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class IcpConfig:
    max_corr_dist: float = 2.0
    tol: float = 1e-6
    max_iters: int = 50
    # Correspondence radius starts at coarse_factor * max_corr_dist and
    # shrinks geometrically to max_corr_dist over the first iterations.
    coarse_factor: float = 1.0
    coarse_iters: int = 0
    # z is multiplied by this before nearest-neighbour search; values < 1
    # stop LiDAR rings from locking correspondences to equal heights.
    z_weight: float = 1.0
    # Yaw offsets (radians) tried around the converged estimate; a restart
    # is kept only if it lowers the fitness. Scans sampled on a fixed
    # azimuth grid have spurious minima about half a grid step from the
    # true rotation, which these restarts escape.
    yaw_restarts: tuple[float, ...] = (-math.radians(0.5), math.radians(0.5))


@dataclass(frozen=True)
class IcpResult:
    transform: Pose2
    fitness: float
    inlier_fraction: float
    iterations: int
    converged: bool


def align_2d(src: np.ndarray, dst: np.ndarray) -> Pose2:
    """Closed-form least-squares rigid alignment of planar point pairs."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    s = src - mu_s
    d = dst - mu_d
    num = np.sum(s[:, 0] * d[:, 1] - s[:, 1] * d[:, 0])
    den = np.sum(s[:, 0] * d[:, 0] + s[:, 1] * d[:, 1])
    theta = math.atan2(num, den)
    c, sn = math.cos(theta), math.sin(theta)
    tx = mu_d[0] - (c * mu_s[0] - sn * mu_s[1])
    ty = mu_d[1] - (sn * mu_s[0] + c * mu_s[1])
    return Pose2(tx, ty, theta)


def _apply(pose: Pose2, pts: np.ndarray) -> np.ndarray:
    out = pts.copy()
    out[:, :2] = pose.transform_xy(pts[:, :2])
    return out


def scan_match(source: PointCloud, target: PointCloud, init: Pose2 | None = None,
               cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Estimate the pose that maps ``source`` points into the ``target`` frame.

    Correspondences are 3D nearest neighbours (z participates in the
    distance); the alignment step only solves for x, y and yaw.
    ``fitness`` is the mean squared 3D distance (z scaled by
    ``cfg.z_weight``) over correspondences within ``cfg.max_corr_dist``.
    A result with no correspondences carries an infinite fitness and
    ``converged=False``.
    """
    if len(source) == 0 or len(target) == 0:
        raise RegistrationError("scan_match needs two non-empty clouds")
    scale = np.array([1.0, 1.0, cfg.z_weight])
    src = source.points * scale
    tgt = target.points * scale
    tree = cKDTree(tgt)
    best = _icp(src, tgt, tree, init or Pose2.identity(), cfg)
    if best.converged or math.isfinite(best.fitness):
        center = best.transform
        for off in cfg.yaw_restarts:
            res = _icp(src, tgt, tree, compose(center, Pose2(0.0, 0.0, off)), cfg)
            if res.fitness < best.fitness:
                best = res
    return best


def _icp(src: np.ndarray, tgt: np.ndarray, tree: cKDTree, pose: Pose2, cfg: IcpConfig) -> IcpResult:
    converged = False
    iters = 0
    for it in range(cfg.max_iters):
        iters = it + 1
        if it < cfg.coarse_iters and cfg.coarse_factor > 1.0:
            frac = it / max(cfg.coarse_iters, 1)
            radius = cfg.max_corr_dist * cfg.coarse_factor ** (1.0 - frac)
        else:
            radius = cfg.max_corr_dist
        moved = _apply(pose, src)
        dist, idx = tree.query(moved, k=1, distance_upper_bound=radius)
        ok = np.isfinite(dist)
        if ok.sum() < 3:
            return IcpResult(pose, REJECTED_FITNESS, float(ok.mean()), iters, False)
        delta = align_2d(moved[ok, :2], tgt[idx[ok], :2])
        pose = compose(delta, pose)
        change = max(math.hypot(delta.x, delta.y), abs(delta.theta))
        if change < cfg.tol and it >= cfg.coarse_iters:
            converged = True
            break
    moved = _apply(pose, src)
    dist, _ = tree.query(moved, k=1, distance_upper_bound=cfg.max_corr_dist)
    ok = np.isfinite(dist)
    if not ok.any():
        return IcpResult(pose, REJECTED_FITNESS, 0.0, iters, False)
    fitness = float(np.mean(dist[ok] ** 2))
    return IcpResult(pose, fitness, float(ok.mean()), iters, converged)
