"""Planar rigid-body math and 3D point-cloud containers.

Poses live in SE(2); clouds stay 3D and only their x/y components are
rotated and translated. Tangent vectors are ordered ``(dx, dy, dtheta)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class ParameterError(ValueError):
    """Raised when an operation receives an invalid numeric parameter."""


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    t = math.fmod(theta + math.pi, 2.0 * math.pi)
    if t <= 0.0:
        t += 2.0 * math.pi
    return t - math.pi


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    t = np.fmod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi)
    t = np.where(t <= 0.0, t + 2.0 * np.pi, t)
    return t - np.pi


@dataclass(frozen=True)
class Tangent2:
    dx: float
    dy: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta])


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> "Pose2":
        return cls(a[0], a[1], a[2])

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose2":
        return cls(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def as_matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return compose(self, other)

    def inverse(self) -> "Pose2":
        return inverse(self)

    def transform_xy(self, xy: np.ndarray) -> np.ndarray:
        """Apply the pose to an (N, 2) array of planar points."""
        xy = np.asarray(xy, dtype=float)
        return xy @ self.rotation().T + np.array([self.x, self.y])

    def distance_to(self, other: "Pose2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def compose(a: Pose2, b: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.theta + b.theta)


def inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-c * p.x - s * p.y, s * p.x - c * p.y, -p.theta)


def between(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose ``a^-1 * b``."""
    return compose(inverse(a), b)


def _v_coeffs(theta: float) -> tuple[float, float]:
    # sin(t)/t and (1 - cos(t))/t with series near zero
    if abs(theta) < 1e-6:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, theta / 2.0 - theta * t2 / 24.0
    return math.sin(theta) / theta, (1.0 - math.cos(theta)) / theta


def exp(t: Tangent2 | np.ndarray) -> Pose2:
    """Exponential map se(2) -> SE(2)."""
    if isinstance(t, Tangent2):
        t = t.as_array()
    rx, ry, th = float(t[0]), float(t[1]), float(t[2])
    a, b = _v_coeffs(th)
    return Pose2(a * rx - b * ry, b * rx + a * ry, th)


def log(p: Pose2) -> Tangent2:
    """Logarithm map SE(2) -> se(2)."""
    th = p.theta
    a, b = _v_coeffs(th)
    det = a * a + b * b
    # inverse of [[a, -b], [b, a]]
    rx = (a * p.x + b * p.y) / det
    ry = (-b * p.x + a * p.y) / det
    return Tangent2(rx, ry, th)


# --- vectorized helpers used by the optimizer -------------------------------

def log_batch(x: np.ndarray, y: np.ndarray, th: np.ndarray) -> np.ndarray:
    """Row-wise SE(2) log for arrays of poses; returns (N, 3)."""
    small = np.abs(th) < 1e-6
    safe = np.where(small, 1.0, th)
    t2 = th * th
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, th / 2.0 - th * t2 / 24.0, (1.0 - np.cos(safe)) / safe)
    det = a * a + b * b
    return np.stack([(a * x + b * y) / det, (-b * x + a * y) / det, th], axis=1)


def right_jacobian_inv_batch(r: np.ndarray) -> np.ndarray:
    """Inverse right Jacobians of SE(2) at tangents ``r`` (N, 3) -> (N, 3, 3)."""
    rho1, rho2, th = r[:, 0], r[:, 1], r[:, 2]
    small = np.abs(th) < 1e-6
    safe = np.where(small, 1.0, th)
    s, c = np.sin(safe), np.cos(safe)
    t2 = th * th
    a = np.where(small, 1.0 - t2 / 6.0, s / safe)
    b = np.where(small, th / 2.0 - th * t2 / 24.0, (1.0 - c) / safe)
    v0 = np.where(
        small, -rho2 / 2.0 + th * rho1 / 6.0,
        (safe * rho1 - rho2 + rho2 * c - rho1 * s) / (safe * safe))
    v1 = np.where(
        small, rho1 / 2.0 + th * rho2 / 6.0,
        (rho1 + safe * rho2 - rho1 * c - rho2 * s) / (safe * safe))
    # Jr = [[A, v], [0, 1]] with A = [[a, b], [-b, a]], inverted blockwise
    det = a * a + b * b
    ia, ib = a / det, b / det
    out = np.zeros((len(r), 3, 3))
    out[:, 0, 0] = ia
    out[:, 0, 1] = -ib
    out[:, 1, 0] = ib
    out[:, 1, 1] = ia
    out[:, 0, 2] = -(ia * v0 - ib * v1)
    out[:, 1, 2] = -(ib * v0 + ia * v1)
    out[:, 2, 2] = 1.0
    return out


# --- point clouds -----------------------------------------------------------

class Frame(enum.Enum):
    SENSOR = "sensor"
    KEYFRAME = "keyframe"
    WORLD = "world"


@dataclass
class PointCloud:
    """An (N, 3) array of points tagged with the frame it is expressed in.

    ``labels`` optionally carries one class string per point (map layer).
    """

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    frame: Frame = Frame.SENSOR
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ParameterError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ParameterError("point coordinates must be finite")
        self.points = pts
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=object)
            if len(self.labels) != len(pts):
                raise ParameterError("labels length does not match points")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask_or_idx) -> "PointCloud":
        labels = None if self.labels is None else self.labels[mask_or_idx]
        return PointCloud(self.points[mask_or_idx], self.frame, labels)

    @classmethod
    def concatenate(cls, clouds: list["PointCloud"], frame: Frame | None = None) -> "PointCloud":
        if not clouds:
            return cls(np.zeros((0, 3)), frame or Frame.WORLD)
        pts = np.concatenate([c.points for c in clouds], axis=0)
        labels = None
        if any(c.labels is not None for c in clouds):
            labels = np.concatenate([
                c.labels if c.labels is not None else np.full(len(c), "unlabeled", dtype=object)
                for c in clouds
            ])
        return cls(pts, frame or clouds[0].frame, labels)


def transform_cloud(pose: Pose2, cloud: PointCloud, frame: Frame = Frame.WORLD) -> PointCloud:
    """Rotate/translate x,y by ``pose``; z is untouched. ``frame`` is the new tag."""
    pts = cloud.points.copy()
    if len(pts):
        pts[:, :2] = pose.transform_xy(pts[:, :2])
    return PointCloud(pts, frame, None if cloud.labels is None else cloud.labels.copy())


def _voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(points / voxel).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    Output order follows the lexicographic order of voxel indices, so the
    result does not depend on input point order. Labels, if present, take
    the most frequent label in the voxel (ties broken alphabetically).
    """
    if not voxel > 0:
        raise ParameterError(f"voxel size must be positive, got {voxel}")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)), cloud.frame, None if cloud.labels is None else cloud.labels[:0])
    keys = _voxel_keys(cloud.points, voxel)
    # row-major linear index keeps the lexicographic order of the 3D keys
    k = keys - keys.min(axis=0)
    dims = k.max(axis=0) + 1
    lin = (k[:, 0] * dims[1] + k[:, 1]) * dims[2] + k[:, 2]
    uniq, inverse_idx, counts = np.unique(lin, return_inverse=True, return_counts=True)
    inverse_idx = inverse_idx.ravel()
    sums = np.stack([np.bincount(inverse_idx, cloud.points[:, c], len(uniq)) for c in range(3)], axis=1)
    centroids = sums / counts[:, None]
    # centroids of a voxel always lie inside it, which keeps the op idempotent
    labels = None
    if cloud.labels is not None:
        # codes follow sorted label order, so argmax picks the alphabetically first mode
        names, codes = np.unique(cloud.labels.astype(str), return_inverse=True)
        votes = np.bincount(inverse_idx * len(names) + codes.ravel(),
                            minlength=len(uniq) * len(names)).reshape(len(uniq), len(names))
        labels = names.astype(object)[np.argmax(votes, axis=1)]
    return PointCloud(centroids, cloud.frame, labels)


def remove_outliers(cloud: PointCloud, radius: float, min_neighbors: int) -> PointCloud:
    """Keep points that have at least ``min_neighbors`` other points within ``radius``."""
    if not radius > 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    if len(cloud) == 0 or min_neighbors <= 0:
        return cloud.subset(slice(None))
    if len(cloud) <= min_neighbors:
        return cloud.subset(np.zeros(len(cloud), dtype=bool))
    tree = cKDTree(cloud.points)
    # the k-th neighbour (k=0 is the point itself) decides membership
    dist, _ = tree.query(cloud.points, k=[min_neighbors + 1], distance_upper_bound=radius)
    return cloud.subset(np.isfinite(dist[:, 0]))


@dataclass(frozen=True)
class Box:
    """Axis-aligned 3D box given by its min and max corners."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    @classmethod
    def from_points(cls, pts: np.ndarray) -> "Box":
        pts = np.asarray(pts, dtype=float)
        if len(pts) == 0:
            raise ParameterError("cannot bound an empty point set")
        return cls(tuple(pts.min(axis=0).tolist()), tuple(pts.max(axis=0).tolist()))

    @classmethod
    def from_center_size(cls, center, size) -> "Box":
        c = np.asarray(center, dtype=float)
        h = np.asarray(size, dtype=float) / 2.0
        return cls(tuple((c - h).tolist()), tuple((c + h).tolist()))

    @property
    def center(self) -> np.ndarray:
        return (np.array(self.lo) + np.array(self.hi)) / 2.0

    @property
    def size(self) -> np.ndarray:
        return np.array(self.hi) - np.array(self.lo)

    def volume(self) -> float:
        v = 1.0
        for a, b in zip(self.lo, self.hi):
            v *= max(b - a, 0.0)
        return v

    def inflated(self, margin: float) -> "Box":
        return Box(tuple(a - margin for a in self.lo), tuple(b + margin for b in self.hi))

    def with_min_extent(self, extent: float) -> "Box":
        """Grow thin dimensions symmetrically up to ``extent``."""
        grow = [max(extent - (b - a), 0.0) / 2.0 for a, b in zip(self.lo, self.hi)]
        return Box(tuple(a - g for a, g in zip(self.lo, grow)), tuple(b + g for b, g in zip(self.hi, grow)))

    def intersection_volume(self, other: "Box") -> float:
        v = 1.0
        for a0, a1, b0, b1 in zip(self.lo, self.hi, other.lo, other.hi):
            v *= max(min(a1, b1) - max(a0, b0), 0.0)
        return v

    def iou(self, other: "Box") -> float:
        inter = self.intersection_volume(other)
        union = self.volume() + other.volume() - inter
        return inter / union if union > 0 else 0.0

    def overlap_ratio(self, other: "Box") -> float:
        """Intersection volume normalized by the smaller box volume."""
        denom = min(self.volume(), other.volume())
        return self.intersection_volume(other) / denom if denom > 0 else 0.0

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.all((pts >= np.array(self.lo)) & (pts <= np.array(self.hi)), axis=1)

    def union(self, other: "Box") -> "Box":
        return Box(tuple(np.minimum(self.lo, other.lo).tolist()),
                   tuple(np.maximum(self.hi, other.hi).tolist()))
