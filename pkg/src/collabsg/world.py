"""Deterministic synthetic town and a ray-casting LiDAR model.

The town is a perturbed grid of intersections joined by straight named
roads. Blocks are filled with box-shaped buildings, streets are lined
with trees, intersections get street furniture, and cars either drive back and forth along a route or
stay parked at the curb.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, Frame, ParameterError, PointCloud, Pose2

STATIC_CLASSES = ("traffic light", "traffic sign", "pole")
STATIC_SIZES = {
    "traffic light": (0.6, 0.6, 5.0),
    "traffic sign": (0.4, 0.9, 2.8),
    "pole": (0.5, 0.5, 6.0),
}
CAR_SIZE = (4.5, 1.9, 1.6)

HIT_NONE = -1
HIT_GROUND = -2
HIT_BUILDING = -3


@dataclass(frozen=True)
class Road:
    a: int
    b: int
    name: str
    polyline: np.ndarray  # (K, 2)
    lane_width: float


@dataclass(frozen=True)
class StaticObject:
    label: str
    box: Box


@dataclass(frozen=True)
class Building:
    polygon: np.ndarray  # (K, 2), counter-clockwise
    height: float


@dataclass(frozen=True)
class Actor:
    label: str
    route: np.ndarray  # (K, 2) polyline, a single row for parked cars
    speed: float
    size: tuple[float, float, float]
    phase: float = 0.0  # arc-length offset at t = 0

    def state(self, t: float) -> tuple[np.ndarray, float]:
        """Planar position and heading at time ``t`` (seconds).

        Moving actors ping-pong along their route.
        """
        if len(self.route) == 1 or self.speed == 0.0:
            if len(self.route) > 1:
                d = self.route[1] - self.route[0]
                return self.route[0].copy(), math.atan2(d[1], d[0])
            return self.route[0].copy(), 0.0
        seg = np.diff(self.route, axis=0)
        lens = np.hypot(seg[:, 0], seg[:, 1])
        total = float(lens.sum())
        s = (self.phase + self.speed * t) % (2.0 * total)
        backwards = s > total
        if backwards:
            s = 2.0 * total - s
        cum = np.concatenate([[0.0], np.cumsum(lens)])
        i = int(min(np.searchsorted(cum, s, side="right") - 1, len(lens) - 1))
        f = (s - cum[i]) / lens[i] if lens[i] > 0 else 0.0
        pos = self.route[i] + f * seg[i]
        heading = math.atan2(seg[i, 1], seg[i, 0]) + (math.pi if backwards else 0.0)
        return pos, heading

    def box_at(self, t: float) -> Box:
        pos, heading = self.state(t)
        l, w, h = self.size
        if abs(math.cos(heading)) < abs(math.sin(heading)):
            l, w = w, l
        return Box((pos[0] - l / 2, pos[1] - w / 2, 0.0), (pos[0] + l / 2, pos[1] + w / 2, h))


@dataclass(frozen=True)
class WorldParams:
    nx: int = 4
    ny: int = 4
    spacing: float = 80.0
    jitter: float = 6.0
    lane_width: float = 3.5
    road_half_width: float = 7.0
    setback: float = 4.0
    building_prob: float = 0.8
    objects_per_intersection: int = 3
    mid_block_poles: int = 1
    trees_per_road: int = 6
    n_moving: int = 8
    n_parked: int = 10
    cluster_eps: float = 15.0
    ground: bool = True


@dataclass
class World:
    intersections: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    roads: list[Road] = field(default_factory=list)
    static_objects: list[StaticObject] = field(default_factory=list)
    buildings: list[Building] = field(default_factory=list)
    dynamic_actors: list[Actor] = field(default_factory=list)
    ground: bool = True
    grid_shape: tuple[int, int] = (0, 0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, World):
            return NotImplemented
        return _deep_equal(self.__dict__, other.__dict__)

    def grid_index(self, i: int, j: int) -> int:
        return j * self.grid_shape[0] + i

    def road_between(self, a: int, b: int) -> Road | None:
        for r in self.roads:
            if {r.a, r.b} == {a, b}:
                return r
        return None


def _deep_equal(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(np.asarray(a), np.asarray(b))
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_deep_equal(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_deep_equal(x, y) for x, y in zip(a, b))
    if hasattr(a, "__dataclass_fields__"):
        return type(a) is type(b) and _deep_equal(a.__dict__, b.__dict__)
    return a == b


_STREET_NAMES = ("Banbury", "Cowley", "Iffley", "Woodstock", "Botley", "Headington",
                 "Marston", "Abingdon", "Kidlington", "Summertown")


def generate_world(seed: int, params: WorldParams = WorldParams()) -> World:
    """Build a town fully determined by ``seed`` and ``params``."""
    if params.nx < 2 or params.ny < 2:
        raise ParameterError("grid must be at least 2x2")
    if not params.spacing > 0:
        raise ParameterError("spacing must be positive")
    if params.spacing - 2 * params.jitter * math.sqrt(2) <= 2 * params.cluster_eps:
        raise ParameterError("spacing too small for the requested jitter and cluster_eps")
    rng = np.random.default_rng(seed)
    nx, ny = params.nx, params.ny

    grid = np.zeros((ny, nx, 2))
    for j in range(ny):
        for i in range(nx):
            grid[j, i] = (i * params.spacing, j * params.spacing)
    grid += rng.uniform(-params.jitter, params.jitter, size=grid.shape)
    inters = grid.reshape(-1, 2)

    def idx(i, j):
        return j * nx + i

    roads = []
    for j in range(ny):
        for i in range(nx - 1):
            a, b = idx(i, j), idx(i + 1, j)
            roads.append(Road(a, b, f"{_STREET_NAMES[j % len(_STREET_NAMES)]} Road",
                              np.stack([inters[a], inters[b]]), params.lane_width))
    for i in range(nx):
        for j in range(ny - 1):
            a, b = idx(i, j), idx(i, j + 1)
            roads.append(Road(a, b, f"{_STREET_NAMES[(i + 5) % len(_STREET_NAMES)]} Street",
                              np.stack([inters[a], inters[b]]), params.lane_width))

    buildings = []
    gap = params.road_half_width + params.setback
    for j in range(ny - 1):
        for i in range(nx - 1):
            x0 = max(grid[j, i, 0], grid[j + 1, i, 0]) + gap
            x1 = min(grid[j, i + 1, 0], grid[j + 1, i + 1, 0]) - gap
            y0 = max(grid[j, i, 1], grid[j, i + 1, 1]) + gap
            y1 = min(grid[j + 1, i, 1], grid[j + 1, i + 1, 1]) - gap
            buildings.extend(_fill_block(rng, x0, x1, y0, y1, params.building_prob))
    # a ring of buildings around the outside keeps border scans structured
    for j in range(ny):
        for side, i in (("w", 0), ("e", nx - 1)):
            if j < ny - 1:
                y0, y1 = grid[j, i, 1] + gap, grid[j + 1, i, 1] - gap
                x = grid[j, i, 0]
                if side == "w":
                    buildings.extend(_fill_block(rng, x - gap - 25.0, x - gap, y0, y1, params.building_prob))
                else:
                    buildings.extend(_fill_block(rng, x + gap, x + gap + 25.0, y0, y1, params.building_prob))
    for i in range(nx - 1):
        for side, j in (("s", 0), ("n", ny - 1)):
            x0, x1 = grid[j, i, 0] + gap, grid[j, i + 1, 0] - gap
            y = grid[j, i, 1]
            if side == "s":
                buildings.extend(_fill_block(rng, x0, x1, y - gap - 25.0, y - gap, params.building_prob))
            else:
                buildings.extend(_fill_block(rng, x0, x1, y + gap, y + gap + 25.0, params.building_prob))

    statics = []
    corner = params.road_half_width + 1.0
    for k, p in enumerate(inters):
        n = int(rng.integers(0, params.objects_per_intersection + 1))
        corners = rng.permutation(4)[:n]
        for c in corners:
            sx = 1.0 if c in (0, 3) else -1.0
            sy = 1.0 if c in (0, 1) else -1.0
            label = STATIC_CLASSES[int(rng.integers(len(STATIC_CLASSES)))]
            off = rng.uniform(0.0, 2.5, size=2)
            centre = p + np.array([sx * (corner + off[0]), sy * (corner + off[1])])
            size = STATIC_SIZES[label]
            statics.append(StaticObject(label, Box((centre[0] - size[0] / 2, centre[1] - size[1] / 2, 0.0),
                                                   (centre[0] + size[0] / 2, centre[1] + size[1] / 2, size[2]))))
    for r in roads:
        for _ in range(params.mid_block_poles):
            f = rng.uniform(0.3, 0.7)
            p = r.polyline[0] + f * (r.polyline[1] - r.polyline[0])
            d = r.polyline[1] - r.polyline[0]
            nrm = np.array([-d[1], d[0]]) / np.hypot(*d)
            centre = p + nrm * corner * (1 if rng.random() < 0.5 else -1)
            label = "pole" if rng.random() < 0.6 else "traffic sign"
            size = STATIC_SIZES[label]
            statics.append(StaticObject(label, Box((centre[0] - size[0] / 2, centre[1] - size[1] / 2, 0.0),
                                                   (centre[0] + size[0] / 2, centre[1] + size[1] / 2, size[2]))))

    # roadside trees are unlabeled clutter; they break up repetitive streets
    tree_rng = np.random.default_rng([seed, 1])
    for r in roads:
        d = r.polyline[1] - r.polyline[0]
        length = float(np.hypot(*d))
        nrm = np.array([-d[1], d[0]]) / length
        for _ in range(params.trees_per_road):
            f = tree_rng.uniform(0.2, 0.8)
            side = 1.0 if tree_rng.random() < 0.5 else -1.0
            c = r.polyline[0] + f * d + nrm * side * (params.road_half_width + tree_rng.uniform(1.5, 3.0))
            h = tree_rng.uniform(0.4, 0.8)
            poly = np.array([[c[0] - h, c[1] - h], [c[0] + h, c[1] - h], [c[0] + h, c[1] + h], [c[0] - h, c[1] + h]])
            buildings.append(Building(poly, float(tree_rng.uniform(3.0, 8.0))))

    actors = []
    adjacency = {k: [] for k in range(len(inters))}
    for r in roads:
        adjacency[r.a].append(r.b)
        adjacency[r.b].append(r.a)
    for _ in range(params.n_moving):
        node = int(rng.integers(len(inters)))
        path = [node]
        for _ in range(int(rng.integers(2, 5))):
            options = [n for n in adjacency[path[-1]] if len(path) < 2 or n != path[-2]]
            path.append(int(options[int(rng.integers(len(options)))]))
        pts = inters[path]
        route = _offset_polyline(pts, params.lane_width / 2 + 0.5)
        speed = float(rng.uniform(3.0, 9.0))
        actors.append(Actor("car", route, speed, CAR_SIZE, float(rng.uniform(0.0, 100.0))))
    for _ in range(params.n_parked):
        r = roads[int(rng.integers(len(roads)))]
        f = rng.uniform(0.25, 0.75)
        p = r.polyline[0] + f * (r.polyline[1] - r.polyline[0])
        d = r.polyline[1] - r.polyline[0]
        nrm = np.array([-d[1], d[0]]) / np.hypot(*d)
        pos = p + nrm * (params.road_half_width - 1.2) * (1 if rng.random() < 0.5 else -1)
        actors.append(Actor("car", np.stack([pos, pos + d / np.hypot(*d)]), 0.0, CAR_SIZE))

    return World(inters, roads, statics, buildings, actors, params.ground, (nx, ny))


def _split(rng, lo, hi, min_w=10.0, max_w=28.0) -> np.ndarray:
    """Random lot boundaries covering [lo, hi]."""
    cuts = [lo]
    while hi - cuts[-1] > max_w:
        cuts.append(cuts[-1] + rng.uniform(min_w, max_w))
    if hi - cuts[-1] < min_w / 2 and len(cuts) > 1:
        cuts.pop()
    cuts.append(hi)
    return np.array(cuts)


def _fill_block(rng, x0, x1, y0, y1, prob) -> list[Building]:
    out = []
    if x1 - x0 < 6 or y1 - y0 < 6:
        return out
    xs = _split(rng, x0, x1)
    ys = _split(rng, y0, y1)
    nxl, nyl = len(xs) - 1, len(ys) - 1
    for a in range(nxl):
        for b in range(nyl):
            if rng.random() > prob:
                continue
            lx0, lx1, ly0, ly1 = xs[a], xs[a + 1], ys[b], ys[b + 1]
            shrink = rng.uniform(0.0, 0.25, size=4) * np.array([lx1 - lx0, lx1 - lx0, ly1 - ly0, ly1 - ly0])
            bx0, bx1 = lx0 + shrink[0] * (a > 0), lx1 - shrink[1] * (a < nxl - 1)
            by0, by1 = ly0 + shrink[2] * (b > 0), ly1 - shrink[3] * (b < nyl - 1)
            # street-facing facades get a random recess so no two streets look alike
            bx0 += rng.uniform(0.0, 6.0) if a == 0 else 0.0
            by0 += rng.uniform(0.0, 6.0) if b == 0 else 0.0
            bx1 -= rng.uniform(0.0, 6.0) if a == nxl - 1 else 0.0
            by1 -= rng.uniform(0.0, 6.0) if b == nyl - 1 else 0.0
            if bx1 - bx0 < 2 or by1 - by0 < 2:
                continue
            poly = np.array([[bx0, by0], [bx1, by0], [bx1, by1], [bx0, by1]])
            out.append(Building(poly, float(rng.uniform(5.0, 25.0))))
    return out


def _offset_polyline(pts: np.ndarray, offset: float) -> np.ndarray:
    """Shift each vertex to the right of travel by ``offset`` (lane keeping)."""
    out = []
    for k in range(len(pts)):
        d = pts[min(k + 1, len(pts) - 1)] - pts[max(k - 1, 0)]
        d = d / (np.hypot(*d) or 1.0)
        out.append(pts[k] + offset * np.array([d[1], -d[0]]))
    return np.array(out)


# --- routes -----------------------------------------------------------------

def fillet_route(waypoints: np.ndarray, radius: float, closed: bool = True, step: float = 0.25) -> np.ndarray:
    """Densely sampled polyline through ``waypoints`` with circular corner arcs."""
    pts = np.asarray(waypoints, dtype=float)
    n = len(pts)
    out = []
    rng = range(n) if closed else range(1, n - 1)
    if not closed:
        out.append(pts[0])
    for k in rng:
        p_prev, p, p_next = pts[(k - 1) % n], pts[k], pts[(k + 1) % n]
        d1 = p - p_prev
        d2 = p_next - p
        l1, l2 = np.hypot(*d1), np.hypot(*d2)
        d1, d2 = d1 / l1, d2 / l2
        turn = math.atan2(d1[0] * d2[1] - d1[1] * d2[0], d1 @ d2)
        if abs(turn) < 1e-3:
            out.append(p)
            continue
        cut = min(radius * abs(math.tan(turn / 2)), 0.45 * l1, 0.45 * l2)
        r = cut / abs(math.tan(turn / 2))
        a = p - d1 * cut
        nrm = np.array([-d1[1], d1[0]]) * math.copysign(1.0, turn)
        centre = a + nrm * r
        start = math.atan2(a[1] - centre[1], a[0] - centre[0])
        m = max(2, int(abs(turn) * r / step))
        for s in np.linspace(0.0, turn, m + 1):
            ang = start + s
            out.append(centre + r * np.array([math.cos(ang), math.sin(ang)]))
    if closed:
        out.append(out[0])
    else:
        out.append(pts[-1])
    return _resample(np.array(out), step)


def _resample(poly: np.ndarray, step: float) -> np.ndarray:
    seg = np.diff(poly, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    keep = np.concatenate([[True], lens > 1e-9])
    poly = poly[keep]
    seg = np.diff(poly, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    s = np.arange(0.0, cum[-1], step)
    x = np.interp(s, cum, poly[:, 0])
    y = np.interp(s, cum, poly[:, 1])
    return np.stack([x, y], axis=1)


@dataclass(frozen=True)
class RouteFollower:
    """Constant-speed motion along a densely sampled (optionally closed) path."""

    path: np.ndarray
    speed: float
    start: float = 0.0
    closed: bool = True

    @property
    def length(self) -> float:
        seg = np.diff(self.path, axis=0)
        total = float(np.hypot(seg[:, 0], seg[:, 1]).sum())
        if self.closed:
            total += float(np.hypot(*(self.path[0] - self.path[-1])))
        return total

    def pose(self, t: float) -> Pose2:
        pts = np.vstack([self.path, self.path[:1]]) if self.closed else self.path
        seg = np.diff(pts, axis=0)
        lens = np.hypot(seg[:, 0], seg[:, 1])
        cum = np.concatenate([[0.0], np.cumsum(lens)])
        s = self.start + self.speed * t
        s = s % cum[-1] if self.closed else min(s, cum[-1] - 1e-9)
        i = int(min(np.searchsorted(cum, s, side="right") - 1, len(lens) - 1))
        f = (s - cum[i]) / lens[i]
        p = pts[i] + f * seg[i]
        # heading from a centred difference keeps arcs smooth
        ahead = pts[min(i + 1, len(pts) - 1)]
        behind = pts[i]
        if i > 0:
            behind = pts[i - 1] + f * seg[i - 1]
        if i + 1 < len(seg):
            ahead = pts[i + 1] + f * seg[i + 1]
        d = ahead - behind
        return Pose2(p[0], p[1], math.atan2(d[1], d[0]))


# --- ray casting ------------------------------------------------------------

@dataclass(frozen=True)
class SensorConfig:
    n_az: int = 360
    n_el: int = 16
    el_min_deg: float = -15.0
    el_max_deg: float = 15.0
    r_sensor: float = 80.0
    r_min: float = 1.0
    height: float = 1.8
    noise: float = 0.02


def ray_directions(cfg: SensorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Azimuth (n_az,) and elevation (n_el,) angles in the sensor frame."""
    az = -math.pi + (np.arange(cfg.n_az) + 0.5) * (2.0 * math.pi / cfg.n_az)
    el = np.radians(np.linspace(cfg.el_min_deg, cfg.el_max_deg, cfg.n_el))
    return az, el


def _building_edges(world: World) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    starts, ends, heights = [], [], []
    for b in world.buildings:
        poly = b.polygon
        starts.append(poly)
        ends.append(np.roll(poly, -1, axis=0))
        heights.append(np.full(len(poly), b.height))
    if not starts:
        return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)
    return np.concatenate(starts), np.concatenate(ends), np.concatenate(heights)


def raycast(pose: Pose2, world: World, t: float, cfg: SensorConfig = SensorConfig(),
            noise_seed: int | None = None, noise: float | None = None,
            extra_boxes: list[Box] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Cast the full sweep; returns sensor-frame points (N, 3) and hit ids (N,).

    Hit ids are ``HIT_GROUND``, ``HIT_BUILDING`` or an index into the list
    ``world.static_objects + world.dynamic_actors``. Rays without a return
    within ``cfg.r_sensor`` are dropped.
    """
    noise = cfg.noise if noise is None else noise
    az, el = ray_directions(cfg)
    world_az = az + pose.theta
    ca, sa = np.cos(world_az), np.sin(world_az)
    ce, se = np.cos(el), np.sin(el)
    origin = np.array([pose.x, pose.y, cfg.height])
    n_el, n_az = len(el), len(az)
    best = np.full((n_el, n_az), np.inf)
    hit = np.full((n_el, n_az), HIT_NONE, dtype=np.int64)

    if world.ground:
        with np.errstate(divide="ignore"):
            t_ground = np.where(se < 0, -cfg.height / np.where(se < 0, se, -1.0), np.inf)
        tg = np.broadcast_to(t_ground[:, None], (n_el, n_az))
        better = tg < best
        best = np.where(better, tg, best)
        hit = np.where(better, HIT_GROUND, hit)

    p0, p1, hts = _building_edges(world)
    if len(p0):
        # drop edges that lie entirely beyond sensor range
        seg = p1 - p0
        rel = origin[:2] - p0
        f = np.clip(np.einsum("ij,ij->i", rel, seg) / np.maximum(np.einsum("ij,ij->i", seg, seg), 1e-12), 0.0, 1.0)
        near = np.hypot(*(p0 + f[:, None] * seg - origin[:2]).T) <= cfg.r_sensor
        # footprints are counter-clockwise, so back faces point away from the sensor
        near &= seg[:, 1] * rel[:, 0] - seg[:, 0] * rel[:, 1] >= 0.0
        p0, p1, hts = p0[near], p1[near], hts[near]
    if len(p0):
        # 2D ray/segment intersection, horizontal distance per (azimuth, edge)
        e = p1 - p0
        w = p0 - origin[:2]
        denom = ca[:, None] * e[None, :, 1] - sa[:, None] * e[None, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t2d = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
            u = (w[None, :, 0] * sa[:, None] - w[None, :, 1] * ca[:, None]) / denom
        valid = (np.abs(denom) > 1e-12) & (t2d > 1e-9) & (u >= 0.0) & (u <= 1.0)
        valid &= t2d <= cfg.r_sensor
        a_idx, e_idx = np.nonzero(valid)
        if len(a_idx):
            t3 = t2d[a_idx, e_idx][None, :] / ce[:, None]
            z = cfg.height + t3 * se[:, None]
            t3 = np.where((z >= 0.0) & (z <= hts[e_idx][None, :]), t3, np.inf)
            tb = np.full((n_el, n_az), np.inf)
            el_idx = np.broadcast_to(np.arange(n_el)[:, None], t3.shape)
            np.minimum.at(tb, (el_idx.ravel(), np.broadcast_to(a_idx, t3.shape).ravel()), t3.ravel())
            better = tb < best
            best = np.where(better, tb, best)
            hit = np.where(better, HIT_BUILDING, hit)

    boxes = [o.box for o in world.static_objects] + [a.box_at(t) for a in world.dynamic_actors]
    if extra_boxes:
        boxes = boxes + list(extra_boxes)
    if boxes:
        t_box, k_box = _cast_boxes(boxes, origin, pose.theta, az, ce, se, cfg.r_sensor)
        better = t_box < best
        best = np.where(better, t_box, best)
        hit = np.where(better, k_box, hit)

    mask = (best <= cfg.r_sensor) & (best >= cfg.r_min)
    rng_vals = best[mask]
    if noise > 0:
        rng = np.random.default_rng(noise_seed)
        rng_vals = rng_vals + rng.normal(0.0, noise, size=rng_vals.shape)
        rng_vals = np.maximum(rng_vals, 0.0)
    dirs = np.stack([
        ce[:, None] * np.cos(az)[None, :],
        ce[:, None] * np.sin(az)[None, :],
        np.broadcast_to(se[:, None], (n_el, n_az)),
    ], axis=-1)[mask]
    pts = dirs * rng_vals[:, None]
    return pts, hit[mask]


def simulate_scan(pose: Pose2, world: World, t: float, noise_sigma: float | None = None,
                  cfg: SensorConfig = SensorConfig(), seed: int = 0, stream: int = 0) -> PointCloud:
    """One LiDAR sweep at ``pose`` and time ``t`` (seconds), in the sensor frame.

    z is relative to the sensor, so the ground sits at ``-cfg.height``.
    """
    pts, _ = raycast(pose, world, t, cfg, noise_seed=_noise_seed(seed, stream, t), noise=noise_sigma)
    return PointCloud(pts, Frame.SENSOR)


def _noise_seed(seed: int, stream: int, t: float) -> list[int]:
    return [int(seed) & 0xFFFFFFFF, int(stream) & 0xFFFFFFFF, int(round(t * 1e6)) & 0xFFFFFFFFFFFF]


def _cast_boxes(boxes: list[Box], origin: np.ndarray, yaw: float, az: np.ndarray,
                ce: np.ndarray, se: np.ndarray, r_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Slab test restricted to the azimuth columns each box can occupy."""
    n_el, n_az = len(ce), len(az)
    best = np.full((n_el, n_az), np.inf)
    hit = np.full((n_el, n_az), HIT_NONE, dtype=np.int64)
    lo = np.array([b.lo for b in boxes])
    hi = np.array([b.hi for b in boxes])
    step = 2.0 * math.pi / n_az
    cols, owners = [], []
    for k in range(len(boxes)):
        cx = np.array([lo[k, 0], hi[k, 0], hi[k, 0], lo[k, 0]]) - origin[0]
        cy = np.array([lo[k, 1], lo[k, 1], hi[k, 1], hi[k, 1]]) - origin[1]
        if np.hypot(cx, cy).min() > r_max:
            continue
        if lo[k, 0] <= origin[0] <= hi[k, 0] and lo[k, 1] <= origin[1] <= hi[k, 1]:
            c = np.arange(n_az)
        else:
            ang = np.arctan2(cy, cx) - yaw
            ref = ang[0]
            rel = np.arctan2(np.sin(ang - ref), np.cos(ang - ref))
            a0, a1 = ref + rel.min(), ref + rel.max()
            i0 = math.floor((a0 + math.pi) / step - 0.5) - 1
            i1 = math.ceil((a1 + math.pi) / step - 0.5) + 1
            c = np.arange(i0, i1 + 1) % n_az
        cols.append(c)
        owners.append(np.full(len(c), k))
    if not cols:
        return best, hit
    col = np.concatenate(cols)
    own = np.concatenate(owners)
    world_az = az[col] + yaw
    ray_el = np.repeat(np.arange(n_el), len(col))
    ray_col = np.tile(col, n_el)
    box = np.tile(own, n_el)
    d = np.stack([ce[ray_el] * np.cos(np.tile(world_az, n_el)),
                  ce[ray_el] * np.sin(np.tile(world_az, n_el)),
                  se[ray_el]], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo[box] - origin) * inv
        t2 = (hi[box] - origin) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    ok = (tmax >= tmin) & (tmin > 1e-9)
    if not ok.any():
        return best, hit
    tv, re, rc, bx = tmin[ok], ray_el[ok], ray_col[ok], box[ok]
    flat = re * n_az + rc
    order = np.lexsort((bx, tv, flat))
    flat, tv, bx = flat[order], tv[order], bx[order]
    first = np.unique(flat, return_index=True)[1]
    best.ravel()[flat[first]] = tv[first]
    hit.ravel()[flat[first]] = bx[first]
    return best, hit
