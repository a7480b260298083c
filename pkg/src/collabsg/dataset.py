"""Simulated multi-agent datasets: generation, on-disk layout and reading.

Layout of a dataset directory::

    manifest.txt            key=value lines
    agentK/scans.bin        concatenated scan records (see wire.write_scan)
    agentK/gt.csv           timestamp_us,x,y,theta
    agentK/detections.bin   observation records; keyframe_id is the scan index
"""
from __future__ import annotations

import ast
import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import Frame, PointCloud, Pose2
from .perception import DetectionOracle, ObjectObservation, OracleNoise
from .wire import decode_observations, encode_observation, read_scans, write_scan
from .world import (RouteFollower, SensorConfig, World, WorldParams, fillet_route, generate_world, raycast,
                    _noise_seed)

WORLD_PRESETS = {
    "town": WorldParams(),
    "small": WorldParams(nx=3, ny=3, n_moving=4, n_parked=5),
    "empty": WorldParams(nx=3, ny=3, building_prob=0.0, objects_per_intersection=0, mid_block_poles=0,
                         n_moving=0, n_parked=0),
}


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    seed: int = 0
    agents: int = 3
    duration: float = 90.0
    world_preset: str = "town"
    scan_period: float = 0.4
    speed: float = 8.0
    turn_radius: float = 10.0
    # route is the rectangle spanning this many blocks per side
    loop_blocks: int = 2
    noise: float = 0.02
    rho_fp: float = 0.05
    p_miss: float = 0.1
    p_cls: float = 0.02
    p_sw: float = 0.02


def loop_waypoints(world: World, seed: int, blocks: int = 2) -> np.ndarray:
    """Corners of a ``blocks x blocks`` rectangle of intersections picked by seed."""
    nx, ny = world.grid_shape
    if nx <= blocks or ny <= blocks:
        raise DatasetError(f"{nx}x{ny} grid cannot hold a {blocks}-block loop")
    rng = np.random.default_rng([seed, 0x100])
    i0 = int(rng.integers(nx - blocks))
    j0 = int(rng.integers(ny - blocks))
    corners = [(i0, j0), (i0 + blocks, j0), (i0 + blocks, j0 + blocks), (i0, j0 + blocks)]
    return np.array([world.intersections[world.grid_index(i, j)] for i, j in corners])


def agent_routes(world: World, cfg: SimulationConfig) -> list[RouteFollower]:
    """All agents drive the same loop, starting evenly spaced along it."""
    path = fillet_route(loop_waypoints(world, cfg.seed, cfg.loop_blocks), cfg.turn_radius)
    base = RouteFollower(path, cfg.speed)
    return [RouteFollower(path, cfg.speed, start=base.length * k / cfg.agents) for k in range(cfg.agents)]


def _manifest(cfg: SimulationConfig, sensor: SensorConfig) -> dict[str, str]:
    out = {f.name: repr(getattr(cfg, f.name)) for f in fields(cfg)}
    for f in fields(sensor):
        out[f"sensor_{f.name}"] = repr(getattr(sensor, f.name))
    return out


def simulate_dataset(cfg: SimulationConfig, out_dir: str | Path, sensor: SensorConfig | None = None) -> Path:
    if cfg.world_preset not in WORLD_PRESETS:
        raise DatasetError(f"unknown world preset {cfg.world_preset!r}")
    if cfg.agents < 1 or cfg.duration <= 0 or cfg.scan_period <= 0:
        raise DatasetError("agents, duration and scan_period must be positive")
    sensor = sensor or SensorConfig(noise=cfg.noise)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_world(cfg.seed, WORLD_PRESETS[cfg.world_preset])
    noise = OracleNoise(cfg.rho_fp, cfg.p_miss, cfg.p_cls, cfg.p_sw)
    oracle = DetectionOracle(world, noise, sensor, seed=cfg.seed)
    n_scans = int(math.floor(cfg.duration / cfg.scan_period + 1e-9)) + 1
    with open(out / "manifest.txt", "w") as fh:
        for k, v in _manifest(cfg, sensor).items():
            fh.write(f"{k}={v}\n")
    for a, route in enumerate(agent_routes(world, cfg)):
        d = out / f"agent{a}"
        d.mkdir(exist_ok=True)
        with open(d / "scans.bin", "wb") as scans, open(d / "detections.bin", "wb") as dets, \
                open(d / "gt.csv", "w", newline="") as gt:
            writer = csv.writer(gt, lineterminator="\n")
            writer.writerow(["timestamp_us", "x", "y", "theta"])
            for k in range(n_scans):
                t = k * cfg.scan_period
                t_us = int(round(t * 1e6))
                pose = route.pose(t)
                pts, hits = raycast(pose, world, t, sensor, noise_seed=_noise_seed(cfg.seed, a, t))
                cloud = PointCloud(pts, Frame.SENSOR)
                write_scan(scans, t_us, cloud)
                for obs in oracle.detect(a, k, pose, cloud, t, hits):
                    dets.write(encode_observation(obs))
                writer.writerow([t_us, repr(pose.x), repr(pose.y), repr(pose.theta)])
    return out


# -- reading -------------------------------------------------------------------

@dataclass
class AgentData:
    agent_id: int
    scans: list  # (t_us, PointCloud)
    gt: list  # (t_us, Pose2)
    detections: dict = field(default_factory=dict)  # scan index -> observations


@dataclass
class Dataset:
    root: Path
    manifest: dict
    agents: list[AgentData]

    @property
    def config(self) -> SimulationConfig:
        try:
            kw = {f.name: ast.literal_eval(self.manifest[f.name])
                  for f in fields(SimulationConfig) if f.name in self.manifest}
        except (ValueError, SyntaxError) as exc:
            raise DatasetError(f"malformed manifest value: {exc}") from None
        return SimulationConfig(**kw)

    def world(self) -> World:
        cfg = self.config
        return generate_world(cfg.seed, WORLD_PRESETS[cfg.world_preset])


def read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise DatasetError(f"malformed manifest line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_trajectory_csv(path: Path) -> list[tuple[int, Pose2]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["timestamp_us", "x", "y", "theta"]:
            raise DatasetError(f"{path}: unexpected header {header}")
        for row in reader:
            rows.append((int(row[0]), Pose2(float(row[1]), float(row[2]), float(row[3]))))
    return rows


def write_trajectory_csv(path: Path, samples) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp_us", "x", "y", "theta"])
        for t, p in samples:
            w.writerow([t, f"{p.x:.6f}", f"{p.y:.6f}", f"{p.theta:.6f}"])


def load_dataset(root: str | Path, agents: list[int] | None = None) -> Dataset:
    root = Path(root)
    if not (root / "manifest.txt").is_file():
        raise DatasetError(f"{root} has no manifest.txt")
    manifest = read_manifest(root / "manifest.txt")
    try:
        n = int(manifest["agents"])
    except (KeyError, ValueError):
        raise DatasetError("manifest lacks a valid agents entry") from None
    out = []
    for a in (range(n) if agents is None else agents):
        d = root / f"agent{a}"
        try:
            scans = read_scans((d / "scans.bin").read_bytes())
            gt = read_trajectory_csv(d / "gt.csv")
            det_bytes = (d / "detections.bin").read_bytes() if (d / "detections.bin").exists() else b""
        except OSError as exc:
            raise DatasetError(str(exc)) from None
        dets: dict[int, list[ObjectObservation]] = {}
        for obs in decode_observations(det_bytes):
            dets.setdefault(obs.keyframe_id, []).append(obs)
        out.append(AgentData(a, scans, gt, dets))
    return Dataset(root, manifest, out)
