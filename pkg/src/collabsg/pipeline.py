"""End-to-end run over a dataset and evaluation of the resulting artifacts."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import AgentData, Dataset, DatasetError, load_dataset, read_trajectory_csv, write_trajectory_csv
from .evaluation import (EvaluationError, GroundTruthObject, Scope, Trajectory, ate_errors, intersection_prf,
                         object_prf, reference_config_for, reference_from_map, relative_errors,
                         segments_from_world)
from .frontend import Frontend, FrontendConfig
from .geometry import Pose2
from .posegraph import PoseGraph
from .scenegraph import SceneGraph, SceneGraphConfig, export_scene_graph, import_scene_graph
from .server import ServerConfig, SlamServer
from .wire import decode_keyframe, encode_keyframe

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    scenegraph: SceneGraphConfig = field(default_factory=SceneGraphConfig)
    # agent 0's first keyframe is placed at its ground-truth pose; the
    # others start unaligned at identity
    anchor_first_agent: bool = True
    agents: tuple | None = None
    max_dt_us: int = 100_000
    segment_lengths: tuple = (50.0, 100.0, 150.0, 200.0)
    object_match_dist: float = 2.0
    object_class_strict: bool = True


def _coerce(template, value):
    if dataclasses.is_dataclass(template) and isinstance(value, dict):
        return _replace(template, value)
    if isinstance(template, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _replace(obj, overrides: dict):
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = set(overrides) - names
    if unknown:
        raise ValueError(f"unknown {type(obj).__name__} keys: {sorted(unknown)}")
    return dataclasses.replace(obj, **{k: _coerce(getattr(obj, k), v) for k, v in overrides.items()})


def run_config_from_dict(d: dict) -> RunConfig:
    cfg = RunConfig()
    if "agents" in d and d["agents"] is not None:
        d = dict(d, agents=tuple(d["agents"]))
    return _replace(cfg, d)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return run_config_from_dict(json.loads(Path(path).read_text()))


# -- agent side ------------------------------------------------------------------

def agent_stream(agent: AgentData, cfg: FrontendConfig) -> list[bytes]:
    """Serialized keyframe messages one agent would send, in order."""
    fe = Frontend(agent.agent_id, cfg)
    out = []
    for k, (t_us, scan) in enumerate(agent.scans):
        kf = fe.process(scan, t_us, agent.detections.get(k, []))
        if kf is not None:
            out.append(encode_keyframe(kf))
    return out


def build_streams(ds: Dataset, cfg: RunConfig, parallel: bool = False) -> dict[int, list[bytes]]:
    agents = [a for a in ds.agents if cfg.agents is None or a.agent_id in cfg.agents]
    if parallel and len(agents) > 1:
        with ThreadPoolExecutor(max_workers=len(agents)) as pool:
            streams = list(pool.map(lambda a: agent_stream(a, cfg.frontend), agents))
    else:
        streams = [agent_stream(a, cfg.frontend) for a in agents]
    return {a.agent_id: s for a, s in zip(agents, streams)}


# -- server side -------------------------------------------------------------------

@dataclass
class AteSample:
    t_us: int
    revision: int
    ate_m: float
    n_nodes: int
    new_loops: int
    optimized: bool


@dataclass
class RunResult:
    server: SlamServer
    scene_graph: SceneGraph
    ate_series: list
    first_inter_us: int | None
    bandwidth: dict
    anchor_agent: int
    updates_triggered: int = 0
    merge_events: int = 0

    def trajectories(self) -> dict[int, list[tuple[int, Pose2]]]:
        srv = self.server
        return {a: [(srv.keyframes[n].timestamp_us, srv.graph.nodes[n].pose) for n in nodes]
                for a, nodes in sorted(srv.agent_nodes.items())}

    def agent_components(self) -> dict[int, int]:
        """Agent -> agent owning the anchor of its component."""
        srv = self.server
        return {a: srv.graph.nodes[srv.component_of[nodes[0]]].agent_id for a, nodes in sorted(srv.agent_nodes.items())}

    def accounted_ate(self) -> float:
        """Mean online ATE; multi-agent runs count from the first inter-agent closure."""
        multi = len(self.server.agent_nodes) > 1
        vals = [s.ate_m for s in self.ate_series
                if not multi or (self.first_inter_us is not None and s.t_us >= self.first_inter_us)]
        return float(np.mean(vals)) if vals else math.nan

    def closure_drops(self, min_drop: float = 0.0) -> list[tuple[int, float]]:
        """(t_us, drop) where an update adding loop edges lowered the online ATE."""
        out = []
        for prev, cur in zip(self.ate_series, self.ate_series[1:]):
            if cur.new_loops and cur.n_nodes == prev.n_nodes + 1 and prev.ate_m - cur.ate_m > min_drop:
                out.append((cur.t_us, prev.ate_m - cur.ate_m))
        return out


def _component_trajectories(srv: SlamServer, comp: int) -> list[np.ndarray]:
    out = []
    for a in sorted(srv.agent_nodes):
        nodes = [n for n in srv.agent_nodes[a] if srv.component_of[n] == comp]
        if len(nodes) >= 2:
            out.append(np.array([[srv.graph.nodes[n].pose.x, srv.graph.nodes[n].pose.y] for n in nodes]))
    return out


def run_pipeline(ds: Dataset, cfg: RunConfig = RunConfig(), streams: dict | None = None,
                 parallel: bool = False, observer=None) -> RunResult:
    """Feed every agent's keyframes to one server in timestamp order.

    ``observer(update, server, scene_graph)``, if given, is called after
    every map update has been applied to the scene graph.
    """
    if streams is None:
        streams = build_streams(ds, cfg, parallel)
    agent_ids = sorted(streams)
    if not agent_ids:
        raise DatasetError("no agents selected")
    gt = {a.agent_id: dict(a.gt) for a in ds.agents}
    anchor_agent = agent_ids[0]
    priors = dict(cfg.server.priors)
    if cfg.anchor_first_agent and anchor_agent not in priors:
        priors[anchor_agent] = ds.agents[[a.agent_id for a in ds.agents].index(anchor_agent)].gt[0][1]
    srv = SlamServer(dataclasses.replace(cfg.server, priors=priors))
    sg = SceneGraph(cfg.scenegraph)

    decoded = {a: [decode_keyframe(b, cfg.server.scan_context) for b in streams[a]] for a in agent_ids}
    order = sorted((kf.timestamp_us, a, i) for a in agent_ids for i, kf in enumerate(decoded[a]))
    series: list[AteSample] = []
    node_gt: dict[int, tuple[float, float]] = {}
    first_inter = None
    triggered = merges = 0
    for t_us, a, i in order:
        kf = decoded[a][i]
        update = srv.ingest_keyframe(kf, len(streams[a][i]))
        if update is None:
            continue
        node = srv.node_of[(kf.agent_id, kf.keyframe_id)]
        g = gt.get(a, {}).get(kf.timestamp_us)
        if g is not None:
            node_gt[node] = (g.x, g.y)
        poses = srv.graph.nodes
        pose_map = {n: nd.pose for n, nd in poses.items()}
        sg.add_keyframe_observations(kf.agent_id, kf.keyframe_id, kf.observations, node, pose_map, srv.component_of)
        anchor_comp = srv.component_of[srv.agent_nodes[anchor_agent][0]]
        if update.merged_components:
            merges += 1
        rep = sg.on_map_update(update.max_pose_delta, pose_map, srv.component_of,
                               trajectories=_component_trajectories(srv, anchor_comp),
                               revision=update.revision, merged=bool(update.merged_components))
        triggered += rep.triggered
        if observer is not None:
            observer(update, srv, sg)
        if first_inter is None and srv.stats.inter > 0:
            first_inter = t_us
        members = [n for n in srv.members[anchor_comp] if n in node_gt]
        if members:
            est = np.array([[poses[n].pose.x, poses[n].pose.y] for n in members])
            ref = np.array([node_gt[n] for n in members])
            series.append(AteSample(t_us, update.revision, float(np.hypot(*(est - ref).T).mean()), len(members),
                                    update.new_loops, update.optimized))
    final = srv.finalize()
    pose_map = srv.graph.poses()
    anchor_comp = srv.component_of[srv.agent_nodes[anchor_agent][0]]
    # the exported graph always reflects the final poses
    sg.on_map_update(math.inf, pose_map, srv.component_of, trajectories=_component_trajectories(srv, anchor_comp),
                     revision=final.revision, merged=True)
    triggered += 1
    sg.map_cloud = srv.assemble_map()
    return RunResult(srv, sg, series, first_inter, dict(sorted(srv.bytes_in.items())), anchor_agent,
                     triggered, merges)


# -- artifacts ---------------------------------------------------------------------

def write_run(result: RunResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for a, samples in result.trajectories().items():
        d = out / f"agent{a}"
        d.mkdir(exist_ok=True)
        write_trajectory_csv(d / "traj_est.csv", samples)
    (out / "graph.txt").write_text(result.server.graph.dump())
    (out / "scenegraph.json").write_text(export_scene_graph(result.scene_graph))
    bw = {str(a): int(b) for a, b in result.bandwidth.items()}
    (out / "bandwidth.json").write_text(json.dumps(bw, sort_keys=True, indent=1) + "\n")
    with open(out / "ate_series.csv", "w") as fh:
        fh.write("timestamp_us,revision,ate_m,n_nodes,new_loops,optimized\n")
        for s in result.ate_series:
            fh.write(f"{s.t_us},{s.revision},{s.ate_m:.6f},{s.n_nodes},{s.new_loops},{int(s.optimized)}\n")
    st = result.server.stats
    summary = {
        "revision": result.server.revision,
        "anchor_agent": result.anchor_agent,
        "components": {str(a): c for a, c in result.agent_components().items()},
        "first_inter_closure_us": result.first_inter_us,
        "loop_closures": {"intra": st.intra, "inter": st.inter, "rejected": st.rejected},
        "online_ate_accounted_m": _num(result.accounted_ate()),
        "closure_drops": len(result.closure_drops()),
        "scene_graph_updates": result.updates_triggered,
    }
    (out / "run.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return out


def _num(x: float):
    return None if x is None or not math.isfinite(x) else round(float(x), 6)


def evaluate_run(run_dir: str | Path, dataset_dir: str | Path, cfg: RunConfig = RunConfig()) -> dict:
    """Metrics for a finished run directory against its dataset."""
    run_dir, dataset_dir = Path(run_dir), Path(dataset_dir)
    if not run_dir.is_dir():
        raise DatasetError(f"run directory {run_dir} does not exist")
    ds = load_dataset(dataset_dir)
    try:
        summary = json.loads((run_dir / "run.json").read_text())
        sg = import_scene_graph((run_dir / "scenegraph.json").read_text(), cfg.scenegraph)
        bandwidth = json.loads((run_dir / "bandwidth.json").read_text())
    except (OSError, ValueError) as exc:
        raise DatasetError(f"incomplete run directory: {exc}") from None
    anchor = summary["anchor_agent"]
    in_world = [int(a) for a, c in sorted(summary["components"].items(), key=lambda kv: int(kv[0])) if c == anchor]
    gt_by_agent = {a.agent_id: Trajectory.from_samples(a.gt, a.agent_id) for a in ds.agents}
    errs, etrans, erot = [], [], []
    for a in in_world:
        path = run_dir / f"agent{a}" / "traj_est.csv"
        if not path.is_file():
            raise DatasetError(f"missing {path}")
        est = Trajectory.from_samples(read_trajectory_csv(path), a)
        errs.append(ate_errors(est, gt_by_agent[a], cfg.max_dt_us))
        try:
            et, er = relative_errors(est, gt_by_agent[a], cfg.segment_lengths, cfg.max_dt_us)
            etrans.append(et)
            erot.append(er)
        except EvaluationError as exc:
            log.warning("agent %d: %s", a, exc)
    all_err = np.concatenate(errs) if errs else np.zeros(0)
    if len(all_err) == 0:
        raise EvaluationError("no matched trajectory samples")

    world = ds.world()
    routes = [gt_by_agent[a].poses[:, :2] for a in sorted(int(k) for k in summary["components"])]
    ref_cfg = reference_config_for(cfg.scenegraph)
    segs = segments_from_world(world)
    est_int = [[i.position[0], i.position[1]] for i in sg.intersections]
    prf_all = intersection_prf(est_int, reference_from_map(segs, routes, Scope.ALL, ref_cfg))
    prf_turn = intersection_prf(est_int, reference_from_map(segs, routes, Scope.TURNED, ref_cfg))

    det_range = 50.0
    visible = []
    for o in world.static_objects:
        c = o.box.center[:2]
        if any(np.min(np.hypot(*(r - c).T)) <= det_range for r in routes):
            visible.append(GroundTruthObject(o.label, o.box))
    op, orc, oiou = object_prf(list(sg.objects.values()), visible, cfg.object_match_dist, cfg.object_class_strict)

    return {
        "ate_mean_m": _num(all_err.mean()),
        "ate_std_m": _num(all_err.std()),
        "etrans_pct": _num(float(np.mean(etrans))) if etrans else None,
        "erot_deg_per_km": _num(float(np.mean(erot))) if erot else None,
        "intersections_all": {k: _num(v) for k, v in prf_all.as_dict().items()},
        "intersections_turned": {k: _num(v) for k, v in prf_turn.as_dict().items()},
        "objects": {"precision": _num(op), "recall": _num(orc), "mean_iou": _num(oiou)},
        "bandwidth_bytes_per_agent": bandwidth,
        "loop_closures": summary["loop_closures"],
        "online_ate_accounted_m": summary.get("online_ate_accounted_m"),
        "agents_in_world_frame": in_world,
    }


def write_metrics(metrics: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n")


def load_graph(run_dir: str | Path) -> PoseGraph:
    return PoseGraph.load((Path(run_dir) / "graph.txt").read_text())
