import math

import numpy as np
import pytest

from collabsg.dataset import SimulationConfig, WORLD_PRESETS, agent_routes
from collabsg.frontend import FrontendConfig, Keyframe, preprocess
from collabsg.geometry import Frame, PointCloud, Pose2, between, compose, voxel_downsample
from collabsg.posegraph import EdgeKind, residual
from collabsg.scancontext import encode
from collabsg.server import CandidateSource, LoopCandidate, ServerConfig, SlamServer
from collabsg.world import generate_world, simulate_scan


@pytest.fixture(scope="module")
def scene():
    world = generate_world(2, WORLD_PRESETS["small"])
    route = agent_routes(world, SimulationConfig(seed=2, agents=1, world_preset="small", loop_blocks=1))[0]
    return world, route


def keyframes(scene, agent, t_start, n, dt=0.3, seed=0):
    """Noise-free keyframes along the route; odometry starts at identity."""
    world, route = scene
    fc, sc = FrontendConfig(), ServerConfig().scan_context
    out, odom, prev = [], Pose2(), None
    for k in range(n):
        t = t_start + k * dt
        g = route.pose(t)
        if prev is not None:
            odom = compose(odom, between(prev, g))
        prev = g
        c = preprocess(simulate_scan(g, world, t, seed=seed + k), fc)
        ts = int(t * 1e6) + agent
        out.append((Keyframe(agent, k, ts, odom, c, c, encode(c, sc)), g))
    return out


def bare_kf(agent, k, odom, cloud=None):
    cloud = cloud if cloud is not None else PointCloud()
    return Keyframe(agent, k, 1000 * (k + 1) + agent, odom, cloud, cloud, encode(cloud))


def run(server, *streams):
    for kf, _ in sorted((x for s in streams for x in s), key=lambda x: x[0].timestamp_us):
        server.ingest_keyframe(kf)
    server.finalize()
    return server


def test_first_keyframe_and_odometry():
    srv = SlamServer()
    srv.ingest_keyframe(bare_kf(0, 0, Pose2()))
    assert len(srv.graph.nodes) == 1 and not srv.graph.edges and srv.graph.nodes[0].fixed
    srv.ingest_keyframe(bare_kf(0, 1, Pose2(2, 0, 0)))
    assert srv.graph.nodes[1].pose == Pose2(2, 0, 0)
    assert len(srv.graph.edges) == 1 and srv.graph.edges[0].kind is EdgeKind.ODOMETRY


def test_duplicate_and_out_of_order_dropped():
    srv = SlamServer()
    srv.ingest_keyframe(bare_kf(0, 3, Pose2()))
    assert srv.ingest_keyframe(bare_kf(0, 3, Pose2())) is None
    assert srv.ingest_keyframe(bare_kf(0, 2, Pose2())) is None
    assert len(srv.graph.nodes) == 1


def test_isolated_node_has_no_candidates():
    srv = SlamServer()
    srv.ingest_keyframe(bare_kf(0, 0, Pose2()))
    assert srv.find_candidates(0) == []


def test_self_pair_validates_to_identity(scene):
    (kf, _), = keyframes(scene, 0, 0.0, 1)
    srv = SlamServer()
    srv.ingest_keyframe(kf)
    edge = srv.validate_candidate(LoopCandidate(0, 0, CandidateSource.DESCRIPTOR, Pose2(), 0.0))
    assert edge is not None and edge.measurement.distance_to(Pose2()) < 1e-9
    assert srv.merge_components(edge) is None and not srv.graph.edges


def test_revisit_validation(scene):
    a = keyframes(scene, 0, 0.0, 1)[0]
    b = keyframes(scene, 1, 0.6, 1, seed=50)[0]
    srv = SlamServer()
    srv.ingest_keyframe(a[0])
    srv.ingest_keyframe(b[0])
    truth = between(b[1], a[1])
    guess = compose(truth, Pose2(0.3, 0.0, 0.0))
    edge = srv.validate_candidate(LoopCandidate(1, 0, CandidateSource.RADIUS, guess))
    assert edge is not None and edge.measurement.distance_to(truth) < 0.1
    far = keyframes(scene, 2, 40.0, 1, seed=90)[0]
    srv.ingest_keyframe(far[0])
    assert srv.validate_candidate(LoopCandidate(2, 0, CandidateSource.DESCRIPTOR, Pose2())) is None


def test_identity_merge_of_single_nodes(scene):
    a = keyframes(scene, 0, 0.0, 1)[0]
    b = keyframes(scene, 1, 0.0, 1, seed=0)[0]
    srv = SlamServer(ServerConfig(priors={1: Pose2(7, -3, 1.0)}))
    srv.ingest_keyframe(a[0])
    srv.ingest_keyframe(b[0])
    assert len(srv.components()) == 1
    assert srv.graph.nodes[1].pose.distance_to(Pose2()) < 1e-6
    assert srv.graph.nodes[0].fixed and not srv.graph.nodes[1].fixed


def test_offset_agent_merges_onto_truth(scene):
    A = keyframes(scene, 0, 0.0, 40, seed=0)
    B = keyframes(scene, 1, 3.0, 40, seed=500)
    wrong = compose(Pose2(10, 5, math.radians(30)), B[0][1])
    srv = run(SlamServer(ServerConfig(priors={0: A[0][1], 1: wrong})), A, B)
    assert len(srv.components()) == 1 and srv.stats.inter > 0
    errs = [srv.graph.nodes[srv.node_of[(1, kf.keyframe_id)]].pose.distance_to(g) for kf, g in B]
    assert max(errs) < 0.1


def test_third_agent_joins(scene):
    A = keyframes(scene, 0, 0.0, 30, seed=0)
    B = keyframes(scene, 1, 2.0, 30, seed=300)
    C = keyframes(scene, 2, 4.0, 30, seed=600)
    srv = SlamServer(ServerConfig(priors={0: A[0][1]}))
    prev, seen = 0, set()
    for kf, _ in sorted(A + B + C, key=lambda x: x[0].timestamp_us):
        srv.ingest_keyframe(kf)
        n = len(srv.components())
        # only a new agent's first keyframe may add a component
        assert n <= prev + (kf.agent_id not in seen)
        seen.add(kf.agent_id)
        prev = n
    assert prev == 1 and len(srv.merge_log) == 2


def test_assemble_map():
    srv = SlamServer()
    assert len(srv.assemble_map()) == 0
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.uniform(-10, 10, (400, 3)), Frame.KEYFRAME)
    srv.ingest_keyframe(bare_kf(0, 0, Pose2(), cloud))
    out = srv.assemble_map(voxel=1.0)
    lifted = PointCloud(cloud.points + [0, 0, srv.cfg.scan_context.height_offset], Frame.WORLD)
    np.testing.assert_allclose(np.sort(out.points, axis=0), np.sort(voxel_downsample(lifted, 1.0).points, axis=0))
    assert set(out.labels) == {"unlabeled"}


def test_map_wall_is_thin(scene):
    A = keyframes(scene, 0, 0.0, 20, seed=0)
    srv = run(SlamServer(ServerConfig(priors={0: A[0][1]})), A)
    world, _ = scene
    pts = srv.assemble_map(voxel=0.2).points
    # distance from each mapped point to the nearest building face
    d = np.full(len(pts), np.inf)
    for b in world.buildings:
        lo, hi = b.polygon.min(axis=0), b.polygon.max(axis=0)
        dx = np.maximum(np.maximum(lo[0] - pts[:, 0], pts[:, 0] - hi[0]), 0)
        dy = np.maximum(np.maximum(lo[1] - pts[:, 1], pts[:, 1] - hi[1]), 0)
        d = np.minimum(d, np.hypot(dx, dy))
    near = d[d < 1.0]
    assert len(near) > 100 and np.percentile(near, 90) < 0.3


def test_snapshot_and_determinism(scene):
    A = keyframes(scene, 0, 0.0, 15, seed=0)
    B = keyframes(scene, 1, 1.5, 15, seed=100)
    s1 = run(SlamServer(ServerConfig(priors={0: A[0][1]})), A, B).snapshot()
    s2 = run(SlamServer(ServerConfig(priors={0: A[0][1]})), A, B).snapshot()
    assert s1 == s2


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="point-to-point ICP between differently sampled scans keeps a sliding "
                                       "floor; loop residuals at truth reach 0.07-0.2 m")
def test_noise_free_loop_residuals_at_truth(tmp_path):
    from collabsg.dataset import load_dataset, simulate_dataset
    from collabsg.pipeline import run_pipeline
    simulate_dataset(SimulationConfig(seed=2, agents=2, duration=30.0, world_preset="small", loop_blocks=1,
                                      noise=0.0, rho_fp=0, p_miss=0, p_cls=0, p_sw=0), tmp_path)
    ds = load_dataset(tmp_path)
    srv = run_pipeline(ds).server
    gt = {a.agent_id: dict(a.gt) for a in ds.agents}
    truth = {n: gt[kf.agent_id][kf.timestamp_us] for n, kf in srv.keyframes.items()}
    res = [np.hypot(*residual(e, truth).as_array()[:2]) for e in srv.graph.edges if e.kind.is_loop]
    assert res and max(res) < 1e-2
