import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabsg.geometry import (Box, Frame, ParameterError, PointCloud, Pose2, compose, exp, inverse, log,
                               remove_outliers, transform_cloud, voxel_downsample, wrap_angle)
from oracles import mat, unmat

coord = st.floats(-50, 50, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)
poses = st.builds(Pose2, coord, coord, angle)


def close(a: Pose2, b: Pose2, tol):
    return abs(a.x - b.x) < tol and abs(a.y - b.y) < tol and abs(wrap_angle(a.theta - b.theta)) < tol


def test_compose_examples():
    p = Pose2(3.0, -2.0, 0.7)
    assert close(compose(Pose2.identity(), p), p, 1e-15)
    assert close(compose(Pose2(1, 0, math.pi / 2), Pose2(1, 0, 0)), Pose2(1, 1, math.pi / 2), 1e-12)
    assert close(compose(p, inverse(p)), Pose2.identity(), 1e-12)


def test_theta_normalized():
    assert Pose2(0, 0, -math.pi).theta == pytest.approx(math.pi)
    assert Pose2(0, 0, 3 * math.pi).theta == pytest.approx(math.pi)
    assert -math.pi < Pose2(0, 0, -7.0).theta <= math.pi


@given(poses, poses)
def test_compose_matches_matrix_product(a, b):
    ref = unmat(mat(a.x, a.y, a.theta) @ mat(b.x, b.y, b.theta))
    assert close(compose(a, b), Pose2(*ref), 1e-9)


@given(poses, poses, poses)
def test_compose_associative(a, b, c):
    assert close(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-10)


@given(poses)
def test_inverse_is_identity(p):
    assert close(compose(p, inverse(p)), Pose2.identity(), 1e-12)


@given(st.builds(Pose2, coord, coord, st.floats(-3.1, 3.1)))
def test_exp_log_roundtrip(p):
    assert close(exp(log(p)), p, 1e-10)


def test_transform_cloud_examples():
    c = PointCloud(np.array([[1.0, 0.0, 0.5]]), Frame.SENSOR)
    out = transform_cloud(Pose2(0, 0, math.pi), c)
    np.testing.assert_allclose(out.points, [[-1, 0, 0.5]], atol=1e-12)
    assert out.frame is Frame.WORLD
    out = transform_cloud(Pose2(2, 3, 0), PointCloud(np.array([[1.0, 1.0, 1.0]])))
    np.testing.assert_allclose(out.points, [[3, 4, 1]])
    same = transform_cloud(Pose2.identity(), c, Frame.SENSOR)
    np.testing.assert_array_equal(same.points, c.points)


@settings(max_examples=30)
@given(poses, st.integers(0, 10**6))
def test_transform_preserves_planar_distances(p, seed):
    pts = np.random.default_rng(seed).uniform(-20, 20, (12, 3))
    out = transform_cloud(p, PointCloud(pts)).points
    d0 = np.hypot(*(pts[:, None, :2] - pts[None, :, :2]).transpose(2, 0, 1))
    d1 = np.hypot(*(out[:, None, :2] - out[None, :, :2]).transpose(2, 0, 1))
    np.testing.assert_allclose(d0, d1, atol=1e-9)
    np.testing.assert_array_equal(out[:, 2], pts[:, 2])


def test_voxel_examples():
    assert len(voxel_downsample(PointCloud(), 1.0)) == 0
    out = voxel_downsample(PointCloud(np.array([[0.1, 0.1, 0], [0.3, 0.3, 0]])), 1.0)
    np.testing.assert_allclose(out.points, [[0.2, 0.2, 0.0]])
    pts = np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [0.5, 1.5, 0.5]])
    assert len(voxel_downsample(PointCloud(pts), 1.0)) == 3
    with pytest.raises(ParameterError):
        voxel_downsample(PointCloud(pts), 0.0)


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.floats(0.1, 3.0))
def test_voxel_idempotent_and_order_free(seed, voxel):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-10, 10, (200, 3))
    once = voxel_downsample(PointCloud(pts), voxel)
    assert len(once) <= len(pts)
    twice = voxel_downsample(once, voxel)
    np.testing.assert_allclose(twice.points, once.points, atol=1e-12)
    shuffled = voxel_downsample(PointCloud(pts[rng.permutation(len(pts))]), voxel)
    np.testing.assert_allclose(shuffled.points, once.points, atol=1e-9)


def test_voxel_label_vote():
    pts = np.array([[0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0], [5, 0, 0], [5.1, 0, 0]])
    labels = np.array(["car", "pole", "pole", "sign", "pole"], dtype=object)
    out = voxel_downsample(PointCloud(pts, labels=labels), 1.0)
    assert list(out.labels) == ["pole", "pole"]


def test_remove_outliers_examples():
    assert len(remove_outliers(PointCloud(np.array([[0.0, 0, 0]])), 1.0, 1)) == 0
    rng = np.random.default_rng(0)
    cluster = rng.uniform(0, 0.1, (10, 3))
    assert len(remove_outliers(PointCloud(cluster), 0.5, 3)) == 10
    both = np.vstack([cluster, [[100.0, 0, 0]]])
    out = remove_outliers(PointCloud(both), 0.5, 3)
    np.testing.assert_array_equal(out.points, cluster)


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.floats(0.2, 3.0), st.integers(1, 5))
def test_remove_outliers_matches_brute_force(seed, radius, k):
    pts = np.random.default_rng(seed).uniform(0, 8, (80, 3))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    keep = (d <= radius).sum(axis=1) - 1 >= k
    out = remove_outliers(PointCloud(pts), radius, k)
    np.testing.assert_array_equal(out.points, pts[keep])


def test_box_metrics():
    a = Box((0, 0, 0), (2, 1, 1))
    b = Box((1, 0, 0), (3, 1, 1))
    assert a.iou(b) == pytest.approx(1 / 3)
    assert a.overlap_ratio(Box((0, 0, 0), (1, 1, 1))) == pytest.approx(1.0)
    assert a.iou(Box((10, 10, 10), (11, 11, 11))) == 0.0
    np.testing.assert_allclose(a.with_min_extent(2.0).size, [2, 2, 2])


def test_pointcloud_rejects_bad_input():
    with pytest.raises(ParameterError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(ParameterError):
        PointCloud(np.array([[np.nan, 0, 0]]))
