import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabsg.evaluation import (EvaluationError, GroundTruthObject, IntersectionReference, NamedSegment, PRF, Scope,
                                 Trajectory, associate, ate, intersection_prf, object_prf, reference_from_map,
                                 relative_errors)
from collabsg.geometry import Box


def traj(xy, theta=None, t0=0, dt=100_000):
    xy = np.asarray(xy, float)
    th = np.zeros(len(xy)) if theta is None else np.asarray(theta, float)
    return Trajectory(t0 + dt * np.arange(len(xy)), np.column_stack([xy, th]))


def wiggly(n=400, seed=0):
    rng = np.random.default_rng(seed)
    th = np.cumsum(rng.normal(0, 0.05, n))
    xy = np.cumsum(np.column_stack([np.cos(th), np.sin(th)]), axis=0)
    return traj(xy, th)


def test_ate_examples():
    gt = wiggly()
    assert ate(gt, gt).mean == 0.0 and ate(gt, gt).std == 0.0
    shifted = Trajectory(gt.t_us, gt.poses + [3.0, 4.0, 0.0])
    r = ate(shifted, gt)
    assert r.mean == pytest.approx(5.0) and r.std == pytest.approx(0.0, abs=1e-12)
    two = ate(traj([[1, 0], [0, 3]]), traj([[0, 0], [0, 0]]))
    assert (two.mean, two.std) == (pytest.approx(2.0), pytest.approx(1.0))


def test_ate_association():
    gt = traj([[0, 0], [1, 0], [2, 0]])
    est = Trajectory([40_000, 160_000, 900_000], [[0, 0, 0], [2, 0, 0], [5, 5, 0]])
    i, j = associate(est, gt)
    assert i.tolist() == [0, 1] and j.tolist() == [0, 2]
    r = ate(est, gt)
    assert r.matched == 2 and r.dropped == 1
    # a stamp halfway between two samples pairs with the earlier one
    i, j = associate(Trajectory([50_000], [[0, 0, 0]]), gt)
    assert j.tolist() == [0]
    with pytest.raises(EvaluationError):
        ate(Trajectory([10**9], [[0, 0, 0]]), gt)
    with pytest.raises(EvaluationError):
        Trajectory([2, 1], [[0, 0, 0], [0, 0, 0]])


@settings(max_examples=20)
@given(st.integers(-10**9, 10**9))
def test_ate_time_shift_invariance(shift):
    gt = wiggly(50)
    est = Trajectory(gt.t_us + 7, gt.poses + [0.5, -0.2, 0.0])
    a = ate(est, gt)
    b = ate(Trajectory(est.t_us + shift, est.poses), Trajectory(gt.t_us + shift, gt.poses))
    assert (a.mean, a.std) == (b.mean, b.std)


def rigid(t: Trajectory, x, y, th):
    c, s = math.cos(th), math.sin(th)
    p = t.poses
    out = np.column_stack([x + c * p[:, 0] - s * p[:, 1], y + s * p[:, 0] + c * p[:, 1], p[:, 2] + th])
    return Trajectory(t.t_us, out)


def test_relative_errors_examples():
    gt = wiggly()
    assert relative_errors(gt, gt) == (0.0, 0.0)
    et, er = relative_errors(rigid(gt, 12.0, -7.0, 0.8), gt)
    assert et == pytest.approx(0.0, abs=1e-9) and er == pytest.approx(0.0, abs=1e-9)
    line = traj(np.column_stack([np.arange(300.0), np.zeros(300)]))
    stretched = traj(np.column_stack([1.01 * np.arange(300.0), np.zeros(300)]))
    et, er = relative_errors(stretched, line)
    assert et == pytest.approx(1.0, abs=1e-6) and er == 0.0
    with pytest.raises(EvaluationError):
        relative_errors(traj([[0, 0], [10, 0]]), traj([[0, 0], [10, 0]]))


@settings(max_examples=20)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-math.pi, math.pi))
def test_relative_errors_rigid_invariance(x, y, th):
    gt = wiggly(300, seed=3)
    et, er = relative_errors(rigid(gt, x, y, th), gt)
    assert et < 1e-9 and er < 1e-6


def test_intersection_prf_examples():
    ref = IntersectionReference(np.array([[0, 0], [100, 0], [0, 100], [100, 100]], float))
    assert intersection_prf(ref.positions, ref) == PRF(1.0, 1.0, 1.0)
    est = np.array([[10, 0], [100, 30], [0, 120], [300, 300]], float)
    r = intersection_prf(est, ref)
    assert (r.precision, r.recall) == (0.75, 0.75) and r.f1 == pytest.approx(0.75)
    assert intersection_prf(np.zeros((0, 2)), ref) == PRF(0.0, 0.0, 0.0)
    # two estimates on one reference both count as correct but detect it once
    r = intersection_prf([[1, 1], [2, 2]], ref)
    assert (r.precision, r.recall) == (1.0, 0.25)


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_intersection_prf_bounds(seed):
    rng = np.random.default_rng(seed)
    est = rng.uniform(0, 300, (rng.integers(0, 8), 2))
    ref = rng.uniform(0, 300, (rng.integers(1, 8), 2))
    r = intersection_prf(est, ref)
    assert 0 <= r.precision <= 1 and 0 <= r.recall <= 1 and r.f1 <= max(r.precision, r.recall) + 1e-12
    assert intersection_prf(est, ref) == r


class Est:
    def __init__(self, label, box):
        self.class_label, self.world_aabb = label, box


def test_object_prf_examples():
    boxes = [Box((0, 0, 0), (1, 1, 1)), Box((5, 5, 0), (6, 7, 2))]
    gt = [GroundTruthObject("pole", boxes[0]), GroundTruthObject("sign", boxes[1])]
    assert object_prf([Est(g.class_label, g.box) for g in gt], gt) == (1.0, 1.0, 1.0)
    p, r, iou = object_prf([Est("pole", Box((0.5, 0, 0), (1.5, 1, 1)))], gt[:1])
    assert (p, r) == (1.0, 1.0) and iou == pytest.approx(1 / 3, abs=1e-9)
    assert object_prf([Est("tree", boxes[0])], gt[:1]) == (0.0, 0.0, 0.0)
    assert object_prf([Est("tree", boxes[0])], gt[:1], class_strict=False) == (1.0, 1.0, 1.0)
    assert object_prf([], gt) == (0.0, 0.0, 0.0)


def test_reference_from_map():
    # a plus-shaped junction of two streets plus a same-name kink
    segs = [NamedSegment("A", np.array([-100.0, 0]), np.array([0.0, 0])),
            NamedSegment("A", np.array([0.0, 0]), np.array([100.0, 0])),
            NamedSegment("B", np.array([0.0, -100]), np.array([0.0, 0])),
            NamedSegment("B", np.array([0.0, 0]), np.array([0.0, 100])),
            NamedSegment("C", np.array([100.0, 0]), np.array([100.0, 50])),
            NamedSegment("C", np.array([100.0, 50]), np.array([150.0, 50]))]
    straight = np.column_stack([np.arange(-90.0, 91.0, 2.0), np.zeros(91)])
    ref = reference_from_map(segs, [straight])
    assert len(ref.positions) == 2 and ref.scope is Scope.ALL
    assert not np.any(np.all(np.isclose(ref.positions, [100.0, 50.0]), axis=1))
    assert len(reference_from_map(segs, [straight], Scope.TURNED).positions) == 0
    turn = np.vstack([np.column_stack([np.arange(-90.0, 1.0, 2.0), np.zeros(46)]),
                      np.column_stack([np.zeros(45), np.arange(2.0, 91.0, 2.0)])])
    np.testing.assert_allclose(reference_from_map(segs, [turn], Scope.TURNED).positions, [[0.0, 0.0]])
    far = straight + [0.0, 20.0]
    assert len(reference_from_map(segs[:4], [far]).positions) == 0
