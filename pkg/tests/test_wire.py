import io
import struct

import numpy as np
import pytest

from collabsg.frontend import Keyframe
from collabsg.geometry import Frame, PointCloud, Pose2
from collabsg.perception import ObjectKind, ObjectObservation
from collabsg.scancontext import encode
from collabsg.wire import (WireError, decode_keyframe, decode_observations, encode_cloud, encode_keyframe,
                           encode_observation, read_scans, split_keyframes, write_scan)


def make_kf(agent=1, kf_id=7, n=50, seed=0):
    rng = np.random.default_rng(seed)
    raw = PointCloud(rng.uniform(-20, 20, (n, 3)).astype(np.float32).astype(float), Frame.KEYFRAME)
    cloud = raw.subset(np.arange(n) % 3 != 0)
    obs = [
        ObjectObservation(agent, kf_id, 123, "traffic light", ObjectKind.STATIC, raw.subset(slice(0, 5))),
        ObjectObservation(agent, kf_id, 123, "café sign", ObjectKind.DYNAMIC, raw.subset(slice(5, 9)), 42),
    ]
    return Keyframe(agent, kf_id, 123_456_789_012, Pose2(1.25, -3.5, 0.75), cloud, raw, encode(cloud), obs)


def test_keyframe_roundtrip():
    kf = make_kf()
    buf = encode_keyframe(kf)
    assert struct.unpack_from("<I", buf)[0] == len(buf) - 4
    out = decode_keyframe(buf)
    assert (out.agent_id, out.keyframe_id, out.timestamp_us) == (1, 7, 123_456_789_012)
    assert out.odom_pose == kf.odom_pose
    np.testing.assert_array_equal(out.cloud.points, kf.cloud.points)
    np.testing.assert_array_equal(out.cloud_raw.points, kf.cloud_raw.points)
    np.testing.assert_allclose(out.descriptor.grid, kf.descriptor.grid, rtol=1e-6)
    assert [o.class_label for o in out.observations] == ["traffic light", "café sign"]
    assert out.observations[0].instance_id is None and out.observations[1].instance_id == 42
    assert out.observations[1].kind == ObjectKind.DYNAMIC


def test_keyframe_size_is_exact():
    kf = make_kf(n=30)
    label_bytes = len("traffic light".encode()) + len("café sign".encode())
    obs_size = 2 * (2 + 4 + 8 + 1 + 8 + 2 + 4) + label_bytes + 12 * (5 + 4)
    expected = 4 + (2 + 4 + 8 + 24) + (4 + 12 * len(kf.cloud)) + (4 + 12 * 30) + 4 * 20 * 60 + 4 + obs_size
    assert len(encode_keyframe(kf)) == expected


def test_stream_split_and_errors():
    a, b = encode_keyframe(make_kf(kf_id=1)), encode_keyframe(make_kf(kf_id=2, seed=1))
    parts = list(split_keyframes(a + b))
    assert parts == [a, b]
    with pytest.raises(WireError):
        decode_keyframe(a[:-3])
    with pytest.raises(WireError):
        list(split_keyframes(a + b"\x01"))
    with pytest.raises(WireError):
        decode_keyframe(a + b"\x00")


def test_observation_records():
    kf = make_kf()
    buf = b"".join(encode_observation(o) for o in kf.observations)
    out = decode_observations(buf)
    assert len(out) == 2 and out[1].instance_id == 42
    with pytest.raises(WireError):
        decode_observations(buf[:-1])


def test_scan_records():
    fh = io.BytesIO()
    c = PointCloud(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    write_scan(fh, 5, c)
    write_scan(fh, 9, PointCloud())
    out = read_scans(fh.getvalue())
    assert [t for t, _ in out] == [5, 9]
    np.testing.assert_array_equal(out[0][1].points, c.points)
    assert len(out[1][1]) == 0
    assert encode_cloud(c)[:4] == struct.pack("<I", 2)
