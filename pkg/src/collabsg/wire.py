"""Little-endian binary records exchanged between agents, server and disk.

Cloud:        u32 count, then count * (f32 x, f32 y, f32 z)
Observation:  u16 agent, u32 keyframe, u64 timestamp_us, u8 kind,
              i64 instance (-1 = none), u16 len + UTF-8 class, cloud
Keyframe:     u32 body length, then u16 agent, u32 keyframe, u64 timestamp_us,
              3 * f64 pose, cloud (dynamic-free), cloud (raw),
              n_ring * n_sector f32 descriptor, u32 count + observations
Scan:         u64 timestamp_us, cloud
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Iterator

import numpy as np

from .frontend import Keyframe
from .geometry import Frame, PointCloud, Pose2
from .perception import ObjectKind, ObjectObservation
from .scancontext import ScanContextConfig, ScanDescriptor


class WireError(ValueError):
    pass


_OBS_HEAD = struct.Struct("<HIQBq")
_KF_HEAD = struct.Struct("<HIQddd")


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = memoryview(buf)
        self.pos = pos

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise WireError("truncated record")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


def encode_cloud(cloud: PointCloud) -> bytes:
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    return struct.pack("<I", len(pts)) + pts.tobytes()


def _decode_cloud(r: _Reader, frame: Frame) -> PointCloud:
    (n,) = r.unpack(struct.Struct("<I"))
    pts = np.frombuffer(r.take(12 * n), dtype="<f4").reshape(n, 3).astype(np.float64)
    return PointCloud(pts, frame)


def encode_observation(obs: ObjectObservation) -> bytes:
    label = obs.class_label.encode("utf-8")
    inst = -1 if obs.instance_id is None else int(obs.instance_id)
    return (_OBS_HEAD.pack(obs.agent_id, obs.keyframe_id, obs.timestamp_us, int(obs.kind), inst)
            + struct.pack("<H", len(label)) + label + encode_cloud(obs.points))


def _decode_observation(r: _Reader) -> ObjectObservation:
    agent, kf, ts, kind, inst = r.unpack(_OBS_HEAD)
    (n,) = r.unpack(struct.Struct("<H"))
    label = bytes(r.take(n)).decode("utf-8")
    cloud = _decode_cloud(r, Frame.KEYFRAME)
    return ObjectObservation(agent, kf, ts, label, ObjectKind(kind), cloud, None if inst < 0 else inst)


def decode_observations(buf: bytes) -> list[ObjectObservation]:
    r = _Reader(buf)
    out = []
    while r.pos < len(r.buf):
        out.append(_decode_observation(r))
    return out


def encode_keyframe(kf: Keyframe) -> bytes:
    p = kf.odom_pose
    body = bytearray(_KF_HEAD.pack(kf.agent_id, kf.keyframe_id, kf.timestamp_us, p.x, p.y, p.theta))
    body += encode_cloud(kf.cloud)
    body += encode_cloud(kf.cloud_raw)
    body += np.ascontiguousarray(kf.descriptor.grid, dtype="<f4").tobytes()
    body += struct.pack("<I", len(kf.observations))
    for o in kf.observations:
        body += encode_observation(o)
    return struct.pack("<I", len(body)) + bytes(body)


def decode_keyframe(buf: bytes, sc: ScanContextConfig = ScanContextConfig()) -> Keyframe:
    r = _Reader(buf)
    (length,) = r.unpack(struct.Struct("<I"))
    if length != len(buf) - 4:
        raise WireError(f"length prefix {length} does not match payload {len(buf) - 4}")
    agent, kf_id, ts, x, y, th = r.unpack(_KF_HEAD)
    cloud = _decode_cloud(r, Frame.KEYFRAME)
    raw = _decode_cloud(r, Frame.KEYFRAME)
    n = sc.n_ring * sc.n_sector
    grid = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(sc.n_ring, sc.n_sector).astype(np.float64)
    (n_obs,) = r.unpack(struct.Struct("<I"))
    obs = [_decode_observation(r) for _ in range(n_obs)]
    if r.pos != len(r.buf):
        raise WireError("trailing bytes after keyframe")
    return Keyframe(agent, kf_id, ts, Pose2(x, y, th), cloud, raw, ScanDescriptor(grid), obs)


def split_keyframes(stream: bytes) -> Iterator[bytes]:
    """Yield length-prefixed keyframe records from a concatenated stream."""
    pos = 0
    while pos < len(stream):
        if pos + 4 > len(stream):
            raise WireError("truncated length prefix")
        (n,) = struct.unpack_from("<I", stream, pos)
        yield stream[pos:pos + 4 + n]
        pos += 4 + n


def write_scan(fh: BinaryIO, t_us: int, cloud: PointCloud) -> None:
    fh.write(struct.pack("<Q", t_us) + encode_cloud(cloud))


def read_scans(buf: bytes) -> list[tuple[int, PointCloud]]:
    r = _Reader(buf)
    out = []
    while r.pos < len(r.buf):
        (t,) = r.unpack(struct.Struct("<Q"))
        out.append((t, _decode_cloud(r, Frame.SENSOR)))
    return out
