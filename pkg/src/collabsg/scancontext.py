"""Polar max-height descriptors for place recognition across agents.

A scan is binned into ``n_ring x n_sector`` polar cells around the sensor;
each cell stores the maximum point height. Yaw changes of the sensor become
cyclic column shifts, which the distance function searches over.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ParameterError, PointCloud


@dataclass(frozen=True)
class ScanContextConfig:
    n_ring: int = 20
    n_sector: int = 60
    r_max: float = 80.0
    # added to z before binning; heights below zero are clamped
    height_offset: float = 0.0
    n_ringkey: int = 10
    d_sc: float = 0.25


@dataclass(frozen=True)
class ScanDescriptor:
    grid: np.ndarray  # (n_ring, n_sector)

    @property
    def ring_key(self) -> np.ndarray:
        return (self.grid > 0).mean(axis=1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @classmethod
    def zeros(cls, cfg: ScanContextConfig = ScanContextConfig()) -> "ScanDescriptor":
        return cls(np.zeros((cfg.n_ring, cfg.n_sector)))


def encode(cloud: PointCloud, cfg: ScanContextConfig = ScanContextConfig()) -> ScanDescriptor:
    grid = np.zeros((cfg.n_ring, cfg.n_sector))
    if len(cloud) == 0:
        return ScanDescriptor(grid)
    pts = cloud.points
    r = np.hypot(pts[:, 0], pts[:, 1])
    keep = r <= cfg.r_max
    pts, r = pts[keep], r[keep]
    ring = np.minimum((r / (cfg.r_max / cfg.n_ring)).astype(np.int64), cfg.n_ring - 1)
    bearing = np.arctan2(pts[:, 1], pts[:, 0])
    sector = np.minimum(((bearing + math.pi) / (2 * math.pi) * cfg.n_sector).astype(np.int64),
                        cfg.n_sector - 1)
    z = np.maximum(pts[:, 2] + cfg.height_offset, 0.0)
    np.maximum.at(grid, (ring, sector), z)
    return ScanDescriptor(grid)


def descriptor_distance(a: ScanDescriptor, b: ScanDescriptor) -> tuple[float, int]:
    """Minimum column-shift cosine distance and the shift achieving it.

    A shift ``s`` means ``b`` matches ``a`` rolled by ``s`` columns, i.e. a
    bearing ``phi`` in ``a`` appears at ``phi + s * 2pi / n_sector`` in ``b``.
    """
    if a.shape != b.shape:
        raise ParameterError(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    A, B = a.grid, b.grid
    n_sector = A.shape[1]
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    # rolled[s, :, j] = B[:, (j + s) % n]
    cols = (np.arange(n_sector)[None, :] + np.arange(n_sector)[:, None]) % n_sector
    Bs = B[:, cols]  # (n_ring, shift, col)
    nbs = nb[cols]
    dots = np.einsum("rj,rsj->sj", A, Bs)
    valid = (na[None, :] > 0) & (nbs > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        sim = np.where(valid, dots / (na[None, :] * nbs), 0.0)
    counts = valid.sum(axis=1)
    dist = np.where(counts > 0, np.sum(np.where(valid, 1.0 - sim, 0.0), axis=1) / np.maximum(counts, 1), 1.0)
    s = int(np.argmin(dist))
    return float(max(dist[s], 0.0)), s


def shift_to_yaw(shift: int, n_sector: int = 60) -> float:
    """Yaw (radians) of the transform mapping query points into the match frame."""
    yaw = shift * 2.0 * math.pi / n_sector
    return math.atan2(math.sin(yaw), math.cos(yaw))


@dataclass
class DescriptorIndex:
    """Exact ring-key nearest-neighbour index refined by descriptor distance."""

    cfg: ScanContextConfig = field(default_factory=ScanContextConfig)
    entries: dict = field(default_factory=dict)
    _tree: cKDTree | None = field(default=None, repr=False)
    _handles: list = field(default_factory=list, repr=False)
    _order: dict = field(default_factory=dict, repr=False)
    _keys: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, handle: Hashable, desc: ScanDescriptor) -> None:
        if handle in self.entries:
            raise KeyError(f"handle {handle!r} already indexed")
        self._order[handle] = len(self.entries)
        self.entries[handle] = desc
        self._keys[handle] = desc.ring_key
        self._tree = None

    def _ensure_tree(self):
        if self._tree is None and self.entries:
            self._handles = list(self.entries)
            keys = np.array([self._keys[h] for h in self._handles])
            self._tree = cKDTree(keys)

    def query(self, q: ScanDescriptor, k: int = 1,
              exclude: Callable[[Hashable], bool] | None = None,
              d_sc: float | None = None, n_ringkey: int | None = None) -> list[tuple[Hashable, float, int]]:
        """Best ``k`` entries with descriptor distance at most ``d_sc``.

        ``n_ringkey`` ring-key neighbours that survive ``exclude`` are
        refined with the full descriptor distance.
        """
        d_sc = self.cfg.d_sc if d_sc is None else d_sc
        n_ringkey = self.cfg.n_ringkey if n_ringkey is None else n_ringkey
        if not self.entries or k <= 0:
            return []
        self._ensure_tree()
        n = len(self._handles)
        cand = []
        fetch = min(n, n_ringkey)
        while True:
            dists, idx = self._tree.query(q.ring_key, k=fetch)
            idx = np.atleast_1d(idx)
            dists = np.atleast_1d(dists)
            # stable tie-break by insertion order keeps results deterministic
            order = np.lexsort((idx, dists))
            cand = [self._handles[i] for i in idx[order]
                    if exclude is None or not exclude(self._handles[i])]
            if len(cand) >= n_ringkey or fetch >= n:
                break
            fetch = min(n, fetch * 2)
        cand = cand[:n_ringkey]
        scored = []
        for h in cand:
            d, s = descriptor_distance(q, self.entries[h])
            if d <= d_sc:
                scored.append((h, d, s))
        scored.sort(key=lambda e: (e[1], self._order[e[0]]))
        return scored[:k]
