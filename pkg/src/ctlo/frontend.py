"""Frame preprocessing and the sparse-voxel local map.

Keypoints come from a 1.5 m voxel grid with one randomly chosen point per
voxel; the map is a 1 m voxel hash holding at most 20 world-frame points per
cell and cropped to a radius around the latest vehicle position. Each
keypoint is associated to its nearest map point, whose 20 nearest map
neighbours give the local plane through PCA.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateNeighborhood, EmptyFrame, EmptyMap, TimestampOutOfRange

log = logging.getLogger(__name__)

MIN_NEIGHBORS = 5


@dataclass(frozen=True)
class LidarPoint:
    position: np.ndarray  # xyz in the sensor frame
    timestamp: float
    doppler: Optional[float] = None


@dataclass(eq=False)
class LidarFrame:
    """One full sweep. ``doppler`` holds NaN where a point has no Doppler return."""

    index: int
    start_time: float
    end_time: float
    points: np.ndarray
    timestamps: np.ndarray
    doppler: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if self.doppler is not None:
            self.doppler = np.asarray(self.doppler, dtype=float).reshape(-1)
            if self.doppler.shape[0] != self.points.shape[0]:
                raise ValueError("doppler length does not match point count")
        if self.timestamps.shape[0] != self.points.shape[0]:
            raise ValueError("timestamp length does not match point count")
        if not self.start_time < self.end_time:
            raise ValueError("frame start_time must precede end_time")
        if len(self) and (self.timestamps.min() < self.start_time or self.timestamps.max() > self.end_time):
            raise TimestampOutOfRange(f"frame {self.index}: point timestamps outside [start, end]")

    def __len__(self):
        return self.points.shape[0]

    @property
    def has_doppler(self) -> bool:
        return self.doppler is not None and bool(np.any(np.isfinite(self.doppler)))

    def point(self, i: int) -> LidarPoint:
        d = None
        if self.doppler is not None and np.isfinite(self.doppler[i]):
            d = float(self.doppler[i])
        return LidarPoint(self.points[i].copy(), float(self.timestamps[i]), d)

    def subset(self, idx) -> "LidarFrame":
        idx = np.asarray(idx)
        return LidarFrame(
            self.index,
            self.start_time,
            self.end_time,
            self.points[idx],
            self.timestamps[idx],
            None if self.doppler is None else self.doppler[idx],
        )

    def without_doppler(self) -> "LidarFrame":
        return LidarFrame(self.index, self.start_time, self.end_time, self.points, self.timestamps, None)

    def range_limited(self, limit: float) -> "LidarFrame":
        keep = np.linalg.norm(self.points, axis=1) <= limit
        return self.subset(np.flatnonzero(keep))


def voxel_keys(points, size: float) -> np.ndarray:
    """Integer voxel coordinates, floor toward -inf on every axis."""
    return np.floor(np.asarray(points, dtype=float) / size).astype(np.int64)


_OFF = np.int64(1 << 20)


def pack_keys(ijk: np.ndarray) -> np.ndarray:
    ijk = ijk + _OFF
    return (ijk[:, 0] << 42) | (ijk[:, 1] << 21) | ijk[:, 2]


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return x


def _group_by_voxel(points, size):
    keys = pack_keys(voxel_keys(points, size))
    order = np.argsort(keys, kind="stable")
    uniq, start, count = np.unique(keys[order], return_index=True, return_counts=True)
    return order, uniq, start, count


def extract_keypoints(frame: LidarFrame, grid: float = 1.5, rng_seed: int = 0) -> LidarFrame:
    """Keep one random point per ``grid``-sized voxel.

    The pick inside a voxel is a hash of (voxel key, seed), so it does not
    depend on what happens in other voxels; output keeps acquisition order.
    """
    if grid <= 0:
        raise ValueError("grid must be positive")
    if len(frame) == 0:
        raise EmptyFrame(f"frame {frame.index} has no points")
    order, uniq, start, count = _group_by_voxel(frame.points, grid)
    with np.errstate(over="ignore"):
        h = _mix64(uniq.astype(np.uint64) ^ _mix64(np.full(uniq.shape, rng_seed, dtype=np.uint64)))
    pick = (h % count.astype(np.uint64)).astype(np.int64)
    chosen = np.sort(order[start + pick])
    return frame.subset(chosen)


def grid_subsample(points, size: float) -> np.ndarray:
    """Indices of the first point (in input order) of every voxel."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    order, _, start, _ = _group_by_voxel(points, size)
    return np.sort(order[start])


class LocalMap:
    """Sparse voxel hash of world-frame points in insertion order."""

    def __init__(self, voxel_size: float = 1.0, max_points_per_voxel: int = 20, max_radius: float = 100.0):
        self.voxel_size = float(voxel_size)
        self.max_points_per_voxel = int(max_points_per_voxel)
        self.max_radius = float(max_radius)
        self.center = np.zeros(3)
        self._points = np.zeros((0, 3))
        self._keys = np.zeros(0, dtype=np.int64)
        self._counts: dict[int, int] = {}
        self._tree: Optional[cKDTree] = None

    def __len__(self):
        return self._points.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self._points

    def voxel_counts(self) -> dict:
        return dict(self._counts)

    def insert(self, world_points) -> int:
        """Append points voxel by voxel until each voxel is full. Returns count added."""
        pts = np.asarray(world_points, dtype=float).reshape(-1, 3)
        if pts.shape[0] == 0:
            return 0
        keys = pack_keys(voxel_keys(pts, self.voxel_size))
        order = np.argsort(keys, kind="stable")
        uniq, start, count = np.unique(keys[order], return_index=True, return_counts=True)
        existing = np.array([self._counts.get(int(k), 0) for k in uniq], dtype=np.int64)
        allowed = np.maximum(self.max_points_per_voxel - existing, 0)
        rank = np.arange(order.size) - np.repeat(start, count)
        accept = np.zeros(pts.shape[0], dtype=bool)
        accept[order[rank < np.repeat(allowed, count)]] = True
        for k, n_new, n_old in zip(uniq.tolist(), np.minimum(count, allowed).tolist(), existing.tolist()):
            if n_new:
                self._counts[k] = n_old + n_new
        self._points = np.concatenate([self._points, pts[accept]])
        self._keys = np.concatenate([self._keys, keys[accept]])
        self._tree = None
        return int(accept.sum())

    def crop(self, center=None) -> int:
        """Drop points farther than ``max_radius`` from the center. Returns count removed."""
        if center is not None:
            self.center = np.asarray(center, dtype=float).reshape(3)
        keep = np.linalg.norm(self._points - self.center, axis=1) <= self.max_radius
        removed = int((~keep).sum())
        if removed:
            self._points = self._points[keep]
            self._keys = self._keys[keep]
            uniq, cnt = np.unique(self._keys, return_counts=True)
            self._counts = dict(zip(uniq.tolist(), cnt.tolist()))
            self._tree = None
        return removed

    def insert_frame(self, world_points, center=None) -> None:
        self.insert(world_points)
        self.crop(center)

    def tree(self) -> cKDTree:
        if len(self) == 0:
            raise EmptyMap("local map is empty")
        if self._tree is None:
            self._tree = cKDTree(self._points)
        return self._tree

    def nearest_neighbors(self, query, count: int) -> np.ndarray:
        """The ``count`` closest stored points, ascending distance, ties by insertion order."""
        if len(self) == 0:
            raise EmptyMap("local map is empty")
        k = min(int(count), len(self))
        q = np.asarray(query, dtype=float).reshape(3)
        # over-fetch a little so ties at the cut are resolved by index
        kk = min(k + 4, len(self))
        dist, idx = self.tree().query(q, k=kk)
        dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
        exact = np.linalg.norm(self._points[idx] - q, axis=1)
        order = np.lexsort((idx, exact))[:k]
        return self._points[idx[order]]


def insert_frame(local_map: LocalMap, world_points, center=None) -> None:
    local_map.insert_frame(world_points, center)


def nearest_neighbors(local_map: LocalMap, query, count: int) -> np.ndarray:
    return local_map.nearest_neighbors(query, count)


def plane_fit(neighbors):
    """PCA plane through a neighbourhood.

    Returns (normal, s1, s2, s3, alpha) with the covariance eigenvalues
    descending and alpha = (s2 - s3) / s1.
    """
    nb = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    if nb.shape[0] < MIN_NEIGHBORS:
        raise DegenerateNeighborhood(f"need at least {MIN_NEIGHBORS} neighbours, got {nb.shape[0]}")
    normal, eig, alpha, ok = _pca_planes(nb[None])
    if not ok[0]:
        raise DegenerateNeighborhood("all neighbours coincide")
    return normal[0], eig[0, 0], eig[0, 1], eig[0, 2], alpha[0]


def _pca_planes(nbrs: np.ndarray):
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("pki,pkj->pij", centered, centered) / nbrs.shape[1]
    w, V = np.linalg.eigh(cov)
    w = np.clip(w, 0.0, None)
    eig = w[:, ::-1]  # descending
    normal = V[:, :, 0]
    s1 = eig[:, 0]
    scale = np.maximum(np.abs(nbrs).max(axis=(1, 2)), 1.0)
    ok = s1 > 1e-14 * scale**2
    alpha = np.where(ok, (eig[:, 1] - eig[:, 2]) / np.where(ok, s1, 1.0), 0.0)
    return normal, eig, np.clip(alpha, 0.0, 1.0), ok


@dataclass(frozen=True, eq=False)
class Correspondence:
    query: LidarPoint
    map_point: np.ndarray
    normal: np.ndarray
    alpha: float
    eigvals: tuple = field(default=(0.0, 0.0, 0.0))


@dataclass(eq=False)
class Associations:
    """Batched keypoint-to-plane matches; rows index into the query arrays."""

    index: np.ndarray
    map_points: np.ndarray
    normals: np.ndarray
    alpha: np.ndarray
    eigvals: np.ndarray

    def __len__(self):
        return self.index.shape[0]


def associate(local_map: LocalMap, world_points, knn: int = 20, max_distance: float = 2.0,
              min_neighbors: int = MIN_NEIGHBORS) -> Associations:
    """Nearest map point for each query plus the PCA plane of its neighbourhood."""
    pts = np.asarray(world_points, dtype=float).reshape(-1, 3)
    empty = Associations(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))
    if len(local_map) < min_neighbors or pts.shape[0] == 0:
        return empty
    tree = local_map.tree()
    dist, nn = tree.query(pts, k=1)
    sel = np.flatnonzero(dist <= max_distance)
    if sel.size == 0:
        return empty
    anchors = local_map.points[nn[sel]]
    k = min(knn, len(local_map))
    _, nbr = tree.query(anchors, k=k)
    nbr = nbr.reshape(sel.size, k)
    normal, eig, alpha, ok = _pca_planes(local_map.points[nbr])
    return Associations(sel[ok], anchors[ok], normal[ok], alpha[ok], eig[ok])
