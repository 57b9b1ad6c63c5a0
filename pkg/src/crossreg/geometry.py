"""Core geometry: rigid transforms, sampling, and exact spatial queries.

Point clouds are plain float64 arrays of shape (n, 3). Every function here is
pure and deterministic: identical inputs give bit-identical outputs, ties are
always broken by the lowest point index, and nothing reorders a cloud
silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

Points = NDArray[np.float64]

_ORTHO_TOL = 1e-9


def as_points(data) -> Points:
    """Validate and convert array-like input to an (n, 3) float64 cloud.

    Rejects NaN/Inf coordinates and wrong shapes. An empty input becomes a
    (0, 3) array.
    """
    pts = np.asarray(data, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim == 1 and pts.shape[0] == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (n, 3), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("point cloud contains NaN or Inf coordinates")
    return pts


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: x -> rotation @ x + translation.

    The rotation must be orthonormal with determinant +1 (checked at
    construction to 1e-9).
    """

    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.isfinite(rot).all() or not np.isfinite(tra).all():
            raise ValueError("transform contains non-finite entries")
        if np.abs(rot.T @ rot - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: Points) -> Points:
        return apply_transform(self, points)


def apply_transform(transform: RigidTransform, cloud: Points) -> Points:
    """Apply a rigid transform to every point; order and length preserved."""
    pts = as_points(cloud)
    return pts @ transform.rotation.T + transform.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying b first, then a."""
    return RigidTransform(a.rotation @ b.rotation,
                          a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    """Inverse motion: apply(invert(t), apply(t, x)) == x."""
    rot_inv = t.rotation.T
    return RigidTransform(rot_inv, -rot_inv @ t.translation)


def voxel_downsample(cloud: Points, voxel: float) -> Points:
    """Collapse each occupied voxel to the centroid of its member points.

    The grid is anchored at the origin; a point belongs to cell
    floor(coord / voxel) per axis. Output cells are ordered by the lowest
    original index among their members, so results are reproducible.
    """
    if voxel <= 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    pts = as_points(cloud)
    if len(pts) == 0:
        return pts
    cells = np.floor(pts / voxel).astype(np.int64)
    _, first_idx, inverse = np.unique(cells, axis=0, return_index=True,
                                      return_inverse=True)
    n_cells = len(first_idx)
    sums = np.zeros((n_cells, 3))
    np.add.at(sums, inverse, pts)
    counts = np.bincount(inverse, minlength=n_cells).astype(np.float64)
    centroids = sums / counts[:, None]
    order = np.argsort(first_idx, kind="stable")
    return centroids[order]


def farthest_point_sample(cloud: Points, m: int) -> NDArray[np.int64]:
    """Greedy farthest-point sampling, fully deterministic.

    Seed = the lowest-index point among those farthest from the centroid.
    Each later pick maximizes the minimum distance to the selected set;
    exact ties go to the lower index (argmax returns the first maximum).
    Comparisons use squared distances.
    """
    pts = as_points(cloud)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"sample count {m} out of range [1, {n}]")
    centroid = pts.mean(axis=0)
    d2_centroid = ((pts - centroid) ** 2).sum(axis=1)
    selected = np.empty(m, dtype=np.int64)
    selected[0] = int(np.argmax(d2_centroid))
    min_d2 = ((pts - pts[selected[0]]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        np.minimum(min_d2, ((pts - pts[nxt]) ** 2).sum(axis=1), out=min_d2)
    return selected


@dataclass(frozen=True)
class SpatialIndex:
    """Read-only k-d tree over a point cloud with exact, tie-stable queries.

    Queries return exactly what a brute-force distance scan would: k nearest
    neighbors in ascending distance order with equal distances resolved by
    the lower index.
    """

    points: Points
    _tree: cKDTree = field(repr=False)

    @classmethod
    def build(cls, cloud: Points) -> "SpatialIndex":
        pts = as_points(cloud)
        if len(pts) == 0:
            raise ValueError("cannot index an empty point cloud")
        return cls(points=pts, _tree=cKDTree(pts))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        return self._tree


def knn_query(index: SpatialIndex, query: Points, k: int
              ) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Exact k nearest neighbors of a single query point.

    Returns (indices, distances) sorted ascending by distance, ties by lower
    index. If k exceeds the cloud size, the whole cloud is returned sorted.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    n = len(index)
    k_eff = min(k, n)
    # Over-query until the boundary distance is strictly exceeded, so that
    # groups of tied distances straddling the k-th slot are all visible.
    probe = min(k_eff + 1, n)
    while True:
        dist, idx = index.tree.query(q, k=probe)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx)
        if probe == n or dist[-1] > dist[k_eff - 1]:
            break
        probe = min(probe * 2, n)
    candidates = idx[dist <= dist[k_eff - 1]]
    cand_d = np.linalg.norm(index.points[candidates] - q, axis=1)
    order = np.lexsort((candidates, cand_d))[:k_eff]
    chosen = candidates[order]
    return chosen.astype(np.int64), cand_d[order]


def radius_query(index: SpatialIndex, query: Points, radius: float
                 ) -> NDArray[np.int64]:
    """All indices within `radius` of the query point, in ascending index order."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    found = index.tree.query_ball_point(q, r=radius)
    return np.sort(np.asarray(found, dtype=np.int64))


def interpolate_features(src_pts: Points, src_feats: NDArray[np.float64],
                         dst_pts: Points) -> NDArray[np.float64]:
    """Carry per-point features onto a new set of positions.

    Each destination row is the inverse-distance-weighted mean of its three
    nearest source rows with weights 1/(d + 1e-8); a destination point that
    coincides exactly with a source point copies that source row.
    """
    src = as_points(src_pts)
    feats = np.asarray(src_feats, dtype=np.float64)
    dst = as_points(dst_pts)
    if len(src) == 0:
        raise ValueError("cannot interpolate from an empty source cloud")
    if len(src) != len(feats):
        raise ValueError(f"{len(src)} source points but {len(feats)} feature rows")
    if len(dst) == 0:
        return np.zeros((0, feats.shape[1]))

    k = min(3, len(src))
    dist, idx = cKDTree(src).query(dst, k=k)
    dist = dist.reshape(len(dst), k)
    idx = idx.reshape(len(dst), k)

    weights = 1.0 / (dist + 1e-8)
    weights /= weights.sum(axis=1, keepdims=True)
    out = np.einsum("nk,nkd->nd", weights, feats[idx])

    exact = dist[:, 0] == 0.0
    if exact.any():
        out[exact] = feats[idx[exact, 0]]
    return out


def median_nn_spacing(cloud: Points) -> float:
    """Median distance from each point to its nearest other point."""
    pts = as_points(cloud)
    if len(pts) < 2:
        raise ValueError("need at least 2 points to measure spacing")
    dist, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(dist[:, 1]))
