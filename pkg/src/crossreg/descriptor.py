"""Density-robust local features.

The extractor builds a farthest-point-sampling pyramid, computes a handcrafted
rotation-invariant descriptor at every level, and at each level fuses three
density variants of the neighborhood (downsampled / smoothed / upsampled) into
one feature row. Fusing across densities is what keeps corresponding points
similar when one cloud is much sparser than the other.

Centers thin out level by level, but neighborhoods are always drawn from the
full-resolution cloud; deeper levels only widen the support radius. Without
this, deep-level descriptors degrade into small-sample noise and stop
matching across clouds of different density.

A feature row concatenates three blocks:
  - histogram of neighbor distances over the support radius,
  - histogram of |cos| angles between neighbor offsets and the neighborhood's
    principal covariance axis (|cos| absorbs the eigenvector sign ambiguity),
  - covariance eigenvalue shape ratios (linearity, planarity, sphericity).
Bins are linearly interpolated so the row is a Lipschitz function of the
input coordinates, and every block is built from distances and eigenvalues
only, so rows are invariant under rigid motion.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .geometry import (Points, SpatialIndex, as_points, farthest_point_sample,
                       interpolate_features, median_nn_spacing)

FeatureMatrix = NDArray[np.float64]

# Support radius defaults to this multiple of the median nearest-neighbor
# spacing when the config leaves it unset.
RADIUS_SPACING_FACTOR = 2.5

_MIN_LEVEL_POINTS = 4
_COINCIDENT_EPS = 1e-12
# Histograms converge well before this many samples; larger neighborhoods
# are thinned by an even stride over the index-sorted neighbor list, which
# keeps the subsample independent of the cloud's orientation.
_MAX_NEIGHBORS = 64


@dataclass(frozen=True)
class DescriptorConfig:
    """Tuning knobs for feature extraction.

    radius None means "resolve from data": 2.5x the median nearest-neighbor
    spacing of the full cloud (for a pair, resolved jointly from the sparser
    cloud so both sides describe the same physical scale).
    """

    dims: int = 32
    radius: float | None = None
    pyramid_ratios: tuple[float, ...] = (1.0, 0.5, 0.25, 0.125)
    down_fraction: float = 0.5
    up_neighbors: int = 2
    multi_density: bool = True

    def __post_init__(self):
        if self.dims < 8:
            raise ValueError(f"descriptor dims must be >= 8, got {self.dims}")
        if self.radius is not None and self.radius <= 0:
            raise ValueError(f"support radius must be positive, got {self.radius}")
        ratios = tuple(float(r) for r in self.pyramid_ratios)
        if len(ratios) < 2:
            raise ValueError("pyramid needs at least 2 levels")
        if any(not 0 < r <= 1 for r in ratios):
            raise ValueError(f"pyramid ratios must lie in (0, 1], got {ratios}")
        if any(b >= a for a, b in zip(ratios, ratios[1:])):
            raise ValueError(f"pyramid ratios must strictly decrease, got {ratios}")
        if not 0 < self.down_fraction < 1:
            raise ValueError(f"down_fraction must be in (0, 1), got {self.down_fraction}")
        if self.up_neighbors < 1:
            raise ValueError(f"up_neighbors must be >= 1, got {self.up_neighbors}")
        object.__setattr__(self, "pyramid_ratios", ratios)


@dataclass(frozen=True)
class DensityPyramid:
    """Progressively FPS-downsampled levels of one cloud.

    parent_indices[k] maps level-k points into level k-1 (None for level 0);
    base_indices[k] maps level-k points into the original cloud.
    """

    clouds: tuple[Points, ...]
    parent_indices: tuple[NDArray[np.int64] | None, ...]
    base_indices: tuple[NDArray[np.int64], ...]

    @property
    def num_levels(self) -> int:
        return len(self.clouds)


def support_counts(cloud: Points, radius: float) -> NDArray[np.int64]:
    """Number of points (self included) within `radius` of each point."""
    pts = as_points(cloud)
    if radius <= 0:
        raise ValueError(f"support radius must be positive, got {radius}")
    lists = cKDTree(pts).query_ball_point(pts, r=radius)
    return np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(pts))


def center_eligibility(cloud: Points, radius: float) -> NDArray[np.bool_]:
    """Points with enough local support to serve as matching centers.

    Isolated clutter has almost no neighbors inside the descriptor radius
    while surface points have dozens, so a low adaptive count threshold
    separates them. Falls back to all-eligible when the split would leave
    too few points.
    """
    counts = support_counts(cloud, radius)
    threshold = max(4, int(np.ceil(0.15 * np.median(counts))))
    mask = counts >= threshold
    if mask.sum() < max(_MIN_LEVEL_POINTS, len(cloud) // 10):
        return np.ones(len(cloud), dtype=bool)
    return mask


def build_density_pyramid(cloud: Points, cfg: DescriptorConfig,
                          level_sizes: tuple[int, ...] | None = None,
                          eligible: NDArray[np.bool_] | None = None
                          ) -> DensityPyramid:
    """Chain farthest-point sampling to the sizes ceil(n * ratio_k).

    `level_sizes` overrides the ratio-derived sizes; the registration
    pipeline uses this to give both clouds of a pair the same per-level
    center counts. `eligible` restricts which level-0 points may become
    centers of the deeper levels (level 0 always keeps the full cloud).
    """
    pts = as_points(cloud)
    n = len(pts)
    if level_sizes is None:
        sizes = [int(np.ceil(n * r)) for r in cfg.pyramid_ratios]
    else:
        if len(level_sizes) != len(cfg.pyramid_ratios):
            raise ValueError(f"{len(level_sizes)} level sizes for "
                             f"{len(cfg.pyramid_ratios)} pyramid levels")
        sizes = [min(int(s), n) for s in level_sizes]

    pool = np.arange(n, dtype=np.int64)
    if eligible is not None:
        if len(eligible) != n:
            raise ValueError("eligibility mask length does not match cloud")
        if eligible.sum() >= _MIN_LEVEL_POINTS:
            pool = np.where(eligible)[0]
            sizes = [sizes[0]] + [min(s, len(pool)) for s in sizes[1:]]

    for level in range(1, len(sizes)):
        if sizes[level] >= sizes[level - 1]:
            sizes[level] = sizes[level - 1] - 1
    for level, size in enumerate(sizes):
        if size < _MIN_LEVEL_POINTS:
            raise ValueError(
                f"cloud of {n} points is too small: pyramid level {level} "
                f"would have {size} < {_MIN_LEVEL_POINTS} points")

    clouds = [pts]
    parents: list[NDArray[np.int64] | None] = [None]
    bases = [np.arange(n, dtype=np.int64)]
    for k, size in enumerate(sizes[1:], start=1):
        if k == 1:
            # level 1 draws from the eligible pool, mapped back to level 0
            sel = pool[farthest_point_sample(pts[pool], size)]
        else:
            sel = farthest_point_sample(clouds[-1], size)
        clouds.append(clouds[-1][sel])
        parents.append(sel)
        bases.append(bases[-1][sel])
    return DensityPyramid(tuple(clouds), tuple(parents), tuple(bases))


# Relative radii at which the covariance shape profile is sampled; the
# profile over scale is what separates edges, corners, and curved patches.
_EIGEN_SCALES = (0.4, 0.7, 1.0)
# Angle histograms are split into an inner and an outer radial shell.
_SHELL_SPLIT = 0.6


def _block_sizes(dims: int) -> tuple[int, int, int, int]:
    """(dist bins, inner angle bins, outer angle bins, eigen scales)."""
    n_scales = len(_EIGEN_SCALES) if dims >= 20 else 1
    rest = dims - 3 * n_scales
    n_dist = (rest + 1) // 2
    n_ang = rest - n_dist
    if n_ang >= 4:
        n_inner = (n_ang + 1) // 2
        n_outer = n_ang - n_inner
    else:
        n_inner, n_outer = n_ang, 0
    return n_dist, n_inner, n_outer, n_scales


def _soft_histogram(values, center_ids, n_centers, n_bins):
    """Accumulate unit mass per sample, linearly split between adjacent bins."""
    t = np.clip(values, 0.0, 1.0) * n_bins - 0.5
    lo = np.floor(t).astype(np.int64)
    frac = t - lo
    lo_c = np.clip(lo, 0, n_bins - 1)
    hi_c = np.clip(lo + 1, 0, n_bins - 1)
    flat = np.concatenate([center_ids * n_bins + lo_c, center_ids * n_bins + hi_c])
    mass = np.concatenate([1.0 - frac, frac])
    hist = np.bincount(flat, weights=mass, minlength=n_centers * n_bins)
    return hist.reshape(n_centers, n_bins)


def _normalize_rows(mat: FeatureMatrix) -> FeatureMatrix:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    fallback = np.full(mat.shape[1], 1.0 / np.sqrt(mat.shape[1]))
    out = np.where(norms > 0, mat / np.where(norms > 0, norms, 1.0), fallback)
    return out


def compute_descriptors(cloud: Points, centers: Points, radius: float, dims: int
                        ) -> tuple[FeatureMatrix, NDArray[np.bool_]]:
    """Descriptor rows for every center, with neighborhoods drawn from `cloud`.

    Returns (rows, weak_mask). Centers with fewer than 3 non-coincident
    neighbors inside the radius get the uniform row and are flagged weak.
    """
    pts = as_points(cloud)
    ctr = as_points(centers)
    if radius <= 0:
        raise ValueError(f"support radius must be positive, got {radius}")
    m = len(ctr)
    n_dist, n_inner, n_outer, n_scales = _block_sizes(dims)

    neigh_lists = cKDTree(pts).query_ball_point(ctr, r=radius)
    counts_raw = np.fromiter((len(l) for l in neigh_lists), dtype=np.int64, count=m)
    if counts_raw.sum() == 0:
        return np.full((m, dims), 1.0 / np.sqrt(dims)), np.ones(m, dtype=bool)
    center_ids = np.repeat(np.arange(m, dtype=np.int64), counts_raw)
    neigh_ids = np.concatenate(
        [np.asarray(l, dtype=np.int64) for l in neigh_lists if len(l)])
    # canonical pair order, independent of tree layout and cloud orientation
    order = np.lexsort((neigh_ids, center_ids))
    center_ids = center_ids[order]
    neigh_ids = neigh_ids[order]

    offsets = pts[neigh_ids] - ctr[center_ids]
    dist = np.linalg.norm(offsets, axis=1)
    keep = dist > _COINCIDENT_EPS
    center_ids = center_ids[keep]
    offsets = offsets[keep]
    dist = dist[keep]

    counts = np.bincount(center_ids, minlength=m)
    weak = counts < 3

    if (counts > _MAX_NEIGHBORS).any():
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        keep_idx = []
        for c in range(m):
            cnt = counts[c]
            if cnt <= _MAX_NEIGHBORS:
                keep_idx.append(np.arange(starts[c], starts[c] + cnt))
            else:
                stride = (np.arange(_MAX_NEIGHBORS) * cnt) // _MAX_NEIGHBORS
                keep_idx.append(starts[c] + stride)
        keep_idx = np.concatenate(keep_idx)
        center_ids = center_ids[keep_idx]
        offsets = offsets[keep_idx]
        dist = dist[keep_idx]
        counts = np.minimum(counts, _MAX_NEIGHBORS)

    denom = np.maximum(counts, 1).astype(np.float64)

    def _shape_ratios(mask):
        """(linearity, planarity, sphericity) of the masked neighborhoods,
        from the covariance about the neighbor centroid (offsets are taken
        relative to the center for conditioning)."""
        ids = center_ids[mask]
        off = offsets[mask]
        cnt = np.maximum(np.bincount(ids, minlength=m), 1).astype(np.float64)
        mean_off = np.stack([
            np.bincount(ids, weights=off[:, a], minlength=m) for a in range(3)
        ], axis=1) / cnt[:, None]
        second = np.empty((m, 3, 3))
        for a in range(3):
            for b in range(a, 3):
                s = np.bincount(ids, weights=off[:, a] * off[:, b],
                                minlength=m) / cnt
                second[:, a, b] = s
                second[:, b, a] = s
        cov = second - mean_off[:, :, None] * mean_off[:, None, :]
        evals, evecs = np.linalg.eigh(cov)       # ascending eigenvalues
        evals = np.clip(evals, 0.0, None)
        lam1, lam2, lam3 = evals[:, 2], evals[:, 1], evals[:, 0]
        safe = np.where(lam1 > 0, lam1, 1.0)
        ratios = np.stack([
            np.where(lam1 > 0, (lam1 - lam2) / safe, 1.0 / 3.0),
            np.where(lam1 > 0, (lam2 - lam3) / safe, 1.0 / 3.0),
            np.where(lam1 > 0, lam3 / safe, 1.0 / 3.0),
        ], axis=1)
        return ratios, evecs[:, :, 2]

    all_true = np.ones(len(dist), dtype=bool)
    eigen_parts = []
    axis = None
    if n_scales > 1:
        for scale in _EIGEN_SCALES[:-1]:
            ratios, _ = _shape_ratios(dist <= scale * radius)
            eigen_parts.append(ratios)
    ratios_full, axis = _shape_ratios(all_true)
    eigen_parts.append(ratios_full)
    eigen_block = np.concatenate(eigen_parts, axis=1)

    dist_hist = _soft_histogram(dist / radius, center_ids, m, n_dist)
    abs_cos = np.abs(np.einsum("ij,ij->i", offsets, axis[center_ids])) / dist
    blocks = [_normalize_rows(dist_hist / denom[:, None])]
    if n_outer:
        inner = dist <= _SHELL_SPLIT * radius
        hist_in = _soft_histogram(abs_cos[inner], center_ids[inner], m, n_inner)
        hist_out = _soft_histogram(abs_cos[~inner], center_ids[~inner], m, n_outer)
        blocks.append(_normalize_rows(
            np.concatenate([hist_in, hist_out], axis=1) / denom[:, None]))
    else:
        blocks.append(_normalize_rows(
            _soft_histogram(abs_cos, center_ids, m, n_inner) / denom[:, None]))
    blocks.append(_normalize_rows(eigen_block))

    rows = _normalize_rows(np.concatenate(blocks, axis=1))
    if weak.any():
        rows[weak] = 1.0 / np.sqrt(dims)
    return rows, weak


def local_geometry_descriptor(cloud: Points, index: SpatialIndex, center,
                              radius: float, dims: int) -> FeatureMatrix:
    """Single descriptor row at one center point (see compute_descriptors)."""
    del index  # neighborhoods are re-queried; kept for call-site symmetry
    row, _ = compute_descriptors(cloud, np.asarray(center).reshape(1, 3),
                                 radius, dims)
    return row[0]


def smooth_features(cloud: Points, feats: FeatureMatrix, radius: float
                    ) -> FeatureMatrix:
    """Average each row with the rows of its radius neighbors (self included)."""
    pts = as_points(cloud)
    f = np.asarray(feats, dtype=np.float64)
    if len(pts) != len(f):
        raise ValueError(f"{len(pts)} points but {len(f)} feature rows")
    neigh_lists = cKDTree(pts).query_ball_point(pts, r=radius)
    counts = np.fromiter((len(l) for l in neigh_lists), dtype=np.int64, count=len(pts))
    center_ids = np.repeat(np.arange(len(pts), dtype=np.int64), counts)
    neigh_ids = np.concatenate(
        [np.asarray(l, dtype=np.int64) for l in neigh_lists if len(l)])
    sums = np.empty_like(f)
    for dim in range(f.shape[1]):
        sums[:, dim] = np.bincount(center_ids, weights=f[neigh_ids, dim],
                                   minlength=len(pts))
    return _normalize_rows(sums / np.maximum(counts, 1)[:, None])


def _upsampled_cloud(pts: Points, up_neighbors: int) -> Points:
    """Original points plus midpoints to each point's nearest neighbors."""
    k = min(up_neighbors + 1, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    idx = idx.reshape(len(pts), k)
    mids = [(pts + pts[idx[:, j]]) * 0.5 for j in range(1, k)]
    return np.vstack([pts] + mids) if mids else pts


def multi_density_branches(cloud: Points, feats: FeatureMatrix,
                           cfg: DescriptorConfig, radius: float,
                           reference: Points | None = None,
                           down_indices: NDArray[np.int64] | None = None,
                           up_reference: Points | None = None
                           ) -> tuple[FeatureMatrix, FeatureMatrix, FeatureMatrix]:
    """Three density variants of the level features, all n x d.

    branch 1: descriptor recomputed on an FPS-downsampled copy of the
    reference geometry, interpolated back to the level points; branch 2: the
    input features smoothed over radius neighborhoods; branch 3: descriptor
    recomputed against an upsampled copy (midpoints to nearest neighbors),
    restricted to the level points.

    `reference` is the geometry the density variants are built from; it
    defaults to `cloud` itself. `down_indices` and `up_reference` can carry a
    precomputed FPS selection / upsampled copy of the reference so pyramid
    levels share one sampling.
    """
    pts = as_points(cloud)
    f = np.asarray(feats, dtype=np.float64)
    if len(pts) != len(f):
        raise ValueError(f"{len(pts)} points but {len(f)} feature rows")
    ref = pts if reference is None else as_points(reference)

    if down_indices is None:
        m_down = max(int(np.ceil(len(ref) * cfg.down_fraction)), 1)
        down_indices = farthest_point_sample(ref, m_down)
    down_pts = ref[down_indices]
    down_feats, _ = compute_descriptors(down_pts, down_pts, radius, cfg.dims)
    branch_down = _normalize_rows(interpolate_features(down_pts, down_feats, pts))

    branch_mid = smooth_features(pts, f, radius)

    up_pts = _upsampled_cloud(ref, cfg.up_neighbors) \
        if up_reference is None else as_points(up_reference)
    branch_up, _ = compute_descriptors(up_pts, pts, radius, cfg.dims)

    return branch_down, branch_mid, branch_up


def fuse_multi_density(branch_down: FeatureMatrix, branch_mid: FeatureMatrix,
                       branch_up: FeatureMatrix) -> FeatureMatrix:
    """Equal-weight average of the three branches, rows renormalized."""
    a = np.asarray(branch_down, dtype=np.float64)
    b = np.asarray(branch_mid, dtype=np.float64)
    c = np.asarray(branch_up, dtype=np.float64)
    if not (a.shape == b.shape == c.shape):
        raise ValueError(f"branch shapes differ: {a.shape}, {b.shape}, {c.shape}")
    return _normalize_rows((a + b + c) / 3.0)


def resolve_radius(*clouds: Points) -> float:
    """Shared support radius for one or more clouds.

    Uses the sparser cloud's spacing so both sides of a pair describe the
    same physical neighborhood scale.
    """
    if not clouds:
        raise ValueError("need at least one cloud")
    return RADIUS_SPACING_FACTOR * max(median_nn_spacing(c) for c in clouds)


def _level_radius(base_radius: float, ratio: float) -> float:
    # Point spacing on a surface grows like sqrt(1 / ratio) as points thin out.
    return base_radius / np.sqrt(ratio)


def _level_features(pyramid: DensityPyramid, cfg: DescriptorConfig,
                    radius: float) -> list[FeatureMatrix]:
    """Per-level fused features.

    Neighborhoods always come from the level-0 cloud; each level inherits its
    parent level's fused rows as context before branch fusion.
    """
    reference = pyramid.clouds[0]
    down_indices = None
    up_reference = None
    if cfg.multi_density:
        m_down = max(int(np.ceil(len(reference) * cfg.down_fraction)), 1)
        down_indices = farthest_point_sample(reference, m_down)
        up_reference = _upsampled_cloud(reference, cfg.up_neighbors)

    fused_levels: list[FeatureMatrix] = []
    for level, pts in enumerate(pyramid.clouds):
        r_l = _level_radius(radius, cfg.pyramid_ratios[level])
        base, _ = compute_descriptors(reference, pts, r_l, cfg.dims)
        if level > 0:
            inherited = fused_levels[-1][pyramid.parent_indices[level]]
            base = _normalize_rows(0.5 * base + 0.5 * inherited)
        if cfg.multi_density:
            branches = multi_density_branches(pts, base, cfg, r_l,
                                              reference=reference,
                                              down_indices=down_indices,
                                              up_reference=up_reference)
            fused = fuse_multi_density(*branches)
        else:
            fused = base
        fused_levels.append(fused)
    return fused_levels


def extract_density_robust_features(cloud: Points, cfg: DescriptorConfig,
                                    level_sizes: tuple[int, ...] | None = None,
                                    restrict_centers: bool = False
                                    ) -> tuple[Points, FeatureMatrix,
                                               Points, FeatureMatrix]:
    """Full extraction: (sparse_pts, sparse_feats, dense_pts, dense_feats).

    Sparse outputs live at the deepest pyramid level, dense outputs at level
    1; dense features additionally average in the sparse features carried
    down to the dense points (the decoder step). With `restrict_centers`,
    isolated points are kept out of the deeper levels (they would otherwise
    dominate farthest-point sampling).
    """
    radius = cfg.radius if cfg.radius is not None else resolve_radius(cloud)
    eligible = center_eligibility(cloud, radius) if restrict_centers else None
    pyramid = build_density_pyramid(cloud, cfg, level_sizes, eligible)
    fused = _level_features(pyramid, cfg, radius)

    sparse_level = pyramid.num_levels - 1
    dense_level = 1
    sparse_pts = pyramid.clouds[sparse_level]
    sparse_feats = fused[sparse_level]
    dense_pts = pyramid.clouds[dense_level]
    carried = interpolate_features(sparse_pts, sparse_feats, dense_pts)
    dense_feats = _normalize_rows(0.5 * fused[dense_level] + 0.5 * carried)
    return sparse_pts, sparse_feats, dense_pts, dense_feats


def fused_point_features(cloud: Points, cfg: DescriptorConfig) -> FeatureMatrix:
    """Fused features for every input point (pyramid level 0); used by the
    feature-cache dump."""
    pyramid = build_density_pyramid(cloud, cfg)
    radius = cfg.radius if cfg.radius is not None else resolve_radius(cloud)
    pts = pyramid.clouds[0]
    r0 = _level_radius(radius, cfg.pyramid_ratios[0])
    base, weak = compute_descriptors(pts, pts, r0, cfg.dims)
    if weak.all():
        warnings.warn("every point is weak: radius too small for this cloud")
    if cfg.multi_density:
        return fuse_multi_density(*multi_density_branches(pts, base, cfg, r0))
    return base


def with_radius(cfg: DescriptorConfig, radius: float) -> DescriptorConfig:
    return replace(cfg, radius=radius)
