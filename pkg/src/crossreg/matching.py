"""Sparse correspondence pipeline: loose generation, strict selection.

Generation is deliberately loose (each source point keeps its k most similar
target features), which floods the set with outliers. Selection is strict:
spectral screening picks key correspondences from the pairwise-compatibility
graph, then a weighted second-order consistency filter keeps only
correspondences backed by many keys that are consistent with both sides of
the pair. This recovers a usable inlier set even when the loose inlier ratio
is only a few percent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.distance import cdist

from .geometry import Points, as_points

Matrix = NDArray[np.float64]


@dataclass(frozen=True)
class MatchConfig:
    """Knobs for both matching stages; defaults are CLI-overridable."""

    k_loose: int = 3          # one-to-many fan-out
    n_keys: int = 150         # spectral keys (capped at the set size)
    k_refine: int = 2         # per-key Top-k in the second-order filter
    sigma_d: float = 0.1      # consistency distance threshold, meters
    power_tol: float = 1e-6   # power-iteration convergence tolerance
    power_max_iter: int = 200
    k_group: int = 250        # per-prior Top-k in dense group selection
    tau0: float = 0.1         # truncated-chamfer threshold for hypothesis scoring

    def __post_init__(self):
        for name in ("k_loose", "n_keys", "k_refine", "power_max_iter", "k_group"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("sigma_d", "power_tol", "tau0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class Correspondence:
    src_index: int
    dst_index: int
    src_point: NDArray[np.float64]
    dst_point: NDArray[np.float64]
    score: float


@dataclass(frozen=True)
class CorrespondenceSet:
    """Column-oriented batch of point pairs with scores and a stage tag."""

    src_indices: NDArray[np.int64]
    dst_indices: NDArray[np.int64]
    src_points: Points
    dst_points: Points
    scores: NDArray[np.float64]
    stage: str = "loose"

    def __post_init__(self):
        n = len(self.src_indices)
        if not (len(self.dst_indices) == len(self.src_points)
                == len(self.dst_points) == len(self.scores) == n):
            raise ValueError("correspondence fields have mismatched lengths")
        if n:
            pairs = np.stack([self.src_indices, self.dst_indices], axis=1)
            if len(np.unique(pairs, axis=0)) != n:
                raise ValueError(f"duplicate (src, dst) pairs in {self.stage} set")

    def __len__(self) -> int:
        return len(self.src_indices)

    def __getitem__(self, i: int) -> Correspondence:
        return Correspondence(int(self.src_indices[i]), int(self.dst_indices[i]),
                              self.src_points[i], self.dst_points[i],
                              float(self.scores[i]))

    def take(self, order, stage: str | None = None) -> "CorrespondenceSet":
        order = np.asarray(order)
        return CorrespondenceSet(
            self.src_indices[order], self.dst_indices[order],
            self.src_points[order], self.dst_points[order],
            self.scores[order], stage if stage is not None else self.stage)

    def with_scores(self, scores, stage: str | None = None) -> "CorrespondenceSet":
        return CorrespondenceSet(
            self.src_indices, self.dst_indices, self.src_points,
            self.dst_points, np.asarray(scores, dtype=np.float64),
            stage if stage is not None else self.stage)

    @classmethod
    def from_pairs(cls, src_idx, dst_idx, src_cloud: Points, dst_cloud: Points,
                   scores, stage: str) -> "CorrespondenceSet":
        src_idx = np.asarray(src_idx, dtype=np.int64)
        dst_idx = np.asarray(dst_idx, dtype=np.int64)
        return cls(src_idx, dst_idx, as_points(src_cloud)[src_idx],
                   as_points(dst_cloud)[dst_idx],
                   np.asarray(scores, dtype=np.float64), stage)


def feature_similarity(feats_a: Matrix, feats_b: Matrix) -> Matrix:
    """Cosine similarity matrix between row-normalized feature sets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")

    def _norm(mat):
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        return mat / np.where(norms > 0, norms, 1.0)

    return np.clip(_norm(a) @ _norm(b).T, -1.0, 1.0)


def one_to_many_generate(feats_a: Matrix, feats_b: Matrix,
                         cloud_a: Points, cloud_b: Points,
                         k_loose: int, stage: str = "loose"
                         ) -> CorrespondenceSet:
    """Loose generation: each source point pairs with its k most similar
    target rows (score = similarity, ties to the lower target index).

    Output is grouped by source index, then by similarity rank, and always
    contains exactly len(cloud_a) * k_loose pairs.
    """
    pa = as_points(cloud_a)
    pb = as_points(cloud_b)
    if len(feats_a) != len(pa) or len(feats_b) != len(pb):
        raise ValueError("feature row counts must match cloud sizes")
    if k_loose > len(pb):
        raise ValueError(f"k_loose={k_loose} exceeds target size {len(pb)}")

    sim = feature_similarity(feats_a, feats_b)
    # stable argsort of -sim keeps the lower dst index first among ties
    top = np.argsort(-sim, axis=1, kind="stable")[:, :k_loose]
    src_idx = np.repeat(np.arange(len(pa), dtype=np.int64), k_loose)
    dst_idx = top.reshape(-1).astype(np.int64)
    scores = sim[src_idx, dst_idx]
    return CorrespondenceSet.from_pairs(src_idx, dst_idx, pa, pb, scores, stage)


def consistency_distance(g1: Correspondence, g2: Correspondence) -> float:
    """Rigidity gap between two correspondences.

    | ||p_i - p_j|| - ||q_i - q_j|| |: zero for two correct correspondences
    under any rigid motion, since rigid motions preserve pairwise distances.
    """
    dp = float(np.linalg.norm(np.asarray(g1.src_point) - np.asarray(g2.src_point)))
    dq = float(np.linalg.norm(np.asarray(g1.dst_point) - np.asarray(g2.dst_point)))
    return abs(dp - dq)


def consistency_distance_matrix(rows: CorrespondenceSet,
                                cols: CorrespondenceSet) -> Matrix:
    """All-pairs rigidity gaps between two correspondence sets."""
    dp = cdist(rows.src_points, cols.src_points)
    dq = cdist(rows.dst_points, cols.dst_points)
    return np.abs(dp - dq)


def consistency_matrices(rows: CorrespondenceSet, cols: CorrespondenceSet,
                         sigma_d: float) -> tuple[Matrix, Matrix]:
    """Binary and Gaussian consistency matrices.

    S[i, j] = 1 iff the rigidity gap d_ij <= sigma_d;
    W[i, j] = exp(-d_ij^2 / (2 sigma_d^2)). A correspondence paired with
    itself has d = 0, so self-paired sets get an all-ones diagonal.
    """
    if sigma_d <= 0:
        raise ValueError(f"sigma_d must be positive, got {sigma_d}")
    d = consistency_distance_matrix(rows, cols)
    binary = (d <= sigma_d).astype(np.float64)
    gaussian = np.exp(-(d ** 2) / (2.0 * sigma_d ** 2))
    return binary, gaussian


def leading_eigenvector(mat: Matrix, tol: float, max_iter: int
                        ) -> NDArray[np.float64]:
    """Power iteration from the all-ones vector.

    Stops when the iterate moves less than `tol` (2-norm) or after max_iter
    rounds. A zero matrix returns the normalized all-ones vector.
    """
    n = mat.shape[0]
    vec = np.ones(n) / np.sqrt(n)
    for _ in range(max_iter):
        nxt = mat @ vec
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            return vec
        nxt /= norm
        if np.linalg.norm(nxt - vec) <= tol:
            return nxt
        vec = nxt
    return vec


def spectral_key_selection(loose: CorrespondenceSet, sigma_d: float,
                           n_keys: int, tol: float = 1e-6,
                           max_iter: int = 200) -> CorrespondenceSet:
    """Screen key correspondences by spectral matching.

    Builds the Gaussian compatibility matrix over the loose set (diagonal
    zeroed so nothing reinforces itself), takes the leading eigenvector by
    power iteration, and keeps the n_keys entries with the largest
    eigenvector mass (ties to the lower index).
    """
    if len(loose) == 0:
        raise ValueError("cannot select keys from an empty correspondence set")
    if n_keys >= len(loose):
        if n_keys > len(loose):
            warnings.warn(f"requested {n_keys} keys from {len(loose)} "
                          "correspondences: returning all of them")
        return loose.take(np.arange(len(loose)), stage="key")
    _, gaussian = consistency_matrices(loose, loose, sigma_d)
    np.fill_diagonal(gaussian, 0.0)
    vec = leading_eigenvector(gaussian, tol, max_iter)
    order = np.lexsort((np.arange(len(vec)), -vec))[:n_keys]
    return loose.take(np.sort(order), stage="key")


def second_order_weights(keys: CorrespondenceSet, loose: CorrespondenceSet,
                         sigma_d: float) -> Matrix:
    """Weighted second-order consistency scores, keys x loose.

    key_to_all masks which (key, candidate) pairs are first-order consistent;
    the product with the Gaussian-weighted key-to-key consistency counts, for
    every masked pair, how much key mass is consistent with both sides.
    """
    key_to_all, _ = consistency_matrices(keys, loose, sigma_d)
    key_to_key, key_weights = consistency_matrices(keys, keys, sigma_d)
    return key_to_all * ((key_to_key * key_weights) @ key_to_all)


def second_order_filter(keys: CorrespondenceSet, loose: CorrespondenceSet,
                        sigma_d: float, k_refine: int) -> CorrespondenceSet:
    """Strict selection: per key, keep the k_refine candidates with the
    highest positive second-order score; union the picks, dropping duplicate
    pairs but keeping each pair's maximum score.

    Candidates whose scores are zero in a row are never selected, so a
    correspondence consistent with no key cannot survive.
    """
    scores = second_order_weights(keys, loose, sigma_d)
    picked: dict[int, float] = {}
    for i in range(scores.shape[0]):
        row = scores[i]
        order = np.lexsort((np.arange(len(row)), -row))
        for j in order[:k_refine]:
            val = row[j]
            if val <= 0.0:
                break
            j = int(j)
            if val > picked.get(j, -1.0):
                picked[j] = float(val)
    if not picked:
        return loose.take(np.empty(0, dtype=np.int64), stage="refined")
    cols = np.fromiter(picked.keys(), dtype=np.int64)
    cols.sort()
    vals = np.array([picked[int(c)] for c in cols])
    return loose.take(cols).with_scores(vals, stage="refined")


def second_order_weights_bruteforce(keys: CorrespondenceSet,
                                    loose: CorrespondenceSet,
                                    sigma_d: float,
                                    binary_weights: bool = False) -> Matrix:
    """Triple-loop reference for second_order_weights; only for testing and
    verification at small sizes."""
    nk, nl = len(keys), len(loose)
    out = np.zeros((nk, nl))
    for i in range(nk):
        for j in range(nl):
            if consistency_distance(keys[i], loose[j]) > sigma_d:
                continue
            total = 0.0
            for l in range(nk):
                d_il = consistency_distance(keys[i], keys[l])
                d_lj = consistency_distance(keys[l], loose[j])
                if d_il <= sigma_d and d_lj <= sigma_d:
                    w = 1.0 if binary_weights else np.exp(-d_il ** 2 / (2 * sigma_d ** 2))
                    total += w
            out[i, j] = total
    return out
