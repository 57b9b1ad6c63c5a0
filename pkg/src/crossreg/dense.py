"""Prior-guided global dense matching.

Refined sparse correspondences act as anchors: a loose dense correspondence
survives only if it is spatially consistent with the anchor set, no matter
how far it sits from any anchor. Each anchor collects its own group of
consistent dense pairs, and every group later yields one pose hypothesis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.distance import cdist

from .geometry import Points
from .matching import (CorrespondenceSet, Matrix, consistency_matrices,
                       one_to_many_generate)


@dataclass(frozen=True)
class DenseGroup:
    prior_index: int
    corrs: CorrespondenceSet
    weights: NDArray[np.float64]


@dataclass(frozen=True)
class DenseGroupSet:
    groups: tuple[DenseGroup, ...]

    def __len__(self) -> int:
        return len(self.groups)

    def union(self) -> CorrespondenceSet | None:
        """All distinct member pairs across groups, max weight per pair."""
        best: dict[tuple[int, int], tuple[float, int, DenseGroup]] = {}
        for g in self.groups:
            for i in range(len(g.corrs)):
                key = (int(g.corrs.src_indices[i]), int(g.corrs.dst_indices[i]))
                w = float(g.weights[i])
                if key not in best or w > best[key][0]:
                    best[key] = (w, i, g)
        if not best:
            return None
        items = sorted(best.items())
        src_idx = np.array([k[0] for k, _ in items], dtype=np.int64)
        dst_idx = np.array([k[1] for k, _ in items], dtype=np.int64)
        src_pts = np.array([v[2].corrs.src_points[v[1]] for _, v in items])
        dst_pts = np.array([v[2].corrs.dst_points[v[1]] for _, v in items])
        scores = np.array([v[0] for _, v in items])
        return CorrespondenceSet(src_idx, dst_idx, src_pts, dst_pts, scores,
                                 stage="dense-group")


def dense_loose_generate(dense_feats_a: Matrix, dense_feats_b: Matrix,
                         dense_pts_a: Points, dense_pts_b: Points,
                         k_loose: int) -> CorrespondenceSet:
    """One-to-many generation on dense features (same contract as the sparse
    stage)."""
    return one_to_many_generate(dense_feats_a, dense_feats_b,
                                dense_pts_a, dense_pts_b, k_loose,
                                stage="loose")


def sparse_to_dense_consistency(priors: CorrespondenceSet,
                                dense: CorrespondenceSet,
                                sigma_d: float) -> Matrix:
    """Binary priors x dense matrix: 1 where the prior/dense rigidity gap
    | ||p'_i - p_j|| - ||q'_i - q_j|| | stays within sigma_d."""
    if len(priors) == 0:
        raise ValueError("sparse matching produced no priors")
    if len(dense) == 0:
        raise ValueError("no loose dense correspondences to filter")
    dp = cdist(priors.src_points, dense.src_points)
    dq = cdist(priors.dst_points, dense.dst_points)
    return (np.abs(dp - dq) <= sigma_d).astype(np.float64)


def second_order_s2d(priors: CorrespondenceSet, dense: CorrespondenceSet,
                     sigma_d: float) -> Matrix:
    """Weighted second-order sparse-to-dense consistency scores."""
    s2d = sparse_to_dense_consistency(priors, dense, sigma_d)
    prior_binary, prior_weights = consistency_matrices(priors, priors, sigma_d)
    return s2d * ((prior_binary * prior_weights) @ s2d)


def second_order_s2d_bruteforce(priors: CorrespondenceSet,
                                dense: CorrespondenceSet, sigma_d: float,
                                binary_weights: bool = False) -> Matrix:
    """Triple-loop reference for second_order_s2d (testing only)."""
    def gap(p1, q1, p2, q2):
        return abs(np.linalg.norm(p1 - p2) - np.linalg.norm(q1 - q2))

    out = np.zeros((len(priors), len(dense)))
    for i in range(len(priors)):
        for j in range(len(dense)):
            if gap(priors.src_points[i], priors.dst_points[i],
                   dense.src_points[j], dense.dst_points[j]) > sigma_d:
                continue
            total = 0.0
            for l in range(len(priors)):
                d_il = gap(priors.src_points[i], priors.dst_points[i],
                           priors.src_points[l], priors.dst_points[l])
                d_lj = gap(priors.src_points[l], priors.dst_points[l],
                           dense.src_points[j], dense.dst_points[j])
                if d_il <= sigma_d and d_lj <= sigma_d:
                    total += 1.0 if binary_weights else \
                        np.exp(-d_il ** 2 / (2 * sigma_d ** 2))
            out[i, j] = total
    return out


def prior_guided_group_select(priors: CorrespondenceSet,
                              dense: CorrespondenceSet, sigma_d: float,
                              k_group: int) -> DenseGroupSet:
    """One group of dense correspondences per surviving prior.

    Group i holds the Top-k_group dense pairs with positive second-order
    score in prior row i, weighted by those scores. Rows without a single
    positive entry yield no group; if every row is empty the whole matching
    failed and we raise.
    """
    scores = second_order_s2d(priors, dense, sigma_d)
    groups: list[DenseGroup] = []
    for i in range(scores.shape[0]):
        row = scores[i]
        order = np.lexsort((np.arange(len(row)), -row))[:k_group]
        order = order[row[order] > 0.0]
        if len(order) == 0:
            continue
        order = np.sort(order)
        groups.append(DenseGroup(prior_index=i,
                                 corrs=dense.take(order, stage="dense-group"),
                                 weights=row[order]))
    if not groups:
        raise ValueError("dense matching failed: no prior has any consistent "
                         "dense correspondence")
    return DenseGroupSet(tuple(groups))
