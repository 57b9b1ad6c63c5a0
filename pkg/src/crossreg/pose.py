"""Pose estimation: weighted SVD per dense group, truncated-chamfer selection.

Every dense group votes with its own closed-form rigid fit; the winning
hypothesis is the one that lands the most sparse source points within tau0 of
the sparse target cloud. No iterative refinement and no random sampling:
the whole pipeline is deterministic.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from . import dense as dense_mod
from . import descriptor as desc_mod
from . import matching as match_mod
from .geometry import Points, RigidTransform, apply_transform, as_points


class RegistrationError(RuntimeError):
    """Pipeline failure with the stage where it happened."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class PipelineConfig:
    descriptor: desc_mod.DescriptorConfig = field(
        default_factory=desc_mod.DescriptorConfig)
    matching: match_mod.MatchConfig = field(default_factory=match_mod.MatchConfig)
    strict_selection: bool = True   # off: loose set feeds the dense stage
    two_stage: bool = True          # off: pose directly from refined sparse set


@dataclass(frozen=True)
class Hypothesis:
    transform: RigidTransform
    group_id: int
    inlier_count: int
    mean_weighted_residual: float


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inlier_count: int
    hypothesis: Hypothesis
    stage_sets: dict[str, match_mod.CorrespondenceSet]
    stage_counts: dict[str, int]
    timings_ms: dict[str, float]

    def to_json_dict(self, include_timings: bool = True) -> dict:
        out = {
            "rotation": [[float(v) for v in row] for row in self.transform.rotation],
            "translation": [float(v) for v in self.transform.translation],
            "inlier_count": int(self.inlier_count),
            "stage_counts": {k: int(v) for k, v in sorted(self.stage_counts.items())},
        }
        if include_timings:
            out["timings_ms"] = {k: float(v) for k, v in sorted(self.timings_ms.items())}
        return out

    def to_json(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_json_dict(include_timings), indent=2,
                          sort_keys=True)


def weighted_svd(corrs: match_mod.CorrespondenceSet,
                 weights) -> RigidTransform:
    """Closed-form minimizer of sum_i w_i ||R p_i + t - q_i||^2.

    Weighted centroids are removed, the weighted cross-covariance is
    decomposed by SVD, and the determinant correction keeps the result a
    proper rotation. Collinear supports (rank-deficient covariance) and
    fewer than 3 positively weighted pairs are rejected.
    """
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(corrs):
        raise ValueError(f"{len(w)} weights for {len(corrs)} correspondences")
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    positive = w > 0
    if positive.sum() < 3:
        raise ValueError("need at least 3 positively weighted correspondences")

    p = corrs.src_points[positive]
    q = corrs.dst_points[positive]
    ww = w[positive]
    total = ww.sum()
    p_bar = (ww[:, None] * p).sum(axis=0) / total
    q_bar = (ww[:, None] * q).sum(axis=0) / total
    cross = ((p - p_bar) * ww[:, None]).T @ (q - q_bar)

    u, sing, vt = np.linalg.svd(cross)
    if sing[1] <= max(sing[0], 1.0) * 1e-12:
        raise ValueError("degenerate correspondence geometry (collinear points)")
    v = vt.T
    det = np.linalg.det(v @ u.T)
    rotation = v @ np.diag([1.0, 1.0, det]) @ u.T
    translation = q_bar - rotation @ p_bar
    return RigidTransform(rotation, translation)


def hypothesis_select(candidates: list[RigidTransform], src_sparse: Points,
                      dst_sparse: Points, tau0: float
                      ) -> tuple[RigidTransform, NDArray[np.int64]]:
    """Pick the candidate that lands the most source points within tau0 of
    the target cloud (strict <); ties go to the lower candidate index."""
    if not candidates:
        raise ValueError("no candidate transforms to select from")
    src = as_points(src_sparse)
    dst = as_points(dst_sparse)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("hypothesis selection needs non-empty sparse clouds")
    tree = cKDTree(dst)
    counts = np.empty(len(candidates), dtype=np.int64)
    for i, cand in enumerate(candidates):
        dist, _ = tree.query(apply_transform(cand, src), k=1)
        counts[i] = int((dist < tau0).sum())
    best = int(np.argmax(counts))  # first maximum = lowest index
    return candidates[best], counts


def _mean_weighted_residual(transform: RigidTransform,
                            corrs: match_mod.CorrespondenceSet,
                            weights: NDArray[np.float64]) -> float:
    moved = apply_transform(transform, corrs.src_points)
    res = np.linalg.norm(moved - corrs.dst_points, axis=1)
    total = weights.sum()
    return float((weights * res).sum() / total) if total > 0 else float("nan")


# Per-level minimum center counts for pairs: the consistency thresholds need
# sparse correspondences at roughly their own spatial resolution, so deep
# levels never thin below these counts (last entry = deepest level; levels
# before the listed ones keep every point the ratios give them).
_LEVEL_FLOORS = (600, 480, 360)


def _aligned_level_sizes(n_self: int, n_other: int,
                         ratios: tuple[float, ...]) -> tuple[int, ...]:
    """Per-level center counts for one cloud of a pair.

    Both clouds aim at the counts the sparser cloud's ratios would give
    (equal counts = equal physical spacing), floored so that deep levels
    keep enough centers for consistency filtering to resolve.
    """
    n_ref = min(n_self, n_other)
    floors = (1,) * (len(ratios) - len(_LEVEL_FLOORS)) + _LEVEL_FLOORS
    sizes = [n_self]
    for k in range(1, len(ratios)):
        want = int(np.ceil(n_ref * ratios[k]))
        size = max(want, floors[min(k, len(floors) - 1)])
        sizes.append(min(size, sizes[-1] - 1))
    return tuple(sizes)


def register(src: Points, dst: Points,
             cfg: PipelineConfig | None = None) -> RegistrationResult:
    """End-to-end registration of src onto dst.

    Stages: density-robust features, loose sparse generation, spectral keys
    plus second-order refinement, prior-guided dense groups, one weighted-SVD
    hypothesis per group, truncated-chamfer selection. Errors carry the name
    of the stage that failed.
    """
    cfg = cfg or PipelineConfig()
    src = as_points(src)
    dst = as_points(dst)
    mc = cfg.matching
    timings: dict[str, float] = {}

    def _run(stage, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except ValueError as exc:
            raise RegistrationError(stage, str(exc)) from exc
        timings[stage] = (time.perf_counter() - start) * 1e3
        return result

    dcfg = cfg.descriptor
    if dcfg.radius is None:
        radius = _run("features", desc_mod.resolve_radius, src, dst)
        dcfg = desc_mod.with_radius(dcfg, radius)
    ratios = dcfg.pyramid_ratios
    src_sizes = _aligned_level_sizes(len(src), len(dst), ratios)
    dst_sizes = _aligned_level_sizes(len(dst), len(src), ratios)

    t0 = time.perf_counter()
    try:
        src_sparse, src_sfeat, src_dense, src_dfeat = \
            desc_mod.extract_density_robust_features(src, dcfg, src_sizes,
                                                     restrict_centers=True)
        dst_sparse, dst_sfeat, dst_dense, dst_dfeat = \
            desc_mod.extract_density_robust_features(dst, dcfg, dst_sizes,
                                                     restrict_centers=True)
    except ValueError as exc:
        raise RegistrationError("features", str(exc)) from exc
    timings["features"] = timings.get("features", 0.0) + \
        (time.perf_counter() - t0) * 1e3

    loose = _run("sparse-loose", match_mod.one_to_many_generate,
                 src_sfeat, dst_sfeat, src_sparse, dst_sparse, mc.k_loose)

    if cfg.strict_selection:
        keys = _run("sparse-keys", match_mod.spectral_key_selection,
                    loose, mc.sigma_d, min(mc.n_keys, len(loose)),
                    mc.power_tol, mc.power_max_iter)
        refined = _run("sparse-refine", match_mod.second_order_filter,
                       keys, loose, mc.sigma_d, mc.k_refine)
        if len(refined) == 0:
            raise RegistrationError("sparse-refine",
                                    "no correspondence survived strict selection")
    else:
        keys = loose.take(np.arange(len(loose)), stage="key")
        refined = loose.take(np.arange(len(loose)), stage="refined")

    stage_sets = {"sparse_loose": loose, "sparse_keys": keys,
                  "sparse_refined": refined}

    candidates: list[RigidTransform] = []
    groups = None
    if cfg.two_stage:
        dense_loose = _run("dense-loose", dense_mod.dense_loose_generate,
                           src_dfeat, dst_dfeat, src_dense, dst_dense,
                           mc.k_loose)
        stage_sets["dense_loose"] = dense_loose
        groups = _run("dense-groups", dense_mod.prior_guided_group_select,
                      refined, dense_loose, mc.sigma_d, mc.k_group)

        t0 = time.perf_counter()
        fit_groups, failures = [], 0
        for g in groups.groups:
            try:
                fit_groups.append((g, weighted_svd(g.corrs, g.weights)))
            except ValueError:
                failures += 1
        timings["pose-svd"] = (time.perf_counter() - t0) * 1e3
        if not fit_groups:
            raise RegistrationError(
                "pose-svd", f"all {failures} dense groups were degenerate")
        group_list = [g for g, _ in fit_groups]
        candidates = [t for _, t in fit_groups]
    else:
        t0 = time.perf_counter()
        try:
            transform = weighted_svd(refined, refined.scores)
        except ValueError as exc:
            raise RegistrationError("pose-svd", str(exc)) from exc
        timings["pose-svd"] = (time.perf_counter() - t0) * 1e3
        group_list = [dense_mod.DenseGroup(prior_index=-1, corrs=refined,
                                           weights=refined.scores)]
        candidates = [transform]

    t0 = time.perf_counter()
    try:
        best, counts = hypothesis_select(candidates, src_sparse, dst_sparse,
                                         mc.tau0)
    except ValueError as exc:
        raise RegistrationError("pose-select", str(exc)) from exc
    timings["pose-select"] = (time.perf_counter() - t0) * 1e3

    best_idx = int(np.argmax(counts))
    chosen_group = group_list[best_idx]
    hypo = Hypothesis(
        transform=best,
        group_id=chosen_group.prior_index,
        inlier_count=int(counts[best_idx]),
        mean_weighted_residual=_mean_weighted_residual(
            best, chosen_group.corrs, np.asarray(chosen_group.weights)),
    )

    final = groups.union() if groups is not None else refined
    if final is not None:
        stage_sets["final"] = final

    stage_counts = {name: len(cs) for name, cs in stage_sets.items()}
    stage_counts["hypotheses"] = len(candidates)
    return RegistrationResult(
        transform=best,
        inlier_count=hypo.inlier_count,
        hypothesis=hypo,
        stage_sets=stage_sets,
        stage_counts=stage_counts,
        timings_ms=timings,
    )
