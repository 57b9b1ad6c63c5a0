"""Synthetic cross-source benchmark: scene generation, metrics, ablations.

Scenes are built from seeded random unions of planes, spheres, and boxes.
Cross-source stress is simulated asymmetrically: only the target view is
voxel-downsampled, which reproduces the density imbalance between a dense
depth-camera cloud and a sparse scan. All generation is deterministic in the
seed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from .geometry import (Points, RigidTransform, apply_transform, invert,
                       voxel_downsample)
from .matching import CorrespondenceSet
from .pose import PipelineConfig, RegistrationError, register

# Cross-source success thresholds: RE < 15 degrees, TE < 0.30 m.
DEFAULT_RE_MAX_DEG = 15.0
DEFAULT_TE_MAX = 0.30
DEFAULT_IR_TAU = 0.1
DEFAULT_FMR_TAU = 0.05


@dataclass(frozen=True)
class SceneParams:
    n_source: int = 5000
    density_ratio: float = 1.0    # target keeps ~1/ratio of its points
    noise_sigma: float = 0.0      # per-axis Gaussian noise, meters
    outlier_fraction: float = 0.0
    overlap: float = 1.0
    extent: float = 1.3           # edge length of the base sampling box

    def __post_init__(self):
        if self.n_source < 30:
            raise ValueError(f"n_source too small: {self.n_source}")
        if self.density_ratio < 1:
            raise ValueError(f"density ratio must be >= 1, got {self.density_ratio}")
        if not 0 < self.overlap <= 1:
            raise ValueError(f"overlap must be in (0, 1], got {self.overlap}")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError(
                f"outlier fraction must be in [0, 1), got {self.outlier_fraction}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if self.extent <= 0:
            raise ValueError(f"extent must be positive, got {self.extent}")


@dataclass(frozen=True)
class BenchmarkScene:
    source: Points
    target: Points
    ground_truth: RigidTransform   # maps source frame onto target frame
    params: SceneParams
    seed: int
    diameter: float                # bbox diagonal of the clean base surface
    n_source_clean: int
    n_target_clean: int


def random_rotation(rng: np.random.Generator) -> NDArray[np.float64]:
    """Rotation matrix drawn uniformly over SO(3) (unit quaternion method)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _sample_surfaces(rng: np.random.Generator, n_points: int,
                     extent: float) -> Points:
    """Random union of plane patches, spheres, and boxes, sampled by area."""
    half = extent / 2.0
    specs = []

    # ground-like patch keeps every scene from being a single blob
    specs.append(("plane", extent, extent, None))
    for _ in range(int(rng.integers(3, 7))):
        kind = ("plane", "sphere", "box")[int(rng.integers(0, 3))]
        if kind == "plane":
            specs.append(("plane", rng.uniform(0.3, 0.8) * extent,
                          rng.uniform(0.3, 0.8) * extent, None))
        elif kind == "sphere":
            specs.append(("sphere", rng.uniform(0.08, 0.22) * extent, None, None))
        else:
            specs.append(("box", rng.uniform(0.15, 0.45) * extent,
                          rng.uniform(0.15, 0.45) * extent,
                          rng.uniform(0.15, 0.45) * extent))

    def area(spec):
        kind, a, b, c = spec
        if kind == "plane":
            return a * b
        if kind == "sphere":
            return 4.0 * np.pi * a * a
        return 2.0 * (a * b + b * c + c * a)

    areas = np.array([area(s) for s in specs])
    counts = np.maximum((areas / areas.sum() * n_points).round().astype(int), 8)

    chunks = []
    for spec, cnt in zip(specs, counts):
        kind, a, b, c = spec
        if kind == "plane":
            local = np.stack([rng.uniform(-a / 2, a / 2, cnt),
                              rng.uniform(-b / 2, b / 2, cnt),
                              np.zeros(cnt)], axis=1)
        elif kind == "sphere":
            direc = rng.normal(size=(cnt, 3))
            direc /= np.linalg.norm(direc, axis=1, keepdims=True)
            local = direc * a
        else:
            sides = np.array([a, b, c])
            face_axis = rng.integers(0, 3, cnt)
            face_sign = rng.integers(0, 2, cnt) * 2 - 1
            local = rng.uniform(-0.5, 0.5, (cnt, 3)) * sides
            local[np.arange(cnt), face_axis] = \
                0.5 * sides[face_axis] * face_sign
        rot = random_rotation(rng)
        center = rng.uniform(-0.55 * half, 0.55 * half, 3)
        chunks.append(local @ rot.T + center)
    return np.vstack(chunks)


def _voxel_for_ratio(cloud: Points, ratio: float, diameter: float) -> float:
    """Binary search a voxel size whose downsample keeps ~len/ratio points."""
    want = max(int(round(len(cloud) / ratio)), 1)
    lo, hi = diameter * 1e-4, diameter
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        got = len(voxel_downsample(cloud, mid))
        if got > want:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_scene(params: SceneParams, seed: int) -> BenchmarkScene:
    """Deterministic synthetic registration problem.

    Pipeline: sample base surface, crop two overlapping views along a random
    direction, rigidly perturb the source view, voxel-downsample only the
    target, add independent Gaussian noise to both, append uniform clutter
    to both. The ground-truth transform maps the source back onto the target.
    """
    rng = np.random.default_rng(seed)
    crop_frac = 1.0 / (2.0 - params.overlap)
    n_base = int(np.ceil(params.n_source / crop_frac)) + 1
    base = _sample_surfaces(rng, n_base, params.extent)
    diameter = float(np.linalg.norm(base.max(axis=0) - base.min(axis=0)))

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    proj = base @ direction
    order = np.argsort(proj, kind="stable")
    m = int(round(crop_frac * len(base)))
    target_idx = np.sort(order[:m])
    source_idx = np.sort(order[-m:])
    source_clean = base[source_idx]
    target_clean = base[target_idx]

    # rotation uniform over SO(3), translation uniform in a ball whose
    # radius equals the scene diameter
    rot = random_rotation(rng)
    radius_t = diameter * rng.uniform(0.0, 1.0) ** (1.0 / 3.0)
    direction_t = rng.normal(size=3)
    direction_t /= np.linalg.norm(direction_t)
    perturb = RigidTransform(rot, direction_t * radius_t)

    source = apply_transform(perturb, source_clean)
    n_source_clean = len(source)

    if params.density_ratio > 1:
        voxel = _voxel_for_ratio(target_clean, params.density_ratio, diameter)
        target = voxel_downsample(target_clean, voxel)
    else:
        target = target_clean.copy()
    n_target_clean = len(target)

    source = source + params.noise_sigma * rng.normal(size=source.shape)
    target = target + params.noise_sigma * rng.normal(size=target.shape)

    def _clutter(cloud):
        n_out = int(round(params.outlier_fraction * len(cloud)))
        if n_out == 0:
            return cloud
        lo, hi = cloud.min(axis=0), cloud.max(axis=0)
        return np.vstack([cloud, rng.uniform(lo, hi, (n_out, 3))])

    source = _clutter(source)
    target = _clutter(target)

    return BenchmarkScene(source=source, target=target,
                          ground_truth=invert(perturb), params=params,
                          seed=seed, diameter=diameter,
                          n_source_clean=n_source_clean,
                          n_target_clean=n_target_clean)


def inlier_ratio(corrs: CorrespondenceSet, gt: RigidTransform,
                 tau: float = DEFAULT_IR_TAU) -> float:
    """Fraction of correspondences whose residual under the ground truth is
    strictly below tau."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if len(corrs) == 0:
        warnings.warn("inlier ratio of an empty correspondence set is 0")
        return 0.0
    moved = apply_transform(gt, corrs.src_points)
    residuals = np.linalg.norm(moved - corrs.dst_points, axis=1)
    return float((residuals < tau).mean())


def feature_matching_recall(per_scene_ir, tau_ir: float = DEFAULT_FMR_TAU) -> float:
    """Fraction of scenes whose inlier ratio strictly exceeds tau_ir."""
    irs = np.asarray(list(per_scene_ir), dtype=np.float64)
    if len(irs) == 0:
        raise ValueError("no scenes to compute FMR over")
    return float((irs > tau_ir).mean())


def pose_errors(est: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """(rotation error in degrees, translation error in meters)."""
    cos_arg = (np.trace(gt.rotation.T @ est.rotation) - 1.0) / 2.0
    re = float(np.degrees(np.arccos(np.clip(cos_arg, -1.0, 1.0))))
    te = float(np.linalg.norm(est.translation - gt.translation))
    return re, te


def registration_recall(records, re_max: float = DEFAULT_RE_MAX_DEG,
                        te_max: float = DEFAULT_TE_MAX) -> float:
    """Fraction of (re, te) records with re < re_max and te < te_max."""
    if re_max <= 0 or te_max <= 0:
        raise ValueError("recall thresholds must be positive")
    pairs = [(r.re_deg, r.te) if hasattr(r, "re_deg") else tuple(r)
             for r in records]
    if not pairs:
        raise ValueError("no scenes to compute recall over")
    return float(np.mean([(re < re_max) and (te < te_max) for re, te in pairs]))


@dataclass
class SceneRecord:
    seed: int
    re_deg: float
    te: float
    ir_loose: float
    ir_refined: float
    ir_final: float
    success: bool
    failed_stage: str | None = None
    diameter: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "re_deg": float(self.re_deg),
            "te": float(self.te),
            "ir_loose": float(self.ir_loose),
            "ir_refined": float(self.ir_refined),
            "ir_final": float(self.ir_final),
            "success": bool(self.success),
            "failed_stage": self.failed_stage,
            "diameter": float(self.diameter),
        }


@dataclass
class MetricsReport:
    records: list[SceneRecord]
    rr: float
    fmr: float
    mean_re_deg: float
    mean_te: float
    re_max_deg: float
    te_max_max: float

    def to_json_dict(self) -> dict:
        return {
            "rr": float(self.rr),
            "fmr": float(self.fmr),
            "mean_re_deg": float(self.mean_re_deg),
            "mean_te": float(self.mean_te),
            "re_max_deg": float(self.re_max_deg),
            "te_max": float(self.te_max_max),
            "scenes": [r.to_json_dict() for r in self.records],
        }


def evaluate_scene(scene: BenchmarkScene, cfg: PipelineConfig | None = None,
                   re_max: float = DEFAULT_RE_MAX_DEG,
                   te_max: float = DEFAULT_TE_MAX,
                   ir_tau: float = DEFAULT_IR_TAU) -> SceneRecord:
    """Register one scene and score it against its ground truth."""
    gt = scene.ground_truth
    try:
        result = register(scene.source, scene.target, cfg)
    except RegistrationError as exc:
        return SceneRecord(seed=scene.seed, re_deg=float("inf"),
                           te=float("inf"), ir_loose=0.0, ir_refined=0.0,
                           ir_final=0.0, success=False,
                           failed_stage=exc.stage, diameter=scene.diameter)
    re_deg, te = pose_errors(result.transform, gt)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ir_loose = inlier_ratio(result.stage_sets["sparse_loose"], gt, ir_tau)
        ir_refined = inlier_ratio(result.stage_sets["sparse_refined"], gt, ir_tau)
        final = result.stage_sets.get("final")
        ir_final = inlier_ratio(final, gt, ir_tau) if final is not None else 0.0
    return SceneRecord(seed=scene.seed, re_deg=re_deg, te=te,
                       ir_loose=ir_loose, ir_refined=ir_refined,
                       ir_final=ir_final,
                       success=(re_deg < re_max) and (te < te_max),
                       diameter=scene.diameter)


def build_report(records: list[SceneRecord],
                 re_max: float = DEFAULT_RE_MAX_DEG,
                 te_max: float = DEFAULT_TE_MAX,
                 fmr_tau: float = DEFAULT_FMR_TAU) -> MetricsReport:
    if not records:
        raise ValueError("no scene records to aggregate")
    rr = registration_recall(records, re_max, te_max)
    fmr = feature_matching_recall([r.ir_final for r in records], fmr_tau)
    ok = [r for r in records if r.re_deg < re_max and r.te < te_max]
    mean_re = float(np.mean([r.re_deg for r in ok])) if ok else float("nan")
    mean_te = float(np.mean([r.te for r in ok])) if ok else float("nan")
    return MetricsReport(records=records, rr=rr, fmr=fmr,
                         mean_re_deg=mean_re, mean_te=mean_te,
                         re_max_deg=re_max, te_max_max=te_max)


def run_benchmark(params: SceneParams, n_scenes: int, base_seed: int,
                  cfg: PipelineConfig | None = None,
                  re_max: float = DEFAULT_RE_MAX_DEG,
                  te_max: float = DEFAULT_TE_MAX) -> MetricsReport:
    """Evaluate n_scenes seeded scenes; records are ordered by scene index."""
    if n_scenes < 1:
        raise ValueError(f"need at least one scene, got {n_scenes}")
    records = []
    for i in range(n_scenes):
        scene = generate_scene(params, base_seed + i)
        records.append(evaluate_scene(scene, cfg, re_max, te_max))
    return build_report(records, re_max, te_max)


ABLATION_VARIANTS = ("full", "one_to_one", "no_strict", "one_stage")


def ablation_config(base: PipelineConfig, variant: str) -> PipelineConfig:
    """Pipeline configuration for one ablation switch.

    one_to_one drops loose generation (k = 1); no_strict feeds the raw loose
    set to the dense stage; one_stage estimates the pose from the refined
    sparse set alone.
    """
    if variant == "full":
        return base
    if variant == "one_to_one":
        return replace(base, matching=replace(base.matching, k_loose=1))
    if variant == "no_strict":
        return replace(base, strict_selection=False)
    if variant == "one_stage":
        return replace(base, two_stage=False)
    raise ValueError(f"unknown ablation variant: {variant!r}")


def run_ablation(params: SceneParams, n_scenes: int, base_seed: int,
                 base_cfg: PipelineConfig | None = None,
                 variants: tuple[str, ...] = ABLATION_VARIANTS,
                 re_max: float = DEFAULT_RE_MAX_DEG,
                 te_max: float = DEFAULT_TE_MAX) -> dict[str, MetricsReport]:
    """Run the same seeded scenes under each pipeline variant."""
    base_cfg = base_cfg or PipelineConfig()
    scenes = [generate_scene(params, base_seed + i) for i in range(n_scenes)]
    out: dict[str, MetricsReport] = {}
    for variant in variants:
        cfg = ablation_config(base_cfg, variant)
        records = [evaluate_scene(s, cfg, re_max, te_max) for s in scenes]
        out[variant] = build_report(records, re_max, te_max)
    return out


def ablation_csv(reports: dict[str, MetricsReport]) -> str:
    lines = ["variant,rr,fmr,mean_ir_final,mean_re_deg,mean_te"]
    for variant, rep in reports.items():
        mean_ir = float(np.mean([r.ir_final for r in rep.records]))
        lines.append(f"{variant},{rep.rr:.6g},{rep.fmr:.6g},{mean_ir:.6g},"
                     f"{rep.mean_re_deg:.6g},{rep.mean_te:.6g}")
    return "\n".join(lines) + "\n"
