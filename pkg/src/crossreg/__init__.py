"""crossreg: density-robust cross-source point cloud registration.

The pipeline registers a source cloud onto a target cloud through three
stages: density-robust feature extraction, loose-to-strict two-stage
correspondence matching, and weighted-SVD pose estimation with
truncated-chamfer hypothesis selection.
"""

from .bench import (BenchmarkScene, MetricsReport, SceneParams,
                    feature_matching_recall, generate_scene, inlier_ratio,
                    pose_errors, registration_recall, run_ablation,
                    run_benchmark)
from .dense import (DenseGroup, DenseGroupSet, dense_loose_generate,
                    prior_guided_group_select, sparse_to_dense_consistency)
from .descriptor import (DensityPyramid, DescriptorConfig,
                         build_density_pyramid, compute_descriptors,
                         extract_density_robust_features, fuse_multi_density,
                         fused_point_features, local_geometry_descriptor,
                         multi_density_branches)
from .geometry import (Points, RigidTransform, SpatialIndex, apply_transform,
                       as_points, compose, farthest_point_sample,
                       interpolate_features, invert, knn_query, radius_query,
                       voxel_downsample)
from .io import (read_feature_dump, read_ply, read_xyz, write_feature_dump,
                 write_ply, write_xyz)
from .matching import (Correspondence, CorrespondenceSet, MatchConfig,
                       consistency_distance, consistency_matrices,
                       feature_similarity, one_to_many_generate,
                       second_order_filter, spectral_key_selection)
from .pose import (Hypothesis, PipelineConfig, RegistrationError,
                   RegistrationResult, hypothesis_select, register,
                   weighted_svd)

__version__ = "0.1.0"

__all__ = [
    "BenchmarkScene", "Correspondence", "CorrespondenceSet", "DenseGroup",
    "DenseGroupSet", "DensityPyramid", "DescriptorConfig", "Hypothesis",
    "MatchConfig", "MetricsReport", "PipelineConfig", "Points",
    "RegistrationError", "RegistrationResult", "RigidTransform", "SceneParams",
    "SpatialIndex", "apply_transform", "as_points", "build_density_pyramid",
    "compose", "compute_descriptors", "consistency_distance",
    "consistency_matrices", "dense_loose_generate",
    "extract_density_robust_features", "farthest_point_sample",
    "feature_matching_recall", "feature_similarity", "fuse_multi_density",
    "fused_point_features", "generate_scene", "hypothesis_select",
    "inlier_ratio", "interpolate_features", "invert", "knn_query",
    "local_geometry_descriptor", "multi_density_branches",
    "one_to_many_generate", "pose_errors", "prior_guided_group_select",
    "radius_query", "read_feature_dump", "read_ply", "read_xyz", "register",
    "registration_recall", "run_ablation", "run_benchmark",
    "second_order_filter", "sparse_to_dense_consistency",
    "spectral_key_selection", "voxel_downsample", "weighted_svd",
    "write_feature_dump", "write_ply", "write_xyz",
]
