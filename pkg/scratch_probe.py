"""Scratch diagnostics for pipeline tuning (not part of the package)."""
import numpy as np, time, sys
from scipy.spatial import cKDTree
from crossreg.bench import SceneParams, generate_scene, pose_errors, inlier_ratio
from crossreg.descriptor import DescriptorConfig, extract_density_robust_features, resolve_radius, with_radius
from crossreg.geometry import apply_transform
from crossreg.matching import (feature_similarity, one_to_many_generate,
                               consistency_distance_matrix, spectral_key_selection,
                               second_order_filter)
import crossreg.pose as pose_mod
import crossreg.descriptor as desc_mod

def probe(params, seed, radius_factor=2.5, floors=(600, 480, 360), k_loose=3, verbose=True):
    desc_mod.RADIUS_SPACING_FACTOR = radius_factor
    pose_mod._LEVEL_FLOORS = floors
    scene = generate_scene(params, seed)
    src, dst = scene.source, scene.target
    gt = scene.ground_truth
    radius = resolve_radius(src, dst)
    cfg = with_radius(DescriptorConfig(), radius)
    t0 = time.perf_counter()
    ss = pose_mod._aligned_level_sizes(len(src), len(dst), cfg.pyramid_ratios)
    ds = pose_mod._aligned_level_sizes(len(dst), len(src), cfg.pyramid_ratios)
    ssp, ssf, sdp, sdf = extract_density_robust_features(src, cfg, ss, restrict_centers=True)
    tsp, tsf, tdp, tdf = extract_density_robust_features(dst, cfg, ds, restrict_centers=True)
    t_feat = time.perf_counter() - t0

    # clutter fraction at sparse level (clutter points are appended last)
    n_clean_src = scene.n_source_clean
    srctree = cKDTree(src[:n_clean_src])
    d_clean, _ = srctree.query(ssp, k=1)
    src_clutterfrac = float((d_clean > 1e-9).mean())

    moved = apply_transform(gt, ssp)
    d, j = cKDTree(tsp).query(moved, k=1)
    has = d < 0.1
    sim = feature_similarity(ssf, tsf)
    idx = np.where(has)[0]
    ranks = np.array([(sim[i] > sim[i, j[i]]).sum() for i in idx]) if len(idx) else np.array([])

    loose = one_to_many_generate(ssf, tsf, ssp, tsp, k_loose)
    quasi = []
    for tau in (0.1, 0.15):
        moved_l = apply_transform(gt, loose.src_points)
        res = np.linalg.norm(moved_l - loose.dst_points, axis=1)
        quasi.append(int((res < tau).sum()))
    # background consistency rate on a sample of loose pairs
    rng = np.random.default_rng(0)
    samp = loose.take(rng.choice(len(loose), min(400, len(loose)), replace=False))
    gaps = consistency_distance_matrix(samp, samp)
    p_bg = float((gaps <= 0.1).mean())

    keys = spectral_key_selection(loose, 0.1, min(150, len(loose)))
    refined = second_order_filter(keys, loose, 0.1, 2)
    ir_loose = inlier_ratio(loose, gt)
    ir_keys = inlier_ratio(keys, gt)
    ir_ref = inlier_ratio(refined, gt) if len(refined) else 0.0
    if verbose:
        print(f"  feat {t_feat:.1f}s radius={radius:.3f} sparse {len(ssp)}x{len(tsp)} "
              f"clutter@sparse={src_clutterfrac:.2f} counterpart={has.mean():.2f}")
        if len(ranks):
            print(f"  rank med={np.median(ranks):.0f} top3={np.mean(ranks<3):.2f} | "
                  f"quasi(0.1)={quasi[0]} quasi(0.15)={quasi[1]} of {len(loose)} p_bg={p_bg:.3f}")
        print(f"  IR loose={ir_loose:.4f} keys={ir_keys:.3f} refined={ir_ref:.3f} (n_ref={len(refined)})")
    return dict(quasi=quasi[0], ir_keys=ir_keys, ir_ref=ir_ref)

if __name__ == "__main__":
    rf = float(sys.argv[1]) if len(sys.argv) > 1 else 2.5
    fl = tuple(int(x) for x in sys.argv[2].split(",")) if len(sys.argv) > 2 else (600, 480, 360)
    for ratio in (1.0, 4.0):
        print(f"== ratio {ratio} radius_factor={rf} floors={fl}")
        for seed in (0, 1):
            probe(SceneParams(n_source=5000, density_ratio=ratio, noise_sigma=0.012,
                              outlier_fraction=0.3, overlap=0.7), seed,
                  radius_factor=rf, floors=fl)
