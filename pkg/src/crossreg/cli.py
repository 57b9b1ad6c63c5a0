"""Command-line interface.

Subcommands: register, benchmark, ablate, features. Exit codes: 0 success,
1 usage error (bad arguments, unknown config keys, unreadable files),
2 registration failure. Outputs are byte-identical across runs for identical
inputs; wall-clock timings are only included when --timings is passed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import bench, io
from .descriptor import DescriptorConfig
from .matching import MatchConfig
from .pose import PipelineConfig, RegistrationError, register


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; this tool reserves 2 for
    # registration failures, so remap.
    def error(self, message):
        raise UsageError(message)


def parse_config_text(text: str) -> PipelineConfig:
    """Parse flat key=value lines into descriptor + matching configs.

    Keys must be field names of MatchConfig or DescriptorConfig; anything
    else is an error. '#' starts a comment.
    """
    match_fields = {f.name: f for f in dataclasses.fields(MatchConfig)}
    desc_fields = {f.name: f for f in dataclasses.fields(DescriptorConfig)}
    match_kwargs: dict = {}
    desc_kwargs: dict = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in match_fields:
            match_kwargs[key] = _convert(key, value, match_fields[key].type)
        elif key in desc_fields:
            desc_kwargs[key] = _convert(key, value, desc_fields[key].type)
        else:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")

    try:
        return PipelineConfig(descriptor=DescriptorConfig(**desc_kwargs),
                              matching=MatchConfig(**match_kwargs))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _convert(key: str, value: str, annotation: str):
    ann = str(annotation)
    try:
        if key == "pyramid_ratios":
            return tuple(float(v) for v in value.split(","))
        if "bool" in ann:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if "int" in ann:
            return int(value)
        if "float" in ann:
            if key == "radius" and value.lower() in ("none", "auto"):
                return None
            return float(value)
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: {exc}") from exc
    raise UsageError(f"config key {key!r} has unsupported type {ann}")


def load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def read_cloud(path: str):
    suffix = Path(path).suffix.lower()
    try:
        if suffix == ".ply":
            return io.read_ply(path)
        if suffix == ".xyz":
            return io.read_xyz(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    raise UsageError(f"unsupported cloud format: {path} (use .xyz or .ply)")


def _write_json(path: str, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _cmd_register(args) -> int:
    cfg = load_config(args.config)
    source = read_cloud(args.source)
    target = read_cloud(args.target)
    try:
        result = register(source, target, cfg)
    except RegistrationError as exc:
        print(f"registration failed at {exc.stage}: {exc}", file=sys.stderr)
        return 2
    _write_json(args.out, result.to_json_dict(include_timings=args.timings))
    if args.dump_matches:
        io.write_correspondence_csv(args.dump_matches,
                                    result.stage_sets.values())
    print(f"registered {args.source} -> {args.target}: "
          f"{result.inlier_count} chamfer inliers")
    return 0


def _cmd_benchmark(args) -> int:
    cfg = load_config(args.config)
    try:
        params = bench.SceneParams(
            n_source=args.points, density_ratio=args.density_ratio,
            noise_sigma=args.noise, outlier_fraction=args.outliers,
            overlap=args.overlap)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = bench.run_benchmark(params, args.scenes, args.seed, cfg)
    _write_json(args.out, report.to_json_dict())
    print(f"benchmark: RR={report.rr:.3f} FMR={report.fmr:.3f} over "
          f"{args.scenes} scenes")
    return 0


_SUITE_KEYS = {
    "scenes": int, "seed": int, "points": int, "density_ratio": float,
    "noise": float, "outliers": float, "overlap": float, "extent": float,
}


def _cmd_ablate(args) -> int:
    try:
        text = Path(args.suite).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read suite {args.suite}: {exc}") from exc

    suite = {"scenes": 8, "seed": 0}
    config_lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"suite line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _SUITE_KEYS:
            try:
                suite[key] = _SUITE_KEYS[key](value)
            except ValueError as exc:
                raise UsageError(f"suite key {key!r}: {exc}") from exc
        else:
            config_lines.append(line)
    cfg = parse_config_text("\n".join(config_lines))

    try:
        params = bench.SceneParams(
            n_source=suite.get("points", 2000),
            density_ratio=suite.get("density_ratio", 1.0),
            noise_sigma=suite.get("noise", 0.0),
            outlier_fraction=suite.get("outliers", 0.0),
            overlap=suite.get("overlap", 1.0),
            extent=suite.get("extent", 1.3))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    reports = bench.run_ablation(params, suite["scenes"], suite["seed"], cfg)
    Path(args.out).write_text(bench.ablation_csv(reports))
    for variant, rep in reports.items():
        print(f"{variant}: RR={rep.rr:.3f} FMR={rep.fmr:.3f}")
    return 0


def _cmd_features(args) -> int:
    cfg = load_config(args.config)
    cloud = read_cloud(args.input)
    from .descriptor import fused_point_features
    try:
        feats = fused_point_features(cloud, cfg.descriptor)
    except ValueError as exc:
        print(f"feature extraction failed: {exc}", file=sys.stderr)
        return 2
    io.write_feature_dump(args.out, feats)
    print(f"wrote {feats.shape[0]}x{feats.shape[1]} features to {args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="crossreg",
                     description="Cross-source point cloud registration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register a source cloud onto a target")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="result JSON path")
    p.add_argument("--dump-matches", default=None,
                   help="optional CSV of per-stage correspondences")
    p.add_argument("--timings", action="store_true",
                   help="include wall-clock timings in the JSON output")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("benchmark", help="run seeded synthetic scenes")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--density-ratio", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--outliers", type=float, default=0.0)
    p.add_argument("--overlap", type=float, default=1.0)
    p.add_argument("--points", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("ablate", help="compare pipeline variants on one suite")
    p.add_argument("--suite", required=True, help="key=value suite description")
    p.add_argument("--out", required=True, help="comparison CSV path")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("features", help="cache fused features for a cloud")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="binary feature dump path")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
