"""Command-line entry: run, evaluate, synth, dump-raster.

    python -m src.pipeline.main synth data/synth
    python -m src.pipeline.main run --config data/synth/slam.env --set output_dir=output/synth
    python -m src.pipeline.main evaluate output/synth/trajectory.txt data/synth/poses.txt
"""

import argparse
import logging
import sys
from pathlib import Path

from src.pipeline.config import load_config
from src.pipeline.run_pipeline import evaluate, run_pipeline
from src.pipeline.synth import SynthConfig, generate
from src.slam.dataset_io import load_point_cloud
from src.slam.errors import ConfigError, SlamError
from src.slam.features import write_keypoints
from src.slam.preprocess import preprocess_cloud
from src.slam.raster import CameraModel, rasterize, write_pgm
from src.slam.tracking import frame_features

log = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key-value config file (section.key=value per line)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting, e.g. --set features.fast_threshold=15")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidar-slam", description="Offline LIDAR SLAM on height images.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--quiet", action="store_true", help="no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run SLAM over a sequence directory")
    _config_args(run)

    ev = sub.add_parser("evaluate", help="absolute trajectory error between two KITTI pose files")
    ev.add_argument("estimate", type=Path)
    ev.add_argument("truth", type=Path)
    ev.add_argument("--label", default="-", help="sequence name shown in the table")

    syn = sub.add_parser("synth", help="generate a synthetic sequence")
    syn.add_argument("out_dir", type=Path)
    syn.add_argument("--frames", type=int, default=SynthConfig.frames)
    syn.add_argument("--boxes", type=int, default=SynthConfig.n_boxes)
    syn.add_argument("--seed", type=int, default=SynthConfig.seed)

    dump = sub.add_parser("dump-raster", help="write the height image (PGM) of one point cloud")
    dump.add_argument("cloud", type=Path)
    dump.add_argument("-o", "--output", type=Path, required=True)
    dump.add_argument("--keypoints", type=Path, help="also write detected keypoints (u v response angle)")
    _config_args(dump)
    return parser


def _dump_raster(args) -> None:
    cfg = load_config(args.config, args.overrides)
    cam = CameraModel.from_config(cfg.camera)
    cloud = load_point_cloud(args.cloud, cfg.dataset_format)
    cloud, _ = preprocess_cloud(cloud, cfg.ground)
    frame = rasterize(cloud, cam, cfg.raster)
    write_pgm(frame, args.output)
    print(f"[raster] Done -- {int(frame.occupied.sum()):,} occupied pixels -> {args.output}")
    if args.keypoints:
        feats = frame_features(frame, cam, cfg.features)
        write_keypoints(feats, args.keypoints)
        print(f"[features] Done -- {len(feats):,} keypoints -> {args.keypoints}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            run_pipeline(load_config(args.config, args.overrides), quiet=args.quiet)
        elif args.command == "evaluate":
            evaluate(args.estimate, args.truth, label=args.label)
        elif args.command == "synth":
            generate(args.out_dir, SynthConfig(frames=args.frames, n_boxes=args.boxes, seed=args.seed),
                     quiet=args.quiet)
        elif args.command == "dump-raster":
            _dump_raster(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
