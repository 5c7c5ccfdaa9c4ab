"""Command-line entry point: ``panoslam <command> [options]``.

Exit codes are 0 on success, 1 on runtime failure and 2 on usage errors.
Logs go to stderr; results go to stdout or to the requested files.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import dataset
from .config import ConfigError, build_settings, load_file, parse_overrides
from .densify import DensifyError, complete_depth
from .evaluation import EvaluationError, associate, evaluate
from .fileio import FormatError, read_pfm, read_ppm, read_trajectory, write_pfm, write_ply, write_ppm, write_trajectory
from .sparse_depth import DepthMap
from .system import MODES, SlamError, load_sequence, run_sequence

log = logging.getLogger("panoslam")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from exc
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("image size must be positive")
    return w, h


def _settings(args):
    file_values = load_file(args.config) if getattr(args, "config", None) else {}
    return build_settings(file_values, parse_overrides(getattr(args, "set", None)))


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key (repeatable)")


def _add_slam_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--mode", choices=MODES, default="tri")
    p.add_argument("--depth-prior", type=int, default=0, metavar="K", help="ground-truth range anchors per keyframe (dc mode)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--single-thread", action="store_true", help="run mapping on the tracking thread (bit-deterministic)")
    p.add_argument("--max-frames", type=int, default=None, metavar="N")
    _add_config_args(p)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.scene == "builtin":
        scene = dataset.builtin_scene(seed=args.seed, frames=args.frames)
    else:
        scene = dataset.load_scene(args.scene).with_frames(args.frames)
    os.makedirs(args.out, exist_ok=True)
    dataset.generate_dataset(scene, args.out, size=args.size)
    print(f"wrote {args.frames} frames to {args.out}")
    return EXIT_OK


def cmd_stitch(args) -> int:
    faces = {}
    for name in dataset.FACE_ORDER:
        path = os.path.join(args.faces, f"{name}.ppm")
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        faces[name] = read_ppm(path)
    size = args.size or (4 * faces["front"].shape[1], 2 * faces["front"].shape[0])
    write_ppm(args.out, dataset.stitch_cubemap(faces, size))
    print(f"wrote {size[0]}x{size[1]} panorama to {args.out}")
    return EXIT_OK


def _run(args):
    settings = _settings(args)
    if args.depth_prior and args.mode != "dc":
        log.warning("--depth-prior only affects dc mode; ignored")
    seq = load_sequence(args.data)
    return run_sequence(
        seq,
        args.mode,
        settings,
        seed=args.seed,
        threaded=not args.single_thread,
        depth_prior=args.depth_prior if args.mode == "dc" else 0,
        max_frames=args.max_frames,
    )


def cmd_run(args) -> int:
    res, slam = _run(args)
    write_trajectory(args.out, res.trajectory)
    if args.ply:
        with slam.map.lock:
            pts = [slam.map.points[p] for p in sorted(slam.map.points)]
        xyz = np.array([p.position for p in pts]).reshape(-1, 3)
        rgb = np.array([p.color for p in pts], dtype=np.uint8).reshape(-1, 3)
        write_ply(args.ply, xyz, rgb)
    lost = "none" if res.lost_at is None else str(res.lost_at)
    print(
        f"frames {len(res.trajectory)} keyframes {res.keyframes} points {res.map_points} "
        f"lost {lost} seconds {res.seconds:.1f}"
    )
    if res.lost_at is not None:
        log.error("tracking lost at frame %d; trajectory truncated", res.lost_at)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_sparse_depth(args) -> int:
    res, slam = _run(args)
    os.makedirs(args.out, exist_ok=True)
    written = 0
    with slam.map.lock:
        kfs = sorted(slam.map.keyframes.values(), key=lambda k: k.id)
    for kf in kfs:
        dm = slam.render_sparse(kf)
        write_pfm(os.path.join(args.out, f"{kf.frame_index:06d}.pfm"), dm.values.astype(np.float32))
        written += 1
    print(f"wrote {written} sparse depth maps to {args.out}")
    if res.lost_at is not None:
        log.error("tracking lost at frame %d", res.lost_at)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_densify(args) -> int:
    settings = _settings(args)
    rgb = read_ppm(args.rgb)
    raw = read_pfm(args.sparse).astype(float)
    if raw.shape != rgb.shape[:2]:
        raise UsageError(f"sparse map {raw.shape[::-1]} and image {rgb.shape[1::-1]} differ in size")
    sparse = DepthMap.from_array(raw)
    dense, conf = complete_depth(sparse, rgb, settings.densify)
    write_pfm(args.out, dense.values.astype(np.float32))
    write_pfm(args.conf, np.asarray(conf, dtype=np.float32))
    print(f"densified {sparse.count()} samples to {dense.width}x{dense.height}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = read_trajectory(args.gt)
    est = read_trajectory(args.est)
    pairs = associate(est.timestamps, est.positions, gt.timestamps, gt.positions, args.max_dt)
    ate, sf, al = evaluate(pairs, args.align)
    log.info("%d associated pairs, %s alignment", len(pairs), args.align)
    print(f"ATE_RMSE {ate:.6g} SF {sf:.6g}")
    if args.plot:
        from .plotting import plot_alignment

        plot_alignment(pairs, al, args.plot, title=f"{args.align} ATE {ate:.4f} m, SF {sf:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panoslam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic panoramic sequence")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--scene", default="builtin", metavar="FILE|builtin")
    p.add_argument("--size", type=_size, default=(1024, 512), metavar="WxH")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stitch", help="stitch six cubemap faces into a panorama")
    p.add_argument("--faces", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--size", type=_size, default=None, metavar="WxH", help="default 4F x 2F")
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("run", help="run SLAM over a dataset")
    _add_slam_args(p)
    p.add_argument("--out", required=True, metavar="FILE", help="estimated trajectory")
    p.add_argument("--ply", metavar="FILE", help="write the map points")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("densify", help="complete a sparse range map")
    p.add_argument("--rgb", required=True, metavar="FILE")
    p.add_argument("--sparse", required=True, metavar="FILE", help="PFM range map, 0 = empty")
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--conf", required=True, metavar="FILE")
    _add_config_args(p)
    p.set_defaults(func=cmd_densify)

    p = sub.add_parser("eval", help="ATE and scale factor of an estimate against ground truth")
    p.add_argument("--gt", required=True, metavar="FILE")
    p.add_argument("--est", required=True, metavar="FILE")
    p.add_argument("--align", choices=("se3", "sim3"), default="sim3")
    p.add_argument("--max-dt", type=float, default=0.02, metavar="SEC")
    p.add_argument("--plot", metavar="FILE", help="render the aligned trajectories to an image")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sparse-depth", help="dump per-keyframe sparse range maps of a run")
    _add_slam_args(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_sparse_depth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"panoslam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, SlamError, DensifyError, EvaluationError, dataset.SceneError) as exc:
        print(f"panoslam: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
