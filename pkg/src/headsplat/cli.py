"""Command-line surface: toy-model, init, fit, animate, render, landmarks,
bench, fixtures."""

import argparse
import json
import logging
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .animation import load_sequence, save_sequence, synthetic_sequence
from .config import ConfigError, PROFILES, load_fit_config
from .gaussians import init_cloud, load_checkpoint, save_checkpoint
from .guidance import generate_fixtures
from .head_model import AnimationInput, generate_toy_model, load_assets, pose_mesh, save_assets
from .pipeline import animate, bench, fit, render_single
from .renderer import CameraSample, render_landmark_map
from .renderer.imageio import write_png

log = logging.getLogger("headsplat")

EXIT_USAGE = 2


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--log-level", default="info",
                   choices=["debug", "info", "warning", "error"])
    p.add_argument("--config", default=None, help="TOML config file")


def _add_camera(p, resolution=512):
    p.add_argument("--distance", type=float, default=1.75)
    p.add_argument("--fovy", type=float, default=55.0)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--resolution", type=int, default=resolution)


def _camera_from(args):
    return CameraSample(
        distance=args.distance, fovy_deg=args.fovy, elevation_deg=args.elevation,
        azimuth_deg=args.azimuth, width=args.resolution, height=args.resolution,
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="headsplat",
        description="Animatable head avatars as mesh-rigged 3D Gaussians.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-model", help="generate the procedural test head")
    _add_common(p)
    p.add_argument("--subdivisions", type=int, default=3)
    p.add_argument("--n-shape", type=int, default=8)
    p.add_argument("--n-expr", type=int, default=4)
    p.add_argument("--out", required=True)

    p = sub.add_parser("init", help="super-dense Gaussian initialization")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--init-scale", choices=["sqrt", "linear"], default="sqrt")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="optimize an avatar under a guidance provider")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--provider", default=None,
                   choices=["stub", "photometric", "remote", "fixture-replay"])
    p.add_argument("--prompt", default=None)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--iterations", type=int, default=None)

    p = sub.add_parser("animate", help="drive a checkpoint with a pose/expression stream")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", default=None, help="JSON-lines animation input")
    p.add_argument("--frames", type=int, default=48, help="synthetic length if no sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--video", default=None, help="encode MP4 via ffmpeg")
    _add_camera(p)

    p = sub.add_parser("render", help="render one view of a checkpoint")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_camera(p)

    p = sub.add_parser("landmarks", help="render the landmark condition map")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jaw", type=float, default=0.0, help="jaw x-rotation, radians")
    _add_camera(p)

    p = sub.add_parser("bench", help="throughput report (JSON + table)")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-frames", type=int, default=30)
    p.add_argument("--out", default=None, help="write report JSON here")
    _add_camera(p, resolution=1024)

    p = sub.add_parser("fixtures", help="regenerate guidance conformance fixtures")
    _add_common(p)
    p.add_argument("--out", default="fixtures/guidance")

    p = sub.add_parser("sequence", help="write a synthetic animation sequence")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()))
    try:
        return _dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args):
    cmd = args.command
    if cmd == "toy-model":
        model = generate_toy_model(args.seed, args.subdivisions, args.n_shape, args.n_expr)
        save_assets(model, args.out)
        print(f"wrote toy model ({model.n_vertices} vertices, {model.n_faces} faces) to {args.out}")
        return 0

    if cmd == "fixtures":
        written = generate_fixtures(args.out, seed=args.seed or 20240917)
        print(f"wrote {len(written)} fixture files to {args.out}")
        return 0

    model = load_assets(args.model)

    if cmd == "init":
        cloud = init_cloud(model, AnimationInput.identity(model), k=args.k,
                           scale_mode=args.init_scale)
        save_checkpoint(cloud, args.out, model.content_hash())
        print(f"initialized {len(cloud)} points ({args.k} per face) -> {args.out}")
        return 0

    if cmd == "sequence":
        seq = synthetic_sequence(model, args.frames, seed=args.seed)
        save_sequence(seq, args.out)
        print(f"wrote {len(seq)} frames to {args.out}")
        return 0

    if cmd == "fit":
        if args.config:
            cfg = load_fit_config(args.config, profile=args.profile)
        else:
            cfg = PROFILES[args.profile]()
        if args.provider:
            cfg.provider = args.provider
        if args.prompt is not None:
            cfg.prompt = args.prompt
        if args.endpoint is not None:
            cfg.endpoint = args.endpoint
        if args.iterations is not None:
            cfg.iterations = args.iterations
            cfg.shape_freeze_iter = min(cfg.shape_freeze_iter, cfg.iterations)
        cfg.seed = args.seed
        cfg.threads = args.threads
        result = fit(cfg, model, args.out)
        print(
            f"fit complete: {result.iterations} iterations, {len(result.cloud)} points, "
            f"{result.failed_requests}/{result.total_requests} failed requests\n"
            f"checkpoint: {result.checkpoint_path}\nloss log: {result.log_path}"
        )
        return 0

    if cmd == "landmarks":
        anim = AnimationInput.identity(model)
        pose = np.zeros(3 * model.n_joints)
        pose[3] = args.jaw  # jaw joint is index 1 on the toy head
        anim = AnimationInput(shape=anim.shape, pose=pose, expression=anim.expression)
        state = pose_mesh(model, anim)
        image = render_landmark_map(model, state, _camera_from(args))
        write_png(args.out, image)
        print(f"wrote landmark map to {args.out}")
        return 0

    cloud, _ = load_checkpoint(args.checkpoint, expected_model_hash=model.content_hash())

    if cmd == "render":
        out = render_single(model, cloud, _camera_from(args))
        write_png(args.out, out.color)
        coverage = float((out.alpha > 0.01).mean())
        print(f"wrote {args.out} (alpha coverage {coverage:.1%})")
        return 0

    if cmd == "animate":
        if args.sequence:
            seq = load_sequence(args.sequence, model)
        else:
            seq = synthetic_sequence(model, args.frames, seed=args.seed)
        animate(model, cloud, seq, _camera_from(args), args.out)
        print(f"wrote {len(seq)} frames to {args.out}")
        if args.video:
            _encode_video(args.out, args.video, seq.frame_rate)
        return 0

    if cmd == "bench":
        report = bench(model, cloud, _camera_from(args), args.n_frames)
        if args.out:
            Path(args.out).write_text(json.dumps(report, indent=1))
        _print_bench(report)
        return 0

    raise AssertionError(f"unhandled command {cmd}")


def _print_bench(report):
    print(f"points: {report['point_count']}  resolution: {report['resolution']}"
          f"  frames: {report['n_frames']}")
    if report["timings"] is None:
        print("no frames timed")
        return
    print(f"{'phase':<12}{'ms/frame':>12}{'fps':>10}")
    for name, t in report["timings"].items():
        print(f"{name:<12}{t['seconds_per_frame'] * 1e3:>12.2f}{t['fps']:>10.1f}")


def _encode_video(frame_dir, out_path, fps):
    ffmpeg = shutil.which("ffmpeg")
    if not ffmpeg:
        raise OSError("ffmpeg not found on PATH; cannot encode video")
    subprocess.run(
        [ffmpeg, "-y", "-framerate", str(fps), "-i", str(Path(frame_dir) / "frame_%04d.png"),
         "-pix_fmt", "yuv420p", str(out_path)],
        check=True, capture_output=True,
    )
    print(f"encoded {out_path}")


if __name__ == "__main__":
    sys.exit(main())
