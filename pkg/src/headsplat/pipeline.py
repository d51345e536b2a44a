"""End-to-end optimization loop, animation playback, and benchmarking."""

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .animation import AnimationSequence, load_sequence, synthetic_sequence
from .binding import deform_backward, deform_gaussian, triangle_frames
from .config import FitConfig
from .gaussians import BoundCloud, densify_and_prune, init_cloud, save_checkpoint
from .guidance import (
    FixtureReplayProvider,
    PhotometricProvider,
    RemoteProvider,
    StubProvider,
)
from .head_model import AnimationInput, HeadModel, pose_mesh, pose_mesh_backward
from .optim import AdaptiveOptimizer
from .regularize import reg_loss
from .renderer import (
    CameraSample,
    project,
    project_backward,
    rasterize,
    rasterize_backward,
    render_landmark_map,
    sample_camera,
)

log = logging.getLogger(__name__)


class FitDivergedError(RuntimeError):
    pass


class GuidanceFailureError(RuntimeError):
    pass


@dataclass
class FitView:
    """A fixed training view: camera, animation frame, optional target image."""

    camera: CameraSample
    pose: np.ndarray
    expression: np.ndarray
    target: np.ndarray = None


@dataclass
class RenderPass:
    state: object
    frames: object
    world_means: np.ndarray
    world_scales: np.ndarray
    world_rots: np.ndarray
    screen: object
    project_cache: object
    output: object


def forward_render(model, cloud, anim, camera, background, prev_frames=None):
    """Pose -> frames -> deform -> project -> rasterize, keeping every cache."""
    state = pose_mesh(model, anim)
    frames = triangle_frames(state.posed_vertices, model.faces, prev=prev_frames)
    mu_w, s_w, R_w = deform_gaussian(
        cloud.positions, cloud.scalings, cloud.rotations, frames, cloud.bindings
    )
    screen, pcache = project(mu_w, s_w, R_w, cloud.colors, cloud.opacities, camera)
    out = rasterize(screen, camera.width, camera.height, background)
    return RenderPass(state, frames, mu_w, s_w, R_w, screen, pcache, out)


def backward_render(model, cloud, anim, rp: RenderPass, d_image):
    """Chain image gradients back to cloud parameters and the shape coeffs.

    Returns (grads dict keyed like the optimizer groups, screen_norms,
    visible_indices) where screen_norms are per-visible-point view-space
    positional gradient magnitudes for the densification statistics.
    """
    d_means2d, d_cov2d, d_scol, d_sop = rasterize_backward(d_image, rp.output.cache)
    d_mu_w, d_s_w, d_R_w, d_col, d_op = project_backward(
        rp.project_cache, d_means2d, d_cov2d, d_scol, d_sop
    )
    s_local = cloud.scalings
    d_mu, d_s_local, d_quat, d_vertices = deform_backward(
        d_mu_w, d_s_w, d_R_w,
        cloud.positions, s_local, cloud.rotations,
        rp.frames, cloud.bindings, rp.state.posed_vertices, model.faces,
    )
    colors = cloud.colors
    opac = cloud.opacities
    grads = {
        "positions": d_mu,
        "log_scalings": d_s_local * s_local,
        "rotations": d_quat,
        "color_logits": d_col * colors * (1.0 - colors),
        "opacity_logits": d_op * opac * (1.0 - opac),
        "beta": pose_mesh_backward(model, anim, d_vertices),
    }
    vis = rp.screen.index_map
    screen_norms = np.linalg.norm(d_means2d[vis], axis=1)
    return grads, screen_norms, vis


def build_provider(cfg: FitConfig, views=None):
    if cfg.provider == "stub":
        return StubProvider()
    if cfg.provider == "photometric":
        if views is None or any(v.target is None for v in views):
            raise ValueError("photometric provider requires views with target images")
        return PhotometricProvider([v.target for v in views])
    if cfg.provider == "remote":
        if not cfg.endpoint:
            raise ValueError("remote provider requires an endpoint")
        return RemoteProvider(
            cfg.endpoint, cfg.prompt, sds=cfg.sds,
            cfg_scale=cfg.cfg_scale, cfg_scale_neg=cfg.cfg_scale_neg,
        )
    if cfg.provider == "fixture-replay":
        return FixtureReplayProvider(cfg.fixture_path)
    raise ValueError(f"unknown provider {cfg.provider!r}")


@dataclass
class FitResult:
    checkpoint_path: Path
    log_path: Path
    cloud: BoundCloud
    iterations: int
    failed_requests: int
    total_requests: int


def fit(cfg: FitConfig, model: HeadModel, out_dir, provider=None, views=None,
        callback=None) -> FitResult:
    """Run the full optimization loop and write a checkpoint + loss log.

    Per iteration and batch item: sample a camera and animation frame, pose
    the mesh, deform the bound cloud, render, ask the guidance provider for
    an image-space gradient, backpropagate through the rasterizer and the
    rigging transform to all local parameters and (until the freeze
    iteration) to the shape coefficients, add the geometry regularization,
    and apply the adaptive per-group update. Densification runs on its
    schedule between iterations.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    provider = provider or build_provider(cfg, views)

    cloud = init_cloud(
        model, AnimationInput.identity(model), k=cfg.init_k,
        scale_mode=cfg.init_scale_mode,
    )
    opt = AdaptiveOptimizer(cfg.learning_rates(), betas=cfg.betas)

    if views is None:
        if cfg.animation_path:
            sequence = load_sequence(cfg.animation_path, model)
        else:
            sequence = synthetic_sequence(model, cfg.animation_frames, seed=cfg.seed)

    background = np.asarray(cfg.background, dtype=np.float64)
    failures = 0
    total_requests = 0
    log_path = out_dir / "loss_log.csv"
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None

    needs_condition = getattr(provider, "needs_condition", provider.name == "remote")

    def run_item(camera, anim, view_index):
        rp = forward_render(model, cloud, anim, camera, background)
        condition = None
        if needs_condition:
            condition = render_landmark_map(model, rp.state, camera)
        resp = provider.gradient(rp.output.color, condition, view_index, camera)
        resp.validate()
        grads, norms, vis = backward_render(model, cloud, anim, rp, resp.gradient)
        rloss, d_mu_reg, d_s_reg = reg_loss(cloud, rp.frames, cfg.reg)
        grads["positions"] += d_mu_reg
        grads["log_scalings"] += d_s_reg * cloud.scalings
        gnorm = float(np.linalg.norm(resp.gradient))
        return grads, norms, vis, rloss, gnorm

    try:
        with open(log_path, "w", newline="") as log_file:
            writer = csv.writer(log_file)
            writer.writerow(
                ["iteration", "guidance_grad_norm", "reg_loss", "points",
                 "beta_norm", "beta_grad_norm", "failed_requests"]
            )
            for it in range(cfg.iterations):
                items = []
                for _ in range(cfg.batch_size):
                    if views is not None:
                        vi = int(rng.integers(len(views)))
                        view = views[vi]
                        camera, pose, expr = view.camera, view.pose, view.expression
                    else:
                        camera = sample_camera(rng, cfg.camera)
                        vi = int(rng.integers(len(sequence)))
                        pose, expr = sequence.poses[vi], sequence.expressions[vi]
                    anim = AnimationInput(shape=cloud.beta.copy(), pose=pose, expression=expr)
                    items.append((camera, anim, vi))

                results = []
                total_requests += len(items)
                if pool is not None:
                    outcomes = [pool.submit(run_item, *args) for args in items]
                    getters = [f.result for f in outcomes]
                else:
                    getters = [
                        (lambda args=args: run_item(*args)) for args in items
                    ]
                for get in getters:
                    try:
                        results.append(get())
                    except Exception as e:  # noqa: BLE001 - skip-and-count policy
                        failures += 1
                        log.warning("guidance item failed: %s", e)

                if failures > cfg.failure_abort_fraction * max(total_requests, 1) and failures > 2:
                    raise GuidanceFailureError(
                        f"{failures}/{total_requests} guidance requests failed"
                    )

                frozen = it >= cfg.shape_freeze_iter
                beta_grad_norm = 0.0
                if results:
                    scale = 1.0 / len(results)
                    grads = {
                        k: scale * sum(r[0][k] for r in results)
                        for k in results[0][0]
                    }
                    if frozen:
                        grads["beta"] = None
                    else:
                        beta_grad_norm = float(np.linalg.norm(grads["beta"]))
                    for r in results:
                        cloud.accumulate_grad_stats(r[2], r[1])
                    finite = all(
                        np.all(np.isfinite(g)) for g in grads.values() if g is not None
                    )
                    if not finite:
                        dump = out_dir / "diverged_dump.npz"
                        np.savez(dump, **{k: v for k, v in grads.items() if v is not None})
                        raise FitDivergedError(f"non-finite gradients at iteration {it}; dump: {dump}")
                    params = {name: getattr(cloud, name) for name in grads}
                    params["beta"] = cloud.beta
                    opt.step(params, grads)
                    mean_reg = float(np.mean([r[3] for r in results]))
                    mean_gnorm = float(np.mean([r[4] for r in results]))
                else:
                    mean_reg = float("nan")
                    mean_gnorm = float("nan")

                if cfg.densify.due(it) and it > 0:
                    state = pose_mesh(model, AnimationInput.identity(model).with_shape(cloud.beta))
                    frames = triangle_frames(state.posed_vertices, model.faces)
                    stats = densify_and_prune(cloud, frames, cfg.densify, it, rng)
                    opt.remap_points(
                        ("positions", "log_scalings", "rotations", "color_logits",
                         "opacity_logits"),
                        stats.keep_mask, stats.n_added,
                    )

                writer.writerow([
                    it, f"{mean_gnorm:.8e}", f"{mean_reg:.8e}", len(cloud),
                    f"{np.linalg.norm(cloud.beta):.8e}",
                    f"{beta_grad_norm:.8e}", failures,
                ])
                if callback is not None:
                    callback(it, cloud)
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    ckpt = out_dir / "checkpoint.ahgs"
    save_checkpoint(cloud, ckpt, model.content_hash())
    return FitResult(
        checkpoint_path=ckpt, log_path=log_path, cloud=cloud,
        iterations=cfg.iterations, failed_requests=failures,
        total_requests=total_requests,
    )


def animate(model: HeadModel, cloud: BoundCloud, sequence: AnimationSequence,
            camera, out_dir, background=(0.0, 0.0, 0.0), save_frames=True):
    """Render a sequence frame by frame; stateless across frames.

    camera: a CameraSample or a callable frame_index -> CameraSample.
    Returns the list of rendered images (and writes PNGs when save_frames).
    """
    from .renderer.imageio import write_png

    out_dir = Path(out_dir)
    if save_frames:
        out_dir.mkdir(parents=True, exist_ok=True)
    background = np.asarray(background, dtype=np.float64)
    prev_frames = None
    images = []
    for i in range(len(sequence)):
        cam = camera(i) if callable(camera) else camera
        anim = sequence.frame(i, cloud.beta)
        rp = forward_render(model, cloud, anim, cam, background, prev_frames=prev_frames)
        prev_frames = rp.frames
        images.append(rp.output.color)
        if save_frames:
            write_png(out_dir / f"frame_{i:04d}.png", rp.output.color)
    return images


def bench(model: HeadModel, cloud: BoundCloud, camera: CameraSample, n_frames: int,
          background=(0.0, 0.0, 0.0)) -> dict:
    """Throughput report: deform-only, render-only, and end-to-end."""
    background = np.asarray(background, dtype=np.float64)
    report = {
        "n_frames": int(n_frames),
        "resolution": [camera.width, camera.height],
        "point_count": len(cloud),
        "timings": None,
    }
    if n_frames <= 0:
        return report
    sequence = synthetic_sequence(model, n_frames, seed=1)
    deform_s = 0.0
    render_s = 0.0
    t_start = time.perf_counter()
    prev_frames = None
    for i in range(n_frames):
        t0 = time.perf_counter()
        anim = sequence.frame(i, cloud.beta)
        state = pose_mesh(model, anim)
        frames = triangle_frames(state.posed_vertices, model.faces, prev=prev_frames)
        prev_frames = frames
        mu_w, s_w, R_w = deform_gaussian(
            cloud.positions, cloud.scalings, cloud.rotations, frames, cloud.bindings
        )
        t1 = time.perf_counter()
        screen, _ = project(mu_w, s_w, R_w, cloud.colors, cloud.opacities, camera)
        rasterize(screen, camera.width, camera.height, background)
        t2 = time.perf_counter()
        deform_s += t1 - t0
        render_s += t2 - t1
    total = time.perf_counter() - t_start

    def phase(seconds):
        return {
            "seconds_per_frame": seconds / n_frames,
            "fps": n_frames / seconds if seconds > 0 else float("inf"),
        }

    report["timings"] = {
        "deform": phase(deform_s),
        "render": phase(render_s),
        "end_to_end": phase(total),
    }
    return report


def bench_schema_path() -> Path:
    return Path(__file__).parent / "schemas" / "bench.schema.json"


def render_single(model, cloud, camera, anim=None, background=(0.0, 0.0, 0.0)):
    anim = anim or AnimationInput.identity(model).with_shape(cloud.beta)
    rp = forward_render(model, cloud, anim, camera, np.asarray(background, dtype=np.float64))
    return rp.output
