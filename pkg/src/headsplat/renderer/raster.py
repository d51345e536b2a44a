"""Differentiable tile-based splatting rasterizer (CPU, vectorized).

Forward: 16x16 tile binning by conservative 3-sigma footprint, per-tile
front-to-back depth sort (ties broken by point index), alpha compositing
with a hard 3-sigma kernel cutoff, a 1/255 alpha skip, a 0.99 alpha clamp,
and early termination once transmittance drops below 1e-4. The same rules
define the compositing contract, so an independent per-pixel reference
renderer matches to float accumulation order.

Backward: exact adjoint of the compositing formula, recomputed per tile
from the saved sort and per-pixel contributor counts.
"""

from dataclasses import dataclass

import numpy as np

from .project import ScreenGaussians

TILE = 16
ALPHA_SKIP = 1.0 / 255.0
ALPHA_CLAMP = 0.99
TERMINATION = 1e-4
CUTOFF_POWER = -4.5  # exp(-0.5 * 3^2): hard 3-sigma kernel truncation
CHUNK = 64


@dataclass
class RasterCache:
    screen_id: int
    screen: ScreenGaussians
    width: int
    height: int
    background: np.ndarray
    sorted_gauss: np.ndarray   # pair -> gaussian row, sorted by (tile, depth, idx)
    tile_ids: np.ndarray       # unique tile ids with pairs
    tile_bounds: np.ndarray    # (n_tiles+1,) slice bounds into sorted_gauss
    final_T: np.ndarray        # (H, W)
    n_contrib: np.ndarray      # (H, W) prefix length within the tile list


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W)
    cache: RasterCache


def _conic_and_radius(cov2d):
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    valid = det > 0
    safe_det = np.where(valid, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.1))
    radius = np.ceil(3.0 * np.sqrt(lam))
    return conic, radius, valid


def _tile_pairs(screen: ScreenGaussians, radius, valid, width, height):
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    mx, my = screen.means2d[:, 0], screen.means2d[:, 1]
    x0 = np.clip(np.floor((mx - radius) / TILE), 0, ntx).astype(np.int64)
    x1 = np.clip(np.floor((mx + radius) / TILE) + 1, 0, ntx).astype(np.int64)
    y0 = np.clip(np.floor((my - radius) / TILE), 0, nty).astype(np.int64)
    y1 = np.clip(np.floor((my + radius) / TILE) + 1, 0, nty).astype(np.int64)
    counts = np.maximum(x1 - x0, 0) * np.maximum(y1 - y0, 0) * valid
    total = int(counts.sum())
    if total == 0:
        return (np.empty(0, np.int64), np.empty(0, np.int64), ntx, nty)
    gauss = np.repeat(np.arange(len(counts)), counts)
    offset = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - offset
    wx = np.repeat(np.maximum(x1 - x0, 0), counts)
    tx = np.repeat(x0, counts) + local % wx
    ty = np.repeat(y0, counts) + local // wx
    tile_id = ty * ntx + tx
    order = np.lexsort((gauss, screen.depths[gauss], tile_id))
    return gauss[order], tile_id[order], ntx, nty


def rasterize(screen: ScreenGaussians, width, height, background) -> RenderOutput:
    """Composite screen Gaussians over a constant background color."""
    background = np.asarray(background, dtype=np.float64)
    color = np.empty((height, width, 3))
    color[:] = background
    final_T = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int32)

    conic, radius, valid = _conic_and_radius(screen.cov2d)
    gauss, tile_id, ntx, nty = _tile_pairs(screen, radius, valid, width, height)
    cache = RasterCache(
        screen_id=id(screen), screen=screen, width=width, height=height,
        background=background, sorted_gauss=gauss,
        tile_ids=np.empty(0, np.int64), tile_bounds=np.empty(0, np.int64),
        final_T=final_T, n_contrib=n_contrib,
    )
    if len(gauss) == 0:
        out_alpha = 1.0 - final_T
        return RenderOutput(color=color, alpha=out_alpha, cache=cache)

    uniq, starts = np.unique(tile_id, return_index=True)
    bounds = np.append(starts, len(gauss))
    cache.tile_ids = uniq
    cache.tile_bounds = bounds

    for ti in range(len(uniq)):
        tid = uniq[ti]
        rows = gauss[bounds[ti]:bounds[ti + 1]]
        tx, ty = tid % ntx, tid // ntx
        xs = np.arange(tx * TILE, min((tx + 1) * TILE, width))
        ys = np.arange(ty * TILE, min((ty + 1) * TILE, height))
        px = (xs + 0.5)[None, :].repeat(len(ys), axis=0).ravel()
        py = (ys + 0.5)[:, None].repeat(len(xs), axis=1).ravel()
        npx = len(px)

        T = np.ones(npx)
        done = np.zeros(npx, dtype=bool)
        accum = np.zeros((npx, 3))
        contrib = np.zeros(npx, dtype=np.int32)

        for start in range(0, len(rows), CHUNK):
            sel = rows[start:start + CHUNK]
            alpha = _alphas(screen, conic, sel, px, py)
            one_minus = 1.0 - alpha
            T_after = T[None, :] * np.cumprod(one_minus, axis=0)
            T_before = np.vstack([T[None, :], T_after[:-1]])
            mask = (T_after >= TERMINATION) & ~done[None, :]
            weight = alpha * T_before * mask
            accum += weight.T @ screen.colors[sel]
            cnt = mask.sum(axis=0)
            contrib += cnt
            newly_done = np.any((T_after < TERMINATION) & (alpha > 0) & ~done[None, :], axis=0)
            has = cnt > 0
            T = np.where(
                has, np.take_along_axis(T_after, np.maximum(cnt - 1, 0)[None, :], axis=0)[0], T
            )
            done |= newly_done
            if done.all():
                break

        img = accum + T[:, None] * background[None, :]
        sl = (slice(ty * TILE, ty * TILE + len(ys)), slice(tx * TILE, tx * TILE + len(xs)))
        color[sl] = img.reshape(len(ys), len(xs), 3)
        final_T[sl] = T.reshape(len(ys), len(xs))
        n_contrib[sl] = contrib.reshape(len(ys), len(xs))

    return RenderOutput(color=color, alpha=1.0 - final_T, cache=cache)


def _alphas(screen, conic, sel, px, py):
    """Opacity-weighted kernel values with skip rules applied (k, npx)."""
    dx = px[None, :] - screen.means2d[sel, 0, None]
    dy = py[None, :] - screen.means2d[sel, 1, None]
    A, B, C = conic[sel, 0, None], conic[sel, 1, None], conic[sel, 2, None]
    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
    alpha = np.minimum(ALPHA_CLAMP, screen.opacities[sel, None] * np.exp(power))
    alpha[(power < CUTOFF_POWER) | (power > 0) | (alpha < ALPHA_SKIP)] = 0.0
    return alpha


class StaleIntermediatesError(RuntimeError):
    pass


def rasterize_backward(d_color, cache: RasterCache, screen: ScreenGaussians = None):
    """Gradients of the rendered color image w.r.t. screen-space parameters.

    Returns (d_means2d, d_cov2d, d_colors, d_opacities) over the full
    ScreenGaussians set. The forward's saved sort and contributor counts
    reconstruct the exact compositing state.
    """
    if screen is not None and id(screen) != cache.screen_id:
        raise StaleIntermediatesError("saved intermediates do not match this Gaussian set")
    screen = cache.screen
    if d_color.shape != (cache.height, cache.width, 3):
        raise ValueError(f"gradient image shape {d_color.shape} does not match render")
    conic, _, _ = _conic_and_radius(screen.cov2d)
    n = len(screen)
    d_means2d = np.zeros((n, 2))
    d_cov2d = np.zeros((n, 3))
    d_colors = np.zeros((n, 3))
    d_opacities = np.zeros(n)
    ntx = (cache.width + TILE - 1) // TILE

    for ti in range(len(cache.tile_ids)):
        tid = cache.tile_ids[ti]
        rows = cache.sorted_gauss[cache.tile_bounds[ti]:cache.tile_bounds[ti + 1]]
        tx, ty = tid % ntx, tid // ntx
        xs = np.arange(tx * TILE, min((tx + 1) * TILE, cache.width))
        ys = np.arange(ty * TILE, min((ty + 1) * TILE, cache.height))
        sl = (slice(ty * TILE, ty * TILE + len(ys)), slice(tx * TILE, tx * TILE + len(xs)))
        contrib = cache.n_contrib[sl].ravel()
        depth = int(contrib.max())
        if depth == 0:
            continue
        px = (xs + 0.5)[None, :].repeat(len(ys), axis=0).ravel()
        py = (ys + 0.5)[:, None].repeat(len(xs), axis=1).ravel()
        sel = rows[:depth]
        dC = d_color[sl].reshape(-1, 3)  # (npx, 3)
        T_fin = cache.final_T[sl].ravel()

        dx = px[None, :] - screen.means2d[sel, 0, None]
        dy = py[None, :] - screen.means2d[sel, 1, None]
        A, B, C = conic[sel, 0, None], conic[sel, 1, None], conic[sel, 2, None]
        power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
        G = np.exp(power)
        raw_alpha = screen.opacities[sel, None] * G
        alpha = np.minimum(ALPHA_CLAMP, raw_alpha)
        alpha[(power < CUTOFF_POWER) | (power > 0) | (alpha < ALPHA_SKIP)] = 0.0
        mask = np.arange(depth)[:, None] < contrib[None, :]
        alpha *= mask
        one_minus = 1.0 - alpha
        T_after = np.cumprod(one_minus, axis=0)
        T_before = np.vstack([np.ones((1, len(px))), T_after[:-1]])
        weight = alpha * T_before  # (k, npx)
        cols = screen.colors[sel]  # (k, 3)

        d_col_rows = weight @ dC
        d_alpha = (cols @ dC.T) * T_before
        # suffix_i = sum_{j>i} w_j c_j + bg * T_final, built back-to-front in
        # chunks to keep temporaries small
        rest = cache.background[None, :] * T_fin[:, None]  # (npx, 3)
        for start in range(((depth - 1) // CHUNK) * CHUNK, -1, -CHUNK):
            end = min(start + CHUNK, depth)
            wc = weight[start:end, :, None] * cols[start:end, None, :]
            suffix = np.cumsum(wc[::-1], axis=0)[::-1] - wc
            suffix += rest[None, :, :]
            d_alpha[start:end] -= (
                np.einsum("kpc,pc->kp", suffix, dC) / one_minus[start:end]
            )
            rest = rest + wc.sum(axis=0)
        # alpha = min(0.99, op * G); clamped or skipped entries carry no grad
        d_alpha *= mask & (alpha > 0) & (raw_alpha < ALPHA_CLAMP)

        d_op_rows = (d_alpha * G).sum(axis=1)
        d_power = d_alpha * raw_alpha  # d_alpha * op * G
        dA = -0.5 * ((dx * dx) * d_power).sum(axis=1)
        dB = -((dx * dy) * d_power).sum(axis=1)
        dCc = -0.5 * ((dy * dy) * d_power).sum(axis=1)
        dmx = ((A * dx + B * dy) * d_power).sum(axis=1)
        dmy = ((B * dx + C * dy) * d_power).sum(axis=1)

        # conic -> cov2d: Y = X^-1, G_X = -Y G_Y Y with B split across
        # the two off-diagonal entries
        Y = np.empty((depth, 2, 2))
        Y[:, 0, 0], Y[:, 0, 1] = conic[sel, 0], conic[sel, 1]
        Y[:, 1, 0], Y[:, 1, 1] = conic[sel, 1], conic[sel, 2]
        GY = np.empty((depth, 2, 2))
        GY[:, 0, 0] = dA
        GY[:, 0, 1] = GY[:, 1, 0] = 0.5 * dB
        GY[:, 1, 1] = dCc
        GX = -np.einsum("pab,pbc,pcd->pad", Y, GY, Y)

        np.add.at(d_colors, sel, d_col_rows)
        np.add.at(d_opacities, sel, d_op_rows)
        np.add.at(d_means2d, sel, np.stack([dmx, dmy], axis=1))
        np.add.at(
            d_cov2d, sel,
            np.stack([GX[:, 0, 0], 2.0 * GX[:, 0, 1], GX[:, 1, 1]], axis=1),
        )

    return d_means2d, d_cov2d, d_colors, d_opacities
