"""Adaptive geometry regularization with analytic gradients.

Position and scaling penalties clamp below a tolerance proportional to the
bound triangle's size tau, and the per-point combination is downweighted by
sqrt(area), so Gaussians on large triangles (jaw, skull) keep freedom to
model off-surface detail while small-triangle regions (eyes, lips) stay
tightly rigged. The world rotation never enters: ||R' mu|| == ||mu||.
"""

from dataclasses import dataclass

import numpy as np

from .binding import TriangleFrames
from .gaussians import BoundCloud


@dataclass
class RegConfig:
    lambda_pos: float = 0.1
    lambda_scale: float = 0.1
    tol_pos_factor: float = 0.5
    tol_scale_factor: float = 0.5

    def validate(self):
        if min(self.lambda_pos, self.lambda_scale, self.tol_pos_factor, self.tol_scale_factor) <= 0:
            raise ValueError("regularization parameters must be positive")
        return self


def position_penalty(mu, area, tau, tol_factor=0.5):
    """max(sqrt(a) * ||mu||, tol * tau) per point, plus gradient w.r.t. mu.

    Zero gradient inside the tolerance ball (the clamp is active).
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    area = np.atleast_1d(np.asarray(area, dtype=np.float64))
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    sq = np.sqrt(area)
    r = np.linalg.norm(mu, axis=1)
    v = sq * r
    tol = tol_factor * tau
    value = np.maximum(v, tol)
    active = v > tol
    safe_r = np.where(r > 0, r, 1.0)
    grad = np.where(active[:, None], (sq / safe_r)[:, None] * mu, 0.0)
    return value, grad


def scaling_penalty(s, area, tau, tol_factor=0.5):
    """||max(sqrt(a) * s, tol * tau)||_2 per point, plus gradient w.r.t. s.

    The clamp is componentwise; clamped components get zero gradient.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    area = np.atleast_1d(np.asarray(area, dtype=np.float64))
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    sq = np.sqrt(area)[:, None]
    m = np.maximum(sq * s, (tol_factor * tau)[:, None])
    value = np.linalg.norm(m, axis=1)
    active = (sq * s) > (tol_factor * tau)[:, None]
    grad = np.where(active, sq * m / value[:, None], 0.0)
    return value, grad


def reg_loss(cloud: BoundCloud, frames: TriangleFrames, cfg: RegConfig):
    """Mean over points of (lp*L_pos + ls*L_s)/sqrt(a) with a, tau from each
    point's bound triangle.

    Returns (loss, d_mu, d_s_activated); the caller chains d_s through the
    exp activation. Gradients w.r.t. a and tau are not propagated (the
    tolerances act as constants of the current pose).
    """
    b = cloud.bindings
    area = frames.areas[b]
    tau = frames.sizes[b]
    p, dp = position_penalty(cloud.positions, area, tau, cfg.tol_pos_factor)
    m, dm = scaling_penalty(cloud.scalings, area, tau, cfg.tol_scale_factor)
    inv = 1.0 / np.sqrt(area)
    n = len(cloud)
    loss = float(np.mean((cfg.lambda_pos * p + cfg.lambda_scale * m) * inv))
    w = (inv / n)[:, None]
    return loss, cfg.lambda_pos * w * dp, cfg.lambda_scale * w * dm
