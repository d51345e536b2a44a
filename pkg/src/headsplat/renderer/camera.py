"""Perspective cameras and the random training-view sampler."""

import math
from dataclasses import dataclass, field

import numpy as np

NEAR_PLANE = 0.01


@dataclass(frozen=True)
class CameraSample:
    distance: float
    fovy_deg: float
    elevation_deg: float
    azimuth_deg: float
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 512
    height: int = 512

    def position(self):
        az = math.radians(self.azimuth_deg)
        el = math.radians(self.elevation_deg)
        d = self.distance
        return self.look_at + d * np.array(
            [math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)]
        )

    def world_to_camera(self):
        """OpenCV-style extrinsics: x right, y down, z forward."""
        pos = self.position()
        fwd = self.look_at - pos
        fwd = fwd / np.linalg.norm(fwd)
        up = np.array([0.0, 1.0, 0.0])
        if abs(fwd @ up) > 0.999:
            up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return R, -R @ pos

    def intrinsics(self):
        fy = self.height / (2.0 * math.tan(math.radians(self.fovy_deg) / 2.0))
        return fy, fy, self.width / 2.0, self.height / 2.0

    def tan_half_fov(self):
        tan_y = math.tan(math.radians(self.fovy_deg) / 2.0)
        return tan_y * self.width / self.height, tan_y


@dataclass
class CameraRanges:
    """Uniform sampling ranges for training views (defaults from training setup)."""

    distance: tuple = (1.5, 2.0)
    fovy_deg: tuple = (40.0, 70.0)
    elevation_deg: tuple = (-30.0, 30.0)
    azimuth_deg: tuple = (-180.0, 180.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    width: int = 512
    height: int = 512

    def validate(self):
        for name in ("distance", "fovy_deg", "elevation_deg", "azimuth_deg"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"camera range {name} has lo > hi")
        return self


def sample_camera(rng, ranges: CameraRanges) -> CameraSample:
    """One uniform draw per dimension, in a fixed order (deterministic in rng)."""
    draw = lambda lo_hi: float(rng.uniform(lo_hi[0], lo_hi[1]))
    return CameraSample(
        distance=draw(ranges.distance),
        fovy_deg=draw(ranges.fovy_deg),
        elevation_deg=draw(ranges.elevation_deg),
        azimuth_deg=draw(ranges.azimuth_deg),
        look_at=np.asarray(ranges.look_at, dtype=np.float64),
        width=ranges.width,
        height=ranges.height,
    )
