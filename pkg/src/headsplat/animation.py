"""Animation sequences: JSON-lines format and a synthetic generator.

One object per line: {"pose": [3*J floats], "expr": [n_expr floats]}.
Real pose/expression exports (speech- or video-derived) use the same
format; the synthetic generator produces smooth sinusoidal trajectories
for tests and demos.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .head_model import AnimationInput, HeadModel


@dataclass
class AnimationSequence:
    poses: np.ndarray        # (T, 3*J)
    expressions: np.ndarray  # (T, n_expr)
    frame_rate: float = 25.0

    def __len__(self):
        return len(self.poses)

    def frame(self, i, shape) -> AnimationInput:
        return AnimationInput(shape=shape, pose=self.poses[i], expression=self.expressions[i])


def synthetic_sequence(model: HeadModel, n_frames: int, seed=0, frame_rate=25.0,
                       pose_amplitude=0.25, expr_amplitude=0.6) -> AnimationSequence:
    """Smooth sinusoidal pose/expression trajectories, deterministic in seed."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) / frame_rate
    n_pose = 3 * model.n_joints

    def waves(n_channels, amplitude):
        freq = rng.uniform(0.2, 1.2, size=n_channels)
        phase = rng.uniform(0, 2 * np.pi, size=n_channels)
        amp = rng.uniform(0.3, 1.0, size=n_channels) * amplitude
        return amp * np.sin(2 * np.pi * freq * t[:, None] + phase)

    return AnimationSequence(
        poses=waves(n_pose, pose_amplitude),
        expressions=waves(model.n_expr, expr_amplitude),
        frame_rate=frame_rate,
    )


def save_sequence(seq: AnimationSequence, path):
    with open(path, "w") as f:
        for pose, expr in zip(seq.poses, seq.expressions):
            f.write(json.dumps({"pose": list(map(float, pose)),
                                "expr": list(map(float, expr))}) + "\n")


def load_sequence(path, model: HeadModel) -> AnimationSequence:
    poses, exprs = [], []
    n_pose = 3 * model.n_joints
    with open(path) as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                pose, expr = obj["pose"], obj["expr"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}: malformed sequence frame {i}: {e}") from e
            if len(pose) != n_pose or len(expr) != model.n_expr:
                raise ValueError(
                    f"{path}: frame {i} dimensions ({len(pose)} pose, {len(expr)} expr) "
                    f"do not match model ({n_pose}, {model.n_expr})"
                )
            poses.append(pose)
            exprs.append(expr)
    if not poses:
        raise ValueError(f"{path}: empty animation sequence")
    return AnimationSequence(
        poses=np.asarray(poses, dtype=np.float64),
        expressions=np.asarray(exprs, dtype=np.float64),
    )
