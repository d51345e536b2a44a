"""Image output: 8-bit PNG for display, raw planar f32 blobs for fixtures."""

import base64
import json
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image):
    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, image):
    """image: (H, W, 3) or (H, W) float in [0, 1]."""
    Image.fromarray(to_uint8(image)).save(str(path))


def read_png(path):
    return np.asarray(Image.open(str(path)).convert("RGB"), dtype=np.float64) / 255.0


def png_bytes(image) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return buf.getvalue()


def write_raw_f32(path, image):
    """Planar little-endian f32 blob (channels, then rows), dims in a sidecar."""
    path = Path(path)
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    planar = np.ascontiguousarray(arr.transpose(2, 0, 1))
    path.write_bytes(planar.tobytes())
    meta = {"height": arr.shape[0], "width": arr.shape[1], "channels": arr.shape[2]}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta))


def read_raw_f32(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    planar = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(
        meta["channels"], meta["height"], meta["width"]
    )
    return planar.transpose(1, 2, 0).astype(np.float64)


def b64_f32(arr) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode()


def f32_from_b64(data: str, shape):
    arr = np.frombuffer(base64.b64decode(data), dtype="<f4")
    return arr.reshape(shape).astype(np.float64)
