"""Guidance providers: image-space gradients steering the optimization.

The piecewise denoised score-distillation rule (reference implementation
and conformance fixtures) lives here; actual diffusion inference is a
separate HTTP sidecar speaking the wire protocol below. A photometric
provider gives a closed-loop oracle that exercises the identical gradient
pathway, and an in-process stub returns zeros for determinism tests.

Wire protocol (HTTP):
    POST /v1/gradient  {version, prompt, negative_prompt, cfg, cfg_neg,
                        timestep?, image: {data: b64 f32, width, height,
                        channels}, condition: b64 PNG}
        -> {version, timestep, gradient: {data, width, height, channels}}
    GET  /v1/health    -> {"status": "ok", "version": ...}
"""

import base64
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import requests

from .renderer.imageio import b64_f32, f32_from_b64, png_bytes

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1

NEGATIVE_PROMPT = (
    "unrealistic, blurry, low quality, out of focus, ugly, low contrast, "
    "dull, dark, low-resolution, gloomy"
)

MAX_TIMESTEP = 1000


@dataclass
class SdsConfig:
    t_split: int = 200
    w_mode: str = "constant"  # or "sigma_sq"
    negative_prompt: str = NEGATIVE_PROMPT
    max_timestep: int = MAX_TIMESTEP

    def validate(self):
        if not 0 < self.t_split < self.max_timestep:
            raise ValueError("t_split must lie inside the diffusion schedule")
        if self.w_mode not in ("constant", "sigma_sq"):
            raise ValueError(f"unknown w_mode {self.w_mode!r}")
        return self


def _sigma_sq_schedule(n=MAX_TIMESTEP, beta_start=0.00085, beta_end=0.012):
    betas = np.linspace(beta_start**0.5, beta_end**0.5, n) ** 2
    return 1.0 - np.cumprod(1.0 - betas)


_SIGMA_SQ = None


def timestep_weight(t: int, cfg: SdsConfig) -> float:
    if cfg.w_mode == "constant":
        return 1.0
    global _SIGMA_SQ
    if _SIGMA_SQ is None:
        _SIGMA_SQ = _sigma_sq_schedule(cfg.max_timestep)
    return float(_SIGMA_SQ[t])


def sds_combine(eps_text, eps_neg, t: int, cfg: SdsConfig = None):
    """Piecewise denoised residual from CFG-scaled noise predictions.

    Below the split timestep the prediction is treated as a clean score and
    used directly; at or above it the negative-prompt prediction is
    subtracted. The sampled noise never appears in either branch.
    """
    cfg = cfg or SdsConfig()
    eps_text = np.asarray(eps_text, dtype=np.float64)
    eps_neg = np.asarray(eps_neg, dtype=np.float64)
    if eps_text.shape != eps_neg.shape:
        raise ValueError(f"shape mismatch: {eps_text.shape} vs {eps_neg.shape}")
    if not 0 <= t < cfg.max_timestep:
        raise ValueError(f"timestep {t} outside [0, {cfg.max_timestep})")
    w = timestep_weight(t, cfg)
    if t < cfg.t_split:
        return w * eps_text
    return w * (eps_text - eps_neg)


# view-dependent prompt bands; overhead wins over the azimuth bands
FRONT_MAX_DEG = 45.0
SIDE_MAX_DEG = 135.0
OVERHEAD_MIN_ELEV_DEG = 25.0


def view_prompt(prompt: str, azimuth_deg: float, elevation_deg: float,
                front_max=FRONT_MAX_DEG, side_max=SIDE_MAX_DEG,
                overhead_min_elev=OVERHEAD_MIN_ELEV_DEG) -> str:
    if not -180.0 <= azimuth_deg <= 180.0:
        raise ValueError("azimuth must be in [-180, 180]")
    if elevation_deg > overhead_min_elev:
        suffix = "overhead view"
    elif abs(azimuth_deg) < front_max:
        suffix = "front view"
    elif abs(azimuth_deg) < side_max:
        suffix = "side view"
    else:
        suffix = "back view"
    return f"{prompt}, {suffix}"


@dataclass
class GuidanceRequest:
    image: np.ndarray              # (H, W, 3) float render
    condition: np.ndarray = None   # (H, W, 3) float landmark map
    prompt: str = ""
    negative_prompt: str = NEGATIVE_PROMPT
    cfg_scale: float = 7.5
    cfg_scale_neg: float = 1.0
    timestep: int = None           # pin for reproducible fixtures

    def validate(self):
        if self.cfg_scale <= 0:
            raise ValueError("cfg_scale must be positive")
        if self.condition is not None and self.condition.shape != self.image.shape:
            raise ValueError("condition image size must match the render")
        return self


@dataclass
class GuidanceResponse:
    gradient: np.ndarray  # (H, W, 3) dL/dx
    timestep: int = None
    provider: str = ""

    def validate(self):
        if not np.all(np.isfinite(self.gradient)):
            raise ProtocolError("non-finite gradient from provider")
        return self


class ProtocolError(RuntimeError):
    pass


class TransportError(RuntimeError):
    pass


def serialize_request(req: GuidanceRequest) -> dict:
    req.validate()
    h, w, c = req.image.shape
    body = {
        "version": PROTOCOL_VERSION,
        "prompt": req.prompt,
        "negative_prompt": req.negative_prompt,
        "cfg": req.cfg_scale,
        "cfg_neg": req.cfg_scale_neg,
        "image": {"data": b64_f32(req.image), "width": w, "height": h, "channels": c},
    }
    if req.timestep is not None:
        body["timestep"] = int(req.timestep)
    if req.condition is not None:
        body["condition"] = base64.b64encode(png_bytes(req.condition)).decode()
    return body


def deserialize_request(body: dict) -> GuidanceRequest:
    if body.get("version") != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {body.get('version')!r}")
    img = body["image"]
    image = f32_from_b64(img["data"], (img["height"], img["width"], img["channels"]))
    condition = None
    if "condition" in body:
        import io
        from PIL import Image

        raw = base64.b64decode(body["condition"])
        condition = (
            np.asarray(Image.open(io.BytesIO(raw)).convert("RGB"), dtype=np.float64) / 255.0
        )
    return GuidanceRequest(
        image=image,
        condition=condition,
        prompt=body["prompt"],
        negative_prompt=body["negative_prompt"],
        cfg_scale=body["cfg"],
        cfg_scale_neg=body["cfg_neg"],
        timestep=body.get("timestep"),
    )


def serialize_response(resp: GuidanceResponse) -> dict:
    h, w, c = resp.gradient.shape
    return {
        "version": PROTOCOL_VERSION,
        "timestep": resp.timestep,
        "gradient": {"data": b64_f32(resp.gradient), "width": w, "height": h, "channels": c},
    }


def deserialize_response(body: dict) -> GuidanceResponse:
    if body.get("version") != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {body.get('version')!r}")
    try:
        g = body["gradient"]
        grad = f32_from_b64(g["data"], (g["height"], g["width"], g["channels"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ProtocolError(f"malformed gradient payload: {e}") from e
    return GuidanceResponse(gradient=grad, timestep=body.get("timestep"), provider="remote").validate()


# ---------------------------------------------------------------------------
# providers


def photometric_gradient(render: np.ndarray, target: np.ndarray) -> GuidanceResponse:
    """Mean-squared-error gradient: 2 (render - target) / pixel_count."""
    if render.shape != target.shape:
        raise ValueError(f"size mismatch: {render.shape} vs {target.shape}")
    n_pix = render.shape[0] * render.shape[1]
    return GuidanceResponse(
        gradient=2.0 * (render - target) / n_pix, provider="photometric"
    )


class PhotometricProvider:
    """Closed-loop oracle: pull renders toward fixed target views."""

    name = "photometric"

    def __init__(self, targets):
        self.targets = targets  # list of (H, W, 3) images, indexed by view id

    def gradient(self, render, condition, view_index, camera) -> GuidanceResponse:
        return photometric_gradient(render, self.targets[view_index])


class StubProvider:
    """Zero gradient; keeps the full loop running for determinism tests."""

    name = "stub"

    def gradient(self, render, condition, view_index, camera) -> GuidanceResponse:
        return GuidanceResponse(gradient=np.zeros_like(render), provider="stub")


class FixtureReplayProvider:
    """Replays a recorded response regardless of the request."""

    name = "fixture-replay"

    def __init__(self, fixture_path):
        body = json.loads(Path(fixture_path).read_text())
        self.response = deserialize_response(body)

    def gradient(self, render, condition, view_index, camera) -> GuidanceResponse:
        g = self.response.gradient
        if g.shape != render.shape:
            raise ProtocolError(f"fixture gradient {g.shape} does not match render {render.shape}")
        return self.response


class RemoteProvider:
    """Diffusion sidecar client; retries transport failures with backoff."""

    name = "remote"

    def __init__(self, endpoint, prompt, sds: SdsConfig = None, cfg_scale=7.5,
                 cfg_scale_neg=1.0, retries=3, backoff=0.25, timeout=120.0,
                 session=None):
        self.endpoint = endpoint.rstrip("/")
        self.prompt = prompt
        self.sds = (sds or SdsConfig()).validate()
        self.cfg_scale = cfg_scale
        self.cfg_scale_neg = cfg_scale_neg
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()

    def health(self) -> dict:
        r = self.session.get(f"{self.endpoint}/v1/health", timeout=self.timeout)
        r.raise_for_status()
        return r.json()

    def gradient(self, render, condition, view_index, camera) -> GuidanceResponse:
        prompt = view_prompt(self.prompt, camera.azimuth_deg, camera.elevation_deg)
        req = GuidanceRequest(
            image=render,
            condition=condition,
            prompt=prompt,
            negative_prompt=self.sds.negative_prompt,
            cfg_scale=self.cfg_scale,
            cfg_scale_neg=self.cfg_scale_neg,
        )
        return remote_gradient(self.endpoint, req, session=self.session,
                               retries=self.retries, backoff=self.backoff,
                               timeout=self.timeout)


def remote_gradient(endpoint, req: GuidanceRequest, session=None, retries=3,
                    backoff=0.25, timeout=120.0) -> GuidanceResponse:
    session = session or requests
    body = serialize_request(req)
    last = None
    for attempt in range(retries):
        try:
            r = session.post(f"{endpoint.rstrip('/')}/v1/gradient", json=body, timeout=timeout)
        except requests.RequestException as e:
            last = e
            time.sleep(backoff * (2**attempt))
            continue
        if r.status_code >= 500:
            last = TransportError(f"server error {r.status_code}")
            time.sleep(backoff * (2**attempt))
            continue
        if r.status_code != 200:
            raise ProtocolError(f"gradient request rejected: {r.status_code} {r.text[:200]}")
        try:
            payload = r.json()
        except ValueError as e:
            raise ProtocolError(f"non-JSON response: {e}") from e
        return deserialize_response(payload)
    raise TransportError(f"gradient request failed after {retries} attempts: {last}")


# ---------------------------------------------------------------------------
# built-in echo stub server (zero gradients over the real wire protocol)


class _StubHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def _send(self, code, payload):
        raw = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def do_GET(self):
        if self.path == "/v1/health":
            self._send(200, {"status": "ok", "version": PROTOCOL_VERSION, "provider": "stub"})
        else:
            self._send(404, {"error": "not found"})

    def do_POST(self):
        if self.path != "/v1/gradient":
            self._send(404, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            req = deserialize_request(json.loads(self.rfile.read(length)))
        except (ProtocolError, KeyError, ValueError) as e:
            self._send(400, {"error": str(e)})
            return
        resp = GuidanceResponse(
            gradient=np.zeros_like(req.image), timestep=req.timestep or 0, provider="stub"
        )
        self._send(200, serialize_response(resp))


class StubGuidanceServer:
    """In-process HTTP stub implementing the guidance wire protocol."""

    def __init__(self, port=0):
        self._httpd = ThreadingHTTPServer(("127.0.0.1", port), _StubHandler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def endpoint(self):
        return f"http://127.0.0.1:{self._httpd.server_address[1]}"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)


# ---------------------------------------------------------------------------
# conformance fixtures

FIXTURE_TIMESTEPS = (1, 199, 200, 999)


def generate_fixtures(out_dir, seed=20240917):
    """Write the committed guidance fixtures: piecewise-rule branch table and
    a golden request/response pair for wire-schema conformance."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cfg = SdsConfig()
    shape = (6, 6, 3)
    eps_text = rng.normal(size=shape).astype(np.float32).astype(np.float64)
    eps_neg = rng.normal(size=shape).astype(np.float32).astype(np.float64)
    written = []
    for t in FIXTURE_TIMESTEPS:
        residual = sds_combine(eps_text, eps_neg, t, cfg)
        payload = {
            "t": t,
            "t_split": cfg.t_split,
            "w_mode": cfg.w_mode,
            "shape": list(shape),
            "eps_text": b64_f32(eps_text),
            "eps_neg": b64_f32(eps_neg),
            "residual": b64_f32(residual),
        }
        p = out / f"sds_t{t:04d}.json"
        p.write_text(json.dumps(payload, indent=1))
        written.append(p)

    image = rng.uniform(0.0, 1.0, size=(8, 8, 3)).astype(np.float32).astype(np.float64)
    condition = np.zeros((8, 8, 3))
    condition[2:6, 3:5, 0] = 1.0
    req = GuidanceRequest(
        image=image, condition=condition, prompt="a portrait of an astronaut",
        timestep=100,
    )
    req_body = serialize_request(req)
    resp_body = serialize_response(
        GuidanceResponse(gradient=np.zeros_like(image), timestep=100, provider="stub")
    )
    (out / "request_golden.json").write_text(json.dumps(req_body, indent=1))
    (out / "response_golden.json").write_text(json.dumps(resp_body, indent=1))
    written += [out / "request_golden.json", out / "response_golden.json"]
    return written


def load_sds_fixture(path):
    body = json.loads(Path(path).read_text())
    shape = tuple(body["shape"])
    return {
        "t": body["t"],
        "eps_text": f32_from_b64(body["eps_text"], shape),
        "eps_neg": f32_from_b64(body["eps_neg"], shape),
        "residual": f32_from_b64(body["residual"], shape),
    }
