"""Training configuration: dataclasses, profiles, and the TOML config file.

Two named profiles exist: "paper" carries the published training settings
(10k iterations, 1024 px, batch 8, shape freeze at 8k) and "desk" scales
the same schedule down to something a laptop CPU finishes in minutes.
"""

import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .gaussians import DensifyConfig
from .guidance import SdsConfig
from .regularize import RegConfig
from .renderer.camera import CameraRanges


class ConfigError(ValueError):
    pass


@dataclass
class FitConfig:
    iterations: int = 10_000
    batch_size: int = 8
    resolution: int = 1024
    shape_freeze_iter: int = 8_000
    betas: tuple = (0.9, 0.99)
    lr_position: float = 5e-5
    lr_scaling: float = 1e-3
    lr_rotation: float = 1e-2
    lr_color: float = 1.25e-2
    lr_opacity: float = 1e-2
    lr_shape: float = 1e-3
    init_k: int = 10
    init_scale_mode: str = "sqrt"
    seed: int = 0
    threads: int = 1
    background: tuple = (0.0, 0.0, 0.0)
    provider: str = "stub"          # stub | photometric | remote | fixture-replay
    prompt: str = ""
    endpoint: str = ""
    fixture_path: str = ""
    animation_path: str = ""        # JSON-lines sequence; synthetic if empty
    animation_frames: int = 64      # synthetic sequence length
    failure_abort_fraction: float = 0.05
    cfg_scale: float = 7.5
    cfg_scale_neg: float = 1.0
    camera: CameraRanges = field(default_factory=CameraRanges)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    sds: SdsConfig = field(default_factory=SdsConfig)

    def validate(self):
        if self.shape_freeze_iter > self.iterations:
            raise ConfigError("shape_freeze_iter must be <= iterations")
        for f in fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive")
        if self.provider not in ("stub", "photometric", "remote", "fixture-replay"):
            raise ConfigError(f"unknown provider {self.provider!r}")
        self.camera.validate()
        self.densify.validate()
        self.reg.validate()
        self.sds.validate()
        return self

    def learning_rates(self):
        return {
            "positions": self.lr_position,
            "log_scalings": self.lr_scaling,
            "rotations": self.lr_rotation,
            "color_logits": self.lr_color,
            "opacity_logits": self.lr_opacity,
            "beta": self.lr_shape,
        }


def paper_profile() -> FitConfig:
    return FitConfig()


def desk_profile() -> FitConfig:
    cfg = FitConfig(
        iterations=2000,
        batch_size=2,
        resolution=96,
        shape_freeze_iter=1600,
        init_k=6,
        lr_position=2e-4,
        lr_scaling=5e-3,
        lr_rotation=1e-2,
        lr_color=2.5e-2,
        lr_opacity=2.5e-2,
        lr_shape=4e-3,
        densify=DensifyConfig(
            start_iter=400, end_iter=1500, interval=300, max_points=20_000
        ),
    )
    cfg.camera.width = cfg.camera.height = cfg.resolution
    return cfg


PROFILES = {"paper": paper_profile, "desk": desk_profile}


# ---------------------------------------------------------------------------
# minimal TOML subset reader (sections, scalars, flat arrays)

_SECTION_RE = re.compile(r"^\[([A-Za-z0-9_.\-]+)\]$")
_KEY_RE = re.compile(r"^([A-Za-z0-9_\-]+)\s*=\s*(.+)$")


def _parse_value(text, where):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError(f"{where}: unterminated array")
        inner = text[1:-1].strip()
        if not inner:
            return []
        parts, depth, cur = [], 0, ""
        for ch in inner:
            if ch == "[":
                depth += 1
            elif ch == "]":
                depth -= 1
            if ch == "," and depth == 0:
                parts.append(cur)
                cur = ""
            else:
                cur += ch
        parts.append(cur)
        return [_parse_value(p, where) for p in parts]
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1].replace('\\"', '"').replace("\\\\", "\\").replace("\\n", "\n")
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {text!r}") from None


def read_toml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    root, section = {}, None
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = root
            for part in m.group(1).split("."):
                section = section.setdefault(part, {})
            continue
        m = _KEY_RE.match(line)
        if not m:
            raise ConfigError(f"{path}:{lineno}: cannot parse line {line!r}")
        key, value = m.group(1), m.group(2)
        if "#" in value and not value.strip().startswith('"'):
            value = value.split("#", 1)[0]
        target = section if section is not None else root
        target[key] = _parse_value(value, f"{path}:{lineno}")
    return root


_SUBSECTIONS = {"camera": CameraRanges, "densify": DensifyConfig, "reg": RegConfig, "sds": SdsConfig}
_TUPLE_KEYS = {
    "betas", "background", "distance", "fovy_deg", "elevation_deg",
    "azimuth_deg", "look_at",
}


def _apply(obj, data, where):
    valid = {f.name for f in fields(obj)}
    for key, value in data.items():
        if key not in valid:
            raise ConfigError(f"invalid config key {where}{key}")
        if isinstance(value, dict):
            raise ConfigError(f"invalid config key {where}{key} (unexpected table)")
        if key in _TUPLE_KEYS and isinstance(value, list):
            value = tuple(value)
        setattr(obj, key, value)


def load_fit_config(path, profile="desk") -> FitConfig:
    """FitConfig from a TOML file layered on a named profile.

    Top-level keys map onto FitConfig; [camera], [densify], [reg], [sds]
    sections map onto their sub-configs. Unknown keys are an error.
    """
    data = read_toml(path)
    profile_name = data.pop("profile", profile)
    if profile_name not in PROFILES:
        raise ConfigError(f"unknown profile {profile_name!r}; choose from {sorted(PROFILES)}")
    cfg = PROFILES[profile_name]()
    sub = {name: data.pop(name, {}) for name in _SUBSECTIONS}
    _apply(cfg, data, "")
    for name, payload in sub.items():
        if payload:
            _apply(getattr(cfg, name), payload, f"{name}.")
    if "width" not in sub["camera"]:
        cfg.camera.width = cfg.camera.height = cfg.resolution
    return cfg.validate()
