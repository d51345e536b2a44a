import pytest

from headsplat.config import (
    ConfigError,
    desk_profile,
    load_fit_config,
    paper_profile,
    read_toml,
)


def test_paper_profile_defaults():
    cfg = paper_profile()
    assert cfg.iterations == 10_000
    assert cfg.batch_size == 8
    assert cfg.resolution == 1024
    assert cfg.shape_freeze_iter == 8_000
    assert cfg.betas == (0.9, 0.99)
    assert cfg.lr_position == 5e-5
    assert cfg.lr_scaling == 1e-3
    assert cfg.lr_rotation == 1e-2
    assert cfg.lr_color == 1.25e-2
    assert cfg.lr_opacity == 1e-2
    assert cfg.lr_shape == 1e-3
    assert cfg.init_k == 10
    assert cfg.camera.distance == (1.5, 2.0)
    assert cfg.camera.fovy_deg == (40.0, 70.0)
    assert cfg.camera.elevation_deg == (-30.0, 30.0)
    assert cfg.camera.azimuth_deg == (-180.0, 180.0)
    assert cfg.sds.t_split == 200
    assert cfg.reg.lambda_pos == 0.1 and cfg.reg.lambda_scale == 0.1


def test_desk_profile_scales_schedule():
    cfg = desk_profile()
    assert cfg.iterations < 10_000
    assert cfg.shape_freeze_iter < cfg.iterations
    assert cfg.camera.width == cfg.resolution


def test_toml_reader_basics(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(
        """
# comment
iterations = 500
shape_freeze_iter = 400
prompt = "a portrait of a knight"
provider = "stub"
background = [0.5, 0.5, 0.5]

[camera]
distance = [1.6, 1.9]
width = 128
height = 128

[densify]
start_iter = 100
end_iter = 400
interval = 100

[sds]
t_split = 200
"""
    )
    cfg = load_fit_config(p, profile="desk")
    assert cfg.iterations == 500
    assert cfg.prompt == "a portrait of a knight"
    assert cfg.background == (0.5, 0.5, 0.5)
    assert cfg.camera.distance == (1.6, 1.9)
    assert cfg.camera.width == 128
    assert cfg.densify.start_iter == 100


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_fit_config(tmp_path / "missing.toml")


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("iterationz = 5\n")
    with pytest.raises(ConfigError, match="invalid config key iterationz"):
        load_fit_config(p)


def test_unknown_section_key_rejected(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[densify]\nmax_pointz = 5\n")
    with pytest.raises(ConfigError, match="densify.max_pointz"):
        load_fit_config(p)


def test_bad_value_rejected(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("iterations = five\n")
    with pytest.raises(ConfigError, match="cannot parse value"):
        load_fit_config(p)


def test_validation_freeze_after_iterations(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("iterations = 10\nshape_freeze_iter = 20\n")
    with pytest.raises(ConfigError, match="freeze"):
        load_fit_config(p)


def test_read_toml_types(tmp_path):
    p = tmp_path / "t.toml"
    p.write_text('a = 1\nb = 2.5\nc = true\nd = "s"\ne = [1, 2]\nf = -3e-4\n')
    data = read_toml(p)
    assert data == {"a": 1, "b": 2.5, "c": True, "d": "s", "e": [1, 2], "f": -3e-4}
