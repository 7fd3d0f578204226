import copy

import pytest
import yaml

from conftest import toy_config
from dtpstereo.accounting import infer_shapes
from dtpstereo.config import LayerSpec, ModelConfig, build_config
from dtpstereo.errors import ConfigError


@pytest.mark.parametrize("setting", ["Setting1", "Setting2", "Setting3"])
def test_build_validates(setting):
    cfg = build_config(setting, 192, 16)
    assert cfg.cost_channels == 48
    assert cfg.layers[-1].out_channels == 192
    assert [m for m in ("feature", "cost_volume", "regression") if cfg.module_layers(m)] == \
        ["feature", "cost_volume", "regression"]


def test_hourglass_count_per_setting():
    count = lambda s: len({l.name.split("_")[0] for l in build_config(s).layers
                           if l.name.startswith("hg")})
    assert (count("Setting1"), count("Setting2"), count("Setting3")) == (3, 1, 1)


def test_kernels_are_3x3_pad_1(setting3):
    for l in setting3.layers:
        if l.kind in ("conv2d", "transpose_conv2d"):
            assert (l.kernel, l.padding) == (3, 1)


def test_yaml_round_trip(setting3, tmp_path):
    path = tmp_path / "m.yaml"
    setting3.save(path)
    again = ModelConfig.load(path)
    assert again.to_dict() == setting3.to_dict()
    assert again.digest() == setting3.digest()
    # one line per layer keeps the file reviewable
    assert path.read_text().count("\n  - ") == len(setting3.layers)


def test_yaml_is_plain_data(setting3):
    data = yaml.safe_load(setting3.to_yaml())
    assert data["d_max"] == 192 and len(data["layers"]) == len(setting3.layers)


@pytest.mark.parametrize("d_max", [0, 30, -4])
def test_bad_d_max(d_max):
    with pytest.raises(ConfigError):
        build_config("Setting3", d_max)


def test_unknown_setting():
    with pytest.raises(ConfigError):
        build_config("Setting9")


def _mutate(cfg, name, **changes):
    cfg = copy.deepcopy(cfg)
    spec = cfg.layer(name)
    for k, v in changes.items():
        setattr(spec, k, v)
    return cfg


@pytest.mark.parametrize("name,changes,match", [
    ("cv1", {"in_channels": 7}, "in_channels"),
    ("cv3", {"out_channels": 40}, None),
    ("feat1_down_bn", {"out_channels": 9}, None),
    ("cv1", {"kind": "pool"}, "unknown layer kind"),
    ("cv1", {"inputs": ["nowhere"]}, "not defined"),
    ("cv_concat", {"inputs": ["up:feat_out", "right:feat_out"]}, "view prefix"),
    ("cv1", {"module": "feature"}, None),
    ("hg1_d1", {"match": None}, "match"),
])
def test_invalid_configs_rejected(setting3, name, changes, match):
    with pytest.raises(ConfigError, match=match):
        _mutate(setting3, name, **changes).validate()


def test_logit_head_width_enforced():
    cfg = toy_config()
    cfg.layers[-2].out_channels = 4
    cfg.layers[-1].in_channels = cfg.layers[-1].out_channels = 4
    with pytest.raises(ConfigError, match="d_max"):
        cfg.validate()


def test_duplicate_names_rejected():
    cfg = toy_config()
    cfg.layers.insert(1, LayerSpec("f1", "activation", ["f1"], 4, 4, module="feature"))
    with pytest.raises(ConfigError, match="duplicate"):
        cfg.validate()


def test_shapes_quarter_then_full(setting3):
    shapes = infer_shapes(setting3, 64, 96)
    assert shapes["feat_out"] == (80, 16, 24)
    assert shapes["cv3"] == (48, 16, 24)
    assert shapes["hg1_e2b"] == (128, 4, 6)
    assert shapes["reg_upsample"] == (192, 64, 96)


def test_shapes_with_odd_quarter_size(setting3):
    # 376 / 4 = 94, 94 / 2 = 47, 47 -> 24 -> transposed back to 47 and 94
    shapes = infer_shapes(setting3, 376, 1240)
    assert shapes["hg1_e2b"][1] == 24
    assert shapes["hg1_d1"][1:] == shapes["hg1_e1b"][1:]
    assert shapes["reg_upsample"] == (192, 376, 1240)
