import json

import pytest

from lipread3d.config import GRID_ROWS, ExperimentConfig, StageConfig, default_grid, load_grid
from lipread3d.errors import ConfigError


def test_defaults_validate_and_aliases_normalise():
    c = ExperimentConfig(inputs=["grayscale"]).validate()
    assert c.inputs == ["gray"]
    c = ExperimentConfig(inputs=["flow", "gray"], frontend="TwoStream(I3D)").validate()
    assert c.inputs == ["gray", "flow"]


@pytest.mark.parametrize("doc", [
    {"inputs": ["gray", "flow"], "frontend": "I3D"},
    {"inputs": ["gray"], "frontend": "TwoStream(I3D)"},
    {"inputs": ["depth"]},
    {"inputs": []},
    {"backend": "GRU"},
    {"pretrain": "everything"},
    {"width_multiplier": "1/3"},
    {"epochs": 0},
    {"lr": 0.0},
    {"flow_clip_max": -1.0},
    {"frontend": "VGG"},
])
def test_invalid_combinations_are_config_errors(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="learning_rate"):
        ExperimentConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"round1": {"classes": 3, "bogus": 1}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict([1, 2])


def test_save_load_round_trip(tmp_path):
    c = ExperimentConfig(name="x", frontend="Res2D", width_multiplier="1/4", betas=(0.8, 0.99),
                         round1=StageConfig(classes=3), stop_at_train_acc=0.9)
    c.save(tmp_path / "c.json")
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back == c
    assert isinstance(back.round1, StageConfig) and back.betas == (0.8, 0.99)


def test_numeric_multiplier_is_accepted():
    c = ExperimentConfig.from_dict({"width_multiplier": 0.125})
    assert c.m == ExperimentConfig().m


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.json")


def test_default_grid_covers_every_row_with_shared_settings():
    base = ExperimentConfig(seed=7, lr=1e-3)
    grid = default_grid(base)
    assert [c.name for c in grid] == [f"row_{r}" for r in GRID_ROWS]
    assert all(c.seed == 7 and c.lr == 1e-3 for c in grid)
    for c in grid:
        assert c.kind.two_stream == (c.inputs == ["gray", "flow"])
    with pytest.raises(ConfigError):
        default_grid(base, "az")


def test_load_grid_both_forms(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps({"base": {"epochs": 2}, "rows": "ab"}))
    grid = load_grid(p)
    assert [c.backend for c in grid] == ["TC1D", "BiLSTM"] and all(c.epochs == 2 for c in grid)
    p.write_text(json.dumps({"configs": [{"name": "only", "frontend": "Res2D"}]}))
    assert [c.name for c in load_grid(p)] == ["only"]
    with pytest.raises(ConfigError):
        load_grid(tmp_path / "none.json")
