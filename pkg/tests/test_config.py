import json

import pytest

from sahmr.config import VARIANTS, RunConfig
from sahmr.errors import ConfigError, MissingInputError


def test_defaults():
    cfg = RunConfig()
    assert (cfg.gamma1, cfg.gamma2, cfg.voxel_size) == (1.25, 0.5, 0.05)
    assert cfg.contact_threshold == 0.07
    assert cfg.w_rz == 10.0
    assert cfg.crop_size == 224
    assert cfg.variants == VARIANTS


def test_json_round_trip(tmp_path):
    cfg = RunConfig(seed=5, n_test=7, saopt_weights=[1, 2, 3, 4], variant="trunk-only")
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg
    assert back.variants == ("trunk-only",)


def test_unknown_key(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"gamma3": 1.0}))
    with pytest.raises(ConfigError, match="gamma3"):
        RunConfig.load(tmp_path / "c.json")


def test_bad_json_and_missing(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "c.json")
    with pytest.raises(MissingInputError):
        RunConfig.load(tmp_path / "nope.json")


@pytest.mark.parametrize("kw", [
    {"gamma1": 0}, {"voxel_size": -0.1}, {"contact_threshold": 0}, {"w_rz": -1},
    {"crop_size": 256}, {"n_test": 0}, {"saopt_weights": (1, 2, 3)},
    {"saopt_weights": (1, -1, 1, 1)}, {"variant": "nope"},
])
def test_invalid_values(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_overrides_skip_none():
    cfg = RunConfig().with_overrides(seed=3, workers=None)
    assert cfg.seed == 3 and cfg.workers == 1


def test_frame_seeds_disjoint():
    cfg = RunConfig()
    seeds = {cfg.frame_seed(s, i) for s in ("train", "test", "pretrain") for i in range(1000)}
    assert len(seeds) == 3000
    assert RunConfig(seed=1).frame_seed("train", 0) != cfg.frame_seed("train", 0)
