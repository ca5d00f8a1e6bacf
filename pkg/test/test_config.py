""" Test the strict run configuration """

# Imports #########################################################################
import json

import pytest

from aerolink.beamvlm.config import CodebookConfig, RunConfig, ScenarioConfig, from_dict
from aerolink.beamvlm.errors import ConfigError, InvalidSector, StorageError
from aerolink.beamvlm.scene import Obstacle, WorldConfig
from aerolink.beamvlm.shared import preset_names

# Tests ###########################################################################
def test_presets_load():
    """ Both shipped scenarios load, validate and survive a dict round trip. """
    assert preset_names() == ['uav_linear', 'v2i_ground']
    uav = RunConfig.load('uav_linear')
    assert uav.scenario.tag == 'UAV' and uav.trajectory.snap_to_pixels
    v2i = RunConfig.load('v2i_ground')
    assert v2i.scenario.tag == 'V2I' and v2i.train.mode == 'lora_only'
    assert all(isinstance(ob, Obstacle) for ob in v2i.world.obstacles)
    assert len(v2i.world.obstacles) == 2
    for cfg in (uav, v2i):
        assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert RunConfig.load() == RunConfig()

def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict(dict(train=dict(epoch=3)))
    assert 'train.epoch' in str(info.value)
    with pytest.raises(ConfigError):
        RunConfig.from_dict(dict(colour='blue'))

def test_types_are_checked():
    for bad in (dict(train=dict(epochs='3')), dict(train=dict(epochs=2.5)),
                dict(trajectory=dict(snap_to_pixels=1)), dict(codebook=dict(sector_deg=[1.])),
                dict(world='flat'), dict(scenario=dict(seed=True))):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)
    fov = from_dict(WorldConfig, dict(camera_fov=90)).camera_fov
    assert isinstance(fov, float) and fov == 90.

def test_section_validation():
    with pytest.raises(InvalidSector):
        from_dict(CodebookConfig, dict(sector_deg=[10., -10.]))
    with pytest.raises(ConfigError):
        from_dict(ScenarioConfig, dict(train_fraction=1.5))
    with pytest.raises(ConfigError):
        from_dict(ScenarioConfig, dict(n_sequences=0))

def test_cross_checks():
    """ Sections that must agree with each other are checked together. """
    with pytest.raises(ConfigError):
        RunConfig.from_dict(dict(world=dict(image_width=60, image_height=60)))
    with pytest.raises(ConfigError):
        RunConfig.from_dict(dict(trajectory=dict(length=12)))
    with pytest.raises(ConfigError):
        RunConfig.from_dict(dict(codebook=dict(n_beams=24)))
    with pytest.raises(ConfigError):
        RunConfig.from_dict(dict(baseline=dict(n_beams=24)))
    with pytest.raises(ConfigError):
        RunConfig.from_dict(dict(baseline=dict(horizon=3)))

def test_with_seed():
    cfg = RunConfig.load('uav_linear').with_seed(11)
    assert cfg.scenario.seed == cfg.train.seed == cfg.baseline_train.seed == 11
    assert RunConfig().with_seed(None) == RunConfig()

def test_load_errors(tmp_path):
    with pytest.raises(StorageError):
        RunConfig.load(tmp_path / 'missing.json')
    broken = tmp_path / 'broken.json'
    broken.write_text('{"train": ')
    with pytest.raises(ConfigError):
        RunConfig.load(broken)
    good = tmp_path / 'good.json'
    good.write_text(json.dumps(dict(train=dict(epochs=2))))
    assert RunConfig.load(good).train.epochs == 2
