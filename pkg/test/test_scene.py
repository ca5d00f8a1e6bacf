""" Test trajectories, rendering and the on-disk dataset """

# Imports #########################################################################
import json

import numpy as np
import pytest
from PIL import Image

from aerolink.beamvlm.config import ScenarioConfig
from aerolink.beamvlm.errors import (ConfigError, FormatError, OutOfView, SampleOutOfRange,
                                     StorageError, UavNotFound, VersionError)
from aerolink.beamvlm.phy import ChannelRealization, optimal_beam
from aerolink.beamvlm.scene import (DatasetManifest, Obstacle, TrajectoryConfig, UavState,
                                    WorldConfig, build_dataset, column_to_azimuth,
                                    label_sequence, load_frames, load_sample, pixel_column,
                                    reflect, render_frame, scenario_trajectories,
                                    simulate_trajectory, split_dataset, uav_centroid)

from rigging import linear_trajectories, tiny_codebook, tiny_dataset, tiny_world

# Tests ###########################################################################
def test_reflect():
    """ Values outside the interval are mirrored back inside. """
    assert reflect(3., 0., 10.) == 3.
    assert reflect(12., 0., 10.) == 8.
    assert reflect(-2., 0., 10.) == 2.
    assert reflect(23., 0., 10.) == 3.

def test_trajectory_is_reproducible():
    cfg = TrajectoryConfig(motion_model='arc', jitter_std=0.3, length=30, seed=5)
    world = WorldConfig()
    assert simulate_trajectory(cfg, world) == simulate_trajectory(cfg, world)

@pytest.mark.parametrize('motion', ['linear-pass', 'arc', 'waypoint-spline'])
def test_trajectory_bounds(motion):
    """ Azimuths stay in the field of view and move at most speed + 3 jitter per step.

    Parameters
    ----------
    motion: str
        Motion model of the trajectory
    """
    world = WorldConfig()
    for seed in range(10):
        cfg = TrajectoryConfig(motion_model=motion, speed=2., jitter_std=0.2, length=40,
                               seed=seed)
        states = simulate_trajectory(cfg, world)
        az = np.array([s.azimuth_deg for s in states])
        assert len(states) == 40
        assert np.all(np.abs(az) <= 45.)
        assert np.all(np.abs(np.diff(az)) <= 2. + 3 * 0.2 + 1e-9)

def test_zero_elevation_ground_track():
    world = WorldConfig(elevation_range=(-10., 30.))
    cfg = TrajectoryConfig(motion_model='waypoint-spline', elevation=0., length=20)
    assert all(s.elevation_deg == 0. for s in simulate_trajectory(cfg, world))

def test_trajectory_errors():
    world = WorldConfig()
    with pytest.raises(ConfigError):
        simulate_trajectory(TrajectoryConfig(length=0), world)
    with pytest.raises(ConfigError):
        simulate_trajectory(TrajectoryConfig(edge_margin=50.), world)

def test_scenario_seeds_differ():
    """ Each sequence of a scenario draws its own seed from the root seed. """
    cfgs = scenario_trajectories(ScenarioConfig(n_sequences=5, seed=3), TrajectoryConfig())
    assert len(set(c.seed for c in cfgs)) == 5
    again = scenario_trajectories(ScenarioConfig(n_sequences=5, seed=3), TrajectoryConfig())
    assert [c.seed for c in cfgs] == [c.seed for c in again]

def test_column_mapping_inverse():
    world = tiny_world()
    for col in range(world.image_width):
        assert np.isclose(pixel_column(column_to_azimuth(col, world), world), col)
    assert pixel_column(-45., world) == 0.
    assert np.isclose(pixel_column(45., world), world.image_width - 1)

def test_render_and_locate():
    """ The rendered UAV centroid sits at the column of its azimuth. """
    world = tiny_world()
    az = column_to_azimuth(6, world)
    frame = render_frame(UavState(az, 11., 60.), world)
    assert frame.dtype == np.uint8 and frame.shape == (16, 16)
    col, _ = uav_centroid(frame, world)
    assert np.isclose(col, 6.)

def test_render_out_of_view():
    with pytest.raises(OutOfView):
        render_frame(UavState(50., 10., 60.), tiny_world())

def test_obstacle_hides_uav():
    """ An obstacle covering the UAV is drawn and the UAV is not. """
    world = WorldConfig(obstacles=(Obstacle((-10., 10.), (0., 20.), 0.4),))
    frame = render_frame(UavState(0., 10., 60.), world)
    assert frame.max() == int(round(0.4 * 255))
    with pytest.raises(UavNotFound):
        uav_centroid(frame, world)

def test_label_sequence_matches_oracle():
    cb = tiny_codebook()
    states = [UavState(a, 5., 50.) for a in (-40., -3., 0., 22.5, 44.)]
    expected = [optimal_beam(ChannelRealization.line_of_sight(np.radians(s.azimuth_deg), 16), cb)
                for s in states]
    assert label_sequence(states, cb) == expected
    with pytest.raises(ConfigError):
        label_sequence([], cb)

def test_dataset_arithmetic(tmp_path):
    """ A sequence of length L yields L - 12 windows; the split keeps ceil(0.7 n) for training. """
    world = tiny_world()
    cfgs = linear_trajectories(4, 17, world)
    manifest = build_dataset(world, cfgs, tiny_codebook(), tmp_path)
    assert manifest.sample_count == 4 * (17 - 12)
    assert manifest.samples_in('train') == []
    split = split_dataset(manifest, 0.7, seed=1)
    assert len(split.samples_in('train')) == 14
    assert len(split.samples_in('test')) == 6
    assert sorted(split.samples_in('train') + split.samples_in('test')) == list(range(20))

def test_generation_is_thread_independent(tmp_path):
    world = tiny_world()
    cfgs = linear_trajectories(3, 13, world)
    build_dataset(world, cfgs, tiny_codebook(), tmp_path / 'one', threads=1)
    build_dataset(world, cfgs, tiny_codebook(), tmp_path / 'four', threads=4)
    for name in ('labels.jsonl', 'manifest.json', 'frames/2/7.pgm'):
        one = (tmp_path / 'one' / name).read_bytes()
        four = (tmp_path / 'four' / name).read_bytes()
        if name == 'manifest.json':
            assert json.loads(one)['samples'] == json.loads(four)['samples']
        else:
            assert one == four

def test_samples_agree_with_labels(tmp_path):
    """ Every stored sample carries the oracle beams of its azimuths and the right frames. """
    manifest = tiny_dataset(tmp_path)
    loaded = DatasetManifest.load(tmp_path)
    cb = loaded.beam_codebook()
    world = loaded.world_config()
    for index in range(loaded.sample_count):
        sample = load_sample(loaded, index)
        assert sample.frames.shape == (8, 16, 16)
        assert len(sample.target_beams) == 5 and len(sample.history_beams) == 8
        beams = [optimal_beam(ChannelRealization.line_of_sight(np.radians(a), 16), cb)
                 for a in sample.azimuths_deg]
        assert tuple(beams) == sample.history_beams + sample.target_beams
        col, _ = uav_centroid(sample.frames[-1], world)
        assert np.isclose(col, pixel_column(sample.azimuths_deg[7], world))
    assert loaded.samples_in('test') == manifest.samples_in('test')
    labels = loaded.labels()
    assert list(labels.columns[:3]) == ['seq', 't', 'beam']
    assert len(labels) == 3 * 14

def test_sample_index_range(tmp_path):
    """ Out-of-range indices raise SampleOutOfRange, which is also an IndexError. """
    manifest = tiny_dataset(tmp_path)
    with pytest.raises(SampleOutOfRange):
        load_sample(manifest, manifest.sample_count)
    with pytest.raises(IndexError):
        load_sample(manifest, -1)

def test_rgb_frames_are_converted(tmp_path):
    """ Frames stored as RGB are read back as grayscale. """
    manifest = tiny_dataset(tmp_path)
    path = tmp_path / 'frames' / '0' / '0.pgm'
    gray = np.asarray(Image.open(path))
    Image.fromarray(np.stack([gray] * 3, axis=-1)).save(path, format='PPM')
    assert np.array_equal(load_frames(manifest, 0, [0])[0], gray)

def test_storage_errors(tmp_path):
    """ Missing frames, bad images and newer format versions are reported. """
    manifest = tiny_dataset(tmp_path)
    (tmp_path / 'frames' / '1' / '3.pgm').unlink()
    with pytest.raises(StorageError):
        load_frames(manifest, 1, [3])
    (tmp_path / 'frames' / '1' / '4.pgm').write_bytes(b'not an image')
    with pytest.raises(FormatError):
        load_frames(manifest, 1, [4])
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(tmp_path / 'frames' / '1' / '5.pgm',
                                                           format='PPM')
    with pytest.raises(FormatError):
        load_frames(manifest, 1, [5])

    doc = json.loads((tmp_path / 'manifest.json').read_text())
    doc['format_version'] = 99
    (tmp_path / 'manifest.json').write_text(json.dumps(doc))
    with pytest.raises(VersionError):
        DatasetManifest.load(tmp_path)
    with pytest.raises(StorageError):
        DatasetManifest.load(tmp_path / 'nowhere')
