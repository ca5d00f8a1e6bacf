""" Test the recurrent baselines and the pixel oracle """

# Imports #########################################################################
import numpy as np
import pytest
import torch

from aerolink.beamvlm.baseline import (BaselineConfig, RecurrentClassifier, baseline_forward,
                                       build_baseline, horizon_loss, oracle_pixel_baseline,
                                       train_baseline)
from aerolink.beamvlm.config import from_dict
from aerolink.beamvlm.errors import ConfigError, UavNotFound
from aerolink.beamvlm.phy import nearest_beams
from aerolink.beamvlm.scene import (UavState, WorldConfig, column_to_azimuth, load_sample,
                                    render_frame)
from aerolink.beamvlm.train import (TrainConfig, load_checkpoint, model_from_checkpoint,
                                    save_checkpoint)

from rigging import tiny_codebook, tiny_dataset, tiny_world

def tiny_baseline_config(**kwds):
    params = dict(hidden_size=8, d_m=8, image_size=16, patch_size=8)
    params.update(kwds)
    return BaselineConfig(**params)

def pass_frames(world, columns, elevation=12., range_m=60.):
    """ Frames of a UAV at the given pixel columns. """
    return np.stack([render_frame(UavState(column_to_azimuth(c, world), elevation, range_m),
                                  world) for c in columns])

# Tests ###########################################################################
def test_config_validation():
    assert from_dict(BaselineConfig, dict(cell_type='elman')).model_kind == 'rnn'
    assert BaselineConfig().model_kind == 'lstm'
    for bad in (dict(cell_type='gru'), dict(hidden_size=0), dict(image_size=60),
                dict(n_beams=1)):
        with pytest.raises(ConfigError):
            from_dict(BaselineConfig, bad)

@pytest.mark.parametrize('cell', ['elman', 'lstm'])
def test_classifier_shapes(cell):
    """ Logits cover every horizon step and every beam; rows of probabilities sum to one.

    Parameters
    ----------
    cell: str
        Recurrent cell type
    """
    cfg = tiny_baseline_config(cell_type=cell)
    clf = build_baseline(cfg, seed=1)
    frames = torch.rand(3, 8, 16, 16) * 2 - 1
    assert tuple(clf(frames).shape) == (3, 5, 32)
    raw = np.random.default_rng(0).integers(0, 256, (8, 16, 16), dtype=np.uint8)
    probs = baseline_forward(clf, raw)
    assert probs.shape == (5, 32) and probs.dtype == np.float64
    assert np.allclose(probs.sum(axis=1), 1.)
    assert isinstance(clf.cell, torch.nn.LSTM if cell == 'lstm' else torch.nn.RNN)

def test_build_baseline_is_seeded():
    cfg = tiny_baseline_config()
    a, b = build_baseline(cfg, seed=2), build_baseline(cfg, seed=2)
    assert all(torch.equal(a.state_dict()[k], b.state_dict()[k]) for k in a.state_dict())
    c = build_baseline(cfg, seed=3)
    assert not torch.equal(a.head.weight, c.head.weight)

def test_horizon_loss_of_uniform_head():
    """ A zero head gives log(M) per step, summed over the horizon. """
    clf = RecurrentClassifier(tiny_baseline_config())
    with torch.no_grad():
        clf.head.weight.zero_()
        clf.head.bias.zero_()
    batch = dict(frames=torch.zeros(2, 8, 16, 16), targets=torch.randint(1, 33, (2, 5)))
    assert np.isclose(float(horizon_loss(clf, batch)), 5 * np.log(32.), rtol=1e-5)

def test_train_baseline_round_trip(tmp_path):
    """ Training runs, lowers the loss and the checkpoint reloads to the same probabilities. """
    manifest = tiny_dataset(tmp_path / 'data')
    clf = build_baseline(tiny_baseline_config(cell_type='elman'))
    cfg = TrainConfig(epochs=20, batch_size=3, learning_rate=1e-2, weight_decay=0., log_every=0)
    ckpt, curve = train_baseline(clf, manifest, cfg)
    assert ckpt.model_kind == 'rnn' and len(curve) == 20
    assert curve.loss.iloc[-1] < curve.loss.iloc[0]
    again = model_from_checkpoint(load_checkpoint(save_checkpoint(ckpt, tmp_path / 'rnn.ckpt')))
    sample = load_sample(manifest, 0)
    assert np.allclose(baseline_forward(again, sample.frames), baseline_forward(clf, sample.frames))

def test_train_baseline_needs_train_split(tmp_path):
    manifest = tiny_dataset(tmp_path)
    manifest.samples = [dict(s, split='test') for s in manifest.samples]
    with pytest.raises(ConfigError):
        train_baseline(build_baseline(tiny_baseline_config()), manifest, TrainConfig(epochs=1))

def test_oracle_is_exact_on_linear_passes(tmp_path):
    """ On noiseless pixel-snapped passes the extrapolated beams are the labels. """
    manifest = tiny_dataset(tmp_path, n_sequences=4)
    cb, world = manifest.beam_codebook(), manifest.world_config()
    for index in range(manifest.sample_count):
        sample = load_sample(manifest, index)
        assert tuple(oracle_pixel_baseline(sample.frames, cb, world)) == sample.target_beams

def test_oracle_reflects_at_the_edge():
    """ A UAV heading out of the image bounces back off the last column. """
    world = tiny_world()
    cb = tiny_codebook()
    beams = oracle_pixel_baseline(pass_frames(world, range(6, 14)), cb, world)
    columns = [14, 15, 14, 13, 12]
    assert beams == nearest_beams([np.radians(column_to_azimuth(c, world)) for c in columns], cb)

def test_oracle_without_previous_uav():
    """ A UAV hidden in the previous frame gives a standing prediction. """
    world = WorldConfig(image_width=16, image_height=16)
    cb = tiny_codebook()
    frames = pass_frames(world, [3] * 8)
    frames[-2] = 0
    beams = oracle_pixel_baseline(frames, cb, world)
    assert len(set(beams)) == 1
    frames[-1] = 0
    with pytest.raises(UavNotFound):
        oracle_pixel_baseline(frames, cb, world)
