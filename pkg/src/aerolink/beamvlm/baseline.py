""" Discriminative reference predictors.

Recurrent classifiers read one pooled feature vector per frame and output a
categorical distribution over the codebook for every future step. The pixel
oracle locates the UAV in the frames and extrapolates its azimuth; on
noiseless linear passes it is exact and bounds what a learned model can do.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from aerolink.beamvlm.errors import ConfigError, UavNotFound
from aerolink.beamvlm.layers import cross_entropy
from aerolink.beamvlm.phy import nearest_beams
from aerolink.beamvlm.scene import HORIZON, column_to_azimuth, reflect, uav_centroid
from aerolink.beamvlm.train import Checkpoint, SceneDataset, fit, make_loader
from aerolink.beamvlm.vlm import PatchEmbedder, prepare_frames

logger = logging.getLogger(__name__)

CELL_TYPES = {'elman': 'rnn', 'lstm': 'lstm'}


@dataclass(frozen=True)
class BaselineConfig:
    cell_type: str = 'lstm'
    hidden_size: int = 128
    d_m: int = 128
    image_size: int = 64
    patch_size: int = 8
    n_frames: int = 8
    horizon: int = HORIZON
    n_beams: int = 32

    @property
    def model_kind(self):
        return CELL_TYPES[self.cell_type]

    def validate(self):
        if self.cell_type not in CELL_TYPES:
            raise ConfigError('cell_type must be elman or lstm, got %r' % self.cell_type)
        if min(self.hidden_size, self.d_m, self.n_frames, self.horizon) < 1:
            raise ConfigError('baseline sizes must be positive')
        if self.image_size % self.patch_size:
            raise ConfigError('image_size %d is not divisible by patch_size %d'
                              % (self.image_size, self.patch_size))
        if self.n_beams < 2:
            raise ConfigError('n_beams must be at least 2')


# Recurrent classifiers ############################################################################
class RecurrentClassifier(nn.Module):
    """ Patch embedder, mean pool per frame, Elman or LSTM cell, linear head. """
    def __init__(self, cfg):
        super(RecurrentClassifier, self).__init__()
        self.config = cfg
        self.embedder = PatchEmbedder(cfg.image_size, cfg.patch_size, cfg.d_m, cfg.n_frames)
        if cfg.cell_type == 'lstm':
            self.cell = nn.LSTM(cfg.d_m, cfg.hidden_size, batch_first=True)
        else:
            self.cell = nn.RNN(cfg.d_m, cfg.hidden_size, nonlinearity='tanh', batch_first=True)
        self.head = nn.Linear(cfg.hidden_size, cfg.horizon * cfg.n_beams)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def forward(self, frames):
        """ (B, F, S, S) normalized frames -> (B, horizon, n_beams) logits. """
        cfg = self.config
        tokens = self.embedder(frames)
        features = tokens.reshape(*tokens.shape[:-2], cfg.n_frames, -1, cfg.d_m).mean(dim=-2)
        out, _ = self.cell(features)
        return self.head(out[:, -1]).reshape(-1, cfg.horizon, cfg.n_beams)


def build_baseline(cfg, seed=0):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return RecurrentClassifier(cfg)


def baseline_forward(clf, frames):
    """ Probability of every beam at every future step.

    :Parameters:
     - 'frames' : raw frame stack (n_frames, H, W) or normalized tensor

    :Returns:
     - float64 array (horizon, n_beams), rows summing to 1
    """
    x = prepare_frames(frames, clf.config, clf.dtype).unsqueeze(0)
    with torch.no_grad():
        logits = clf(x)[0]
    return torch.softmax(logits.double(), dim=-1).numpy()


def horizon_loss(clf, batch):
    """ Cross-entropy summed over the horizon steps, averaged over the batch. """
    logits = clf(batch['frames'].to(clf.dtype))
    targets = batch['targets'] - 1
    n = targets.numel()
    return clf.config.horizon * cross_entropy(logits.reshape(n, -1), targets.reshape(n),
                                              torch.ones(n, dtype=torch.bool))


def train_baseline(clf, manifest, cfg):
    """ Fit a recurrent classifier on the train split.

    :Returns:
     - (Checkpoint, loss curve DataFrame)
    """
    indices = manifest.samples_in('train')
    if not indices:
        raise ConfigError('the dataset split contains no train sample')
    loader = make_loader(SceneDataset(manifest, indices, clf.config.image_size),
                         cfg.batch_size, cfg.seed)
    clf.train()
    params = [p for p in clf.parameters() if p.requires_grad]
    logger.info('training %s baseline with %d parameters on %d samples', clf.config.cell_type,
                sum(p.numel() for p in params), len(indices))
    optimizer, steps, recorder = fit(params, lambda batch: horizon_loss(clf, batch), loader, cfg,
                                     desc=clf.config.cell_type)
    clf.eval()
    curve = recorder.to_frame()
    metadata = dict(seed=cfg.seed, steps=steps, scenario=manifest.scenario_name,
                    loss=float(curve.loss.iloc[-1]) if len(curve) else None)
    return Checkpoint.from_model(clf, clf.config.model_kind, optimizer, metadata), curve


# Pixel oracle #####################################################################################
def oracle_pixel_baseline(frames, cb, world, horizon=HORIZON):
    """ Beams of the UAV position extrapolated from the last two frames.

    The UAV column is the centroid of the pixels at UAV brightness; the
    column moves linearly, mirrored at the image edges, and each predicted
    column is mapped back to an azimuth and its line-of-sight beam.

    :Parameters:
     - 'frames' (array): raw uint8 frame stack, chronological
     - 'cb' (BeamCodebook)
     - 'world' (WorldConfig): the world the frames were rendered in
    """
    frames = np.asarray(frames)
    last, _ = uav_centroid(frames[-1], world)
    try:
        previous, _ = uav_centroid(frames[-2], world)
    except (UavNotFound, IndexError):
        previous = last
    velocity = last - previous
    right = world.image_width - 1
    columns = [reflect(last + k * velocity, 0., right) for k in range(1, horizon + 1)]
    azimuths = [column_to_azimuth(c, world) for c in columns]
    return nearest_beams(np.radians(azimuths), cb)
