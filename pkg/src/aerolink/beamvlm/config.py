""" Run configuration: strict JSON documents mapped onto typed dataclasses.

Each module owns the dataclass of its own concern (``scene.WorldConfig``,
``vlm.VlmConfig``, ``train.TrainConfig`` ...). This module aggregates them in
``RunConfig`` and provides the strict dict -> dataclass conversion.
"""
import dataclasses
import json
import logging
import typing
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from aerolink.beamvlm.errors import ConfigError, StorageError
from aerolink.beamvlm.phy import build_codebook
from aerolink.beamvlm.shared import preset_names, shared_data
from aerolink.beamvlm.scene import WorldConfig, TrajectoryConfig
from aerolink.beamvlm.vlm import VlmConfig
from aerolink.beamvlm.train import TrainConfig
from aerolink.beamvlm.baseline import BaselineConfig

logger = logging.getLogger(__name__)

WINDOW = 13


# Strict conversion ################################################################################
def _dotted(prefix, key):
    return '%s.%s' % (prefix, key) if prefix else str(key)


def _convert(tp, value, key):
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, key)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _convert(inner, value, key)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError('%s must be a list, got %r' % (key, value))
        if origin is list or (len(args) == 2 and args[1] is Ellipsis):
            converted = [_convert(args[0], v, '%s[%d]' % (key, i)) for i, v in enumerate(value)]
            return converted if origin is list else tuple(converted)
        if len(value) != len(args):
            raise ConfigError('%s must have %d entries, got %d' % (key, len(args), len(value)))
        return tuple(_convert(a, v, '%s[%d]' % (key, i)) for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError('%s must be true or false, got %r' % (key, value))
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError('%s must be an integer, got %r' % (key, value))
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError('%s must be a number, got %r' % (key, value))
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError('%s must be a string, got %r' % (key, value))
        return value
    return value


def from_dict(cls, mapping, prefix=''):
    """ Build the dataclass `cls` from a mapping, rejecting unknown keys.

    Nested dataclasses and tuples are converted recursively and the
    ``validate()`` method of the result, when present, is called.

    :Parameters:
     - 'cls' (type): a dataclass
     - 'mapping' (dict): parsed JSON object
     - 'prefix' (str): dotted path of `mapping` in the enclosing document, used in messages

    :Returns:
     - instance of `cls`
    """
    if not isinstance(mapping, Mapping):
        raise ConfigError('%s must be an object, got %r' % (prefix or cls.__name__, mapping))
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    unknown = sorted(set(mapping) - set(names))
    if unknown:
        raise ConfigError('unknown configuration key %r' % _dotted(prefix, unknown[0]))
    kwargs = {k: _convert(hints[k], v, _dotted(prefix, k)) for k, v in mapping.items()}
    try:
        obj = cls(**kwargs)
    except TypeError as err:
        raise ConfigError('%s: %s' % (prefix or cls.__name__, err))
    validate = getattr(obj, 'validate', None)
    if validate is not None:
        validate()
    return obj


def to_dict(obj):
    """ JSON-ready nested dict of a config dataclass. """
    return json.loads(json.dumps(dataclasses.asdict(obj)))


# Sections #########################################################################################
@dataclass(frozen=True)
class CodebookConfig:
    n_antennas: int = 16
    n_beams: int = 32
    sector_deg: Tuple[float, float] = (-45., 45.)
    spacing_ratio: float = 0.5

    def build(self):
        lo, hi = self.sector_deg
        return build_codebook(self.n_antennas, self.n_beams,
                              (np.radians(lo), np.radians(hi)), self.spacing_ratio)

    def validate(self):
        self.build()


@dataclass(frozen=True)
class ScenarioConfig:
    """ Which synthetic scene a dataset is drawn from. """
    name: str = 'uav_linear'
    tag: str = 'UAV'
    n_sequences: int = 220
    train_fraction: float = 0.7
    seed: int = 0

    def validate(self):
        if not self.name:
            raise ConfigError('scenario.name must not be empty')
        if not self.tag:
            raise ConfigError('scenario.tag must not be empty')
        if self.n_sequences < 1:
            raise ConfigError('scenario.n_sequences must be positive, got %d' % self.n_sequences)
        if not 0. < self.train_fraction < 1.:
            raise ConfigError('scenario.train_fraction must lie in (0, 1), got %g'
                              % self.train_fraction)


@dataclass(frozen=True)
class RunConfig:
    """ Everything a subcommand needs, as one strict JSON document. """
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    model: VlmConfig = field(default_factory=VlmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    baseline_train: TrainConfig = field(default_factory=TrainConfig)
    prompt_file: Optional[str] = None

    def validate(self):
        patch = self.model.patch_size
        if self.world.image_width % patch or self.world.image_height % patch:
            raise ConfigError('world image %dx%d is not divisible by model.patch_size=%d'
                              % (self.world.image_width, self.world.image_height, patch))
        if self.trajectory.length < WINDOW:
            raise ConfigError('trajectory.length must be at least %d, got %d'
                              % (WINDOW, self.trajectory.length))
        if self.model.n_beams != self.codebook.n_beams:
            raise ConfigError('model.n_beams=%d differs from codebook.n_beams=%d'
                              % (self.model.n_beams, self.codebook.n_beams))
        if self.baseline.n_beams != self.codebook.n_beams:
            raise ConfigError('baseline.n_beams=%d differs from codebook.n_beams=%d'
                              % (self.baseline.n_beams, self.codebook.n_beams))
        if (self.baseline.n_frames, self.baseline.horizon) != (self.model.n_frames,
                                                                self.model.horizon):
            raise ConfigError('baseline and model disagree on the frame window')

    def to_dict(self):
        return to_dict(self)

    def with_seed(self, seed):
        """ Copy with every seed of the document replaced by `seed`. """
        if seed is None:
            return self
        return dataclasses.replace(
            self,
            scenario=dataclasses.replace(self.scenario, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            baseline_train=dataclasses.replace(self.baseline_train, seed=seed))

    @classmethod
    def from_dict(cls, mapping):
        return from_dict(cls, mapping)

    @classmethod
    def load(cls, source=None):
        """ Read a config file, or a shipped preset given by bare name.

        :Parameters:
         - 'source' (str or Path): file path or one of `preset_names()`; None gives the defaults
        """
        if source is None:
            return cls()
        path = Path(source)
        if not path.exists() and str(source) in preset_names():
            path = shared_data('scenarios/%s.json' % source)
        try:
            text = path.read_text(encoding='utf-8')
        except OSError as err:
            raise StorageError('cannot read config %s: %s' % (source, err))
        try:
            mapping = json.loads(text)
        except ValueError as err:
            raise ConfigError('config %s is not valid JSON: %s' % (source, err))
        logger.debug('loaded config from %s', path)
        return from_dict(cls, mapping)
