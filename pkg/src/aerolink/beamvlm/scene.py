""" Synthetic world and dataset factory.

A UAV (or a ground vehicle) moves in front of the base station camera. Its
trajectory is rendered as grayscale frames and every timestep is labelled
with the exhaustive-search optimal beam of a line-of-sight channel towards it.
Sequences are cut in sliding windows of 8 observed frames followed by the 5
beams to predict.

On-disk layout of a dataset directory::

    manifest.json
    labels.jsonl
    frames/<seq>/<t>.pgm
"""
import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas
from PIL import Image, UnidentifiedImageError
from scipy.interpolate import PchipInterpolator
from tqdm import tqdm

from aerolink.beamvlm.errors import (ConfigError, FormatError, OutOfView, SampleOutOfRange,
                                     StorageError, UavNotFound, VersionError)
from aerolink.beamvlm.phy import BeamCodebook, nearest_beams

logger = logging.getLogger(__name__)

N_FRAMES = 8
HORIZON = 5
WINDOW = N_FRAMES + HORIZON
FORMAT_VERSION = 1
MOTION_MODELS = ('linear-pass', 'arc', 'waypoint-spline')


# Configuration ####################################################################################
@dataclass(frozen=True)
class Obstacle:
    """ Static rectangle in the camera view, in degrees. """
    azimuth_span: Tuple[float, float]
    elevation_span: Tuple[float, float]
    brightness: float = 0.5

    def covers(self, azimuth, elevation):
        return (self.azimuth_span[0] <= azimuth <= self.azimuth_span[1] and
                self.elevation_span[0] <= elevation <= self.elevation_span[1])

    def validate(self):
        if not self.azimuth_span[0] < self.azimuth_span[1]:
            raise ConfigError('obstacle azimuth span %s is empty' % (self.azimuth_span,))
        if not self.elevation_span[0] < self.elevation_span[1]:
            raise ConfigError('obstacle elevation span %s is empty' % (self.elevation_span,))
        if not 0. <= self.brightness <= 1.:
            raise ConfigError('obstacle brightness must lie in [0, 1], got %g' % self.brightness)


@dataclass(frozen=True)
class WorldConfig:
    """ Camera and scene parameters.

    The disc drawn for the UAV has radius max(1, round(image_width * disc_scale / range)).
    """
    camera_fov: float = 90.
    image_width: int = 64
    image_height: int = 64
    obstacles: Tuple[Obstacle, ...] = ()
    uav_brightness: float = 1.
    elevation_range: Tuple[float, float] = (0., 30.)
    range_range: Tuple[float, float] = (20., 120.)
    disc_scale: float = 1.25

    @property
    def half_fov(self):
        return self.camera_fov / 2.

    @property
    def uav_level(self):
        return int(round(self.uav_brightness * 255))

    def validate(self):
        if self.camera_fov != 90.:
            raise ConfigError('the camera azimuth field of view is fixed to 90 degrees, got %g'
                              % self.camera_fov)
        if self.image_width < 2 or self.image_height < 2:
            raise ConfigError('image must be at least 2x2, got %dx%d'
                              % (self.image_width, self.image_height))
        if not 0. < self.uav_brightness <= 1.:
            raise ConfigError('uav_brightness must lie in (0, 1], got %g' % self.uav_brightness)
        if self.elevation_range[0] > self.elevation_range[1]:
            raise ConfigError('elevation_range %s is reversed' % (self.elevation_range,))
        if not 0. < self.range_range[0] <= self.range_range[1]:
            raise ConfigError('range_range %s must be positive and ordered' % (self.range_range,))
        for ob in self.obstacles:
            if ob.azimuth_span[0] < -self.half_fov or ob.azimuth_span[1] > self.half_fov:
                raise ConfigError('obstacle span %s leaves the camera field of view'
                                  % (ob.azimuth_span,))
            if int(round(ob.brightness * 255)) >= self.uav_level:
                raise ConfigError('obstacles must be darker than the UAV')


@dataclass(frozen=True)
class TrajectoryConfig:
    """ Motion of one sequence.

    `speed` is in degrees of azimuth per timestep, `jitter_std` in degrees.
    Unset optional fields are drawn from the seeded generator.
    """
    motion_model: str = 'linear-pass'
    speed: float = 1.5
    jitter_std: float = 0.
    length: int = 20
    seed: int = 0
    start_azimuth: Optional[float] = None
    direction: Optional[int] = None
    elevation: Optional[float] = None
    range_m: Optional[float] = None
    range_rate: float = 0.
    edge_margin: float = 3.
    snap_to_pixels: bool = False
    n_waypoints: int = 4

    def validate(self):
        if self.motion_model not in MOTION_MODELS:
            raise ConfigError('unknown motion model %r, expected one of %s'
                              % (self.motion_model, ', '.join(MOTION_MODELS)))
        if self.length <= 0:
            raise ConfigError('trajectory length must be positive, got %d' % self.length)
        if self.speed < 0 or self.jitter_std < 0:
            raise ConfigError('speed and jitter_std must be nonnegative')
        if self.direction not in (None, -1, 1):
            raise ConfigError('direction must be -1 or 1, got %r' % self.direction)
        if self.n_waypoints < 2:
            raise ConfigError('a spline needs at least 2 waypoints')


# Records ##########################################################################################
@dataclass(frozen=True)
class UavState:
    azimuth_deg: float
    elevation_deg: float
    range_m: float


@dataclass(frozen=True, eq=False)
class Sample:
    """ One sliding window: 8 observed frames and the 5 beams that follow. """
    frames: np.ndarray
    target_beams: Tuple[int, ...]
    history_beams: Tuple[int, ...]
    sequence_id: int
    offset: int
    azimuths_deg: Tuple[float, ...] = ()


# Trajectories #####################################################################################
def reflect(x, lo, hi):
    """ Fold x into [lo, hi] by mirror reflection at both edges. """
    if lo <= x <= hi:
        return x
    width = hi - lo
    y = (x - lo) % (2 * width)
    return lo + (y if y <= width else 2 * width - y)


def _jitter_walk(cfg, rng):
    """ Random walk whose increments are N(0, jitter_std) clipped at 3 sigma. """
    if cfg.jitter_std == 0:
        return np.zeros(cfg.length)
    steps = np.clip(rng.normal(0., cfg.jitter_std, cfg.length),
                    -3 * cfg.jitter_std, 3 * cfg.jitter_std)
    steps[0] = 0.
    return np.cumsum(steps)


def _linear_pass(cfg, rng, lo, hi, t):
    direction = cfg.direction
    if direction is None:
        if cfg.start_azimuth is not None:
            direction = 1 if cfg.start_azimuth <= 0 else -1
        else:
            direction = 1 if rng.random() < 0.5 else -1
    start = cfg.start_azimuth
    if start is None:
        span = cfg.speed * (cfg.length - 1)
        if span >= hi - lo:
            start = lo if direction > 0 else hi
        elif direction > 0:
            start = rng.uniform(lo, hi - span)
        else:
            start = rng.uniform(lo + span, hi)
    return [start + direction * cfg.speed * k for k in t]


def _arc(cfg, rng, lo, hi, t):
    omega = rng.uniform(0.1, 0.5)
    amplitude = min(cfg.speed / omega, (hi - lo) / 2.)
    center = rng.uniform(lo + amplitude, hi - amplitude)
    phase = rng.uniform(0., 2 * np.pi)
    return list(center + amplitude * np.sin(omega * t + phase))


def _waypoint_spline(cfg, rng, lo, hi, t):
    knots = np.linspace(0., cfg.length - 1, cfg.n_waypoints)
    segment = knots[1] - knots[0] if cfg.length > 1 else 1.
    points = [rng.uniform(lo, hi) if cfg.start_azimuth is None else cfg.start_azimuth]
    for _ in knots[1:]:
        step = rng.uniform(-1., 1.) * cfg.speed * segment / 3.
        points.append(float(np.clip(points[-1] + step, lo, hi)))
    if cfg.length == 1:
        return points[:1]
    return list(PchipInterpolator(knots, points)(t))


_MOTIONS = {'linear-pass': _linear_pass, 'arc': _arc, 'waypoint-spline': _waypoint_spline}


def simulate_trajectory(cfg, world):
    """ UAV states for every timestep of one sequence.

    The base path of the motion model moves at most `speed` degrees per step;
    a clipped Gaussian jitter walk is added on top and the result is mirrored
    at the sector edges, so consecutive azimuths differ by at most
    speed + 3 * jitter_std.

    Parameters
    ----------
    cfg: TrajectoryConfig
    world: WorldConfig

    Returns
    -------
        list of UavState, one per timestep
    """
    if cfg.length <= 0:
        raise ConfigError('trajectory length must be positive, got %d' % cfg.length)
    if cfg.motion_model not in _MOTIONS:
        raise ConfigError('unknown motion model %r' % cfg.motion_model)
    rng = np.random.default_rng(cfg.seed)
    edge = world.half_fov
    lo, hi = -edge + cfg.edge_margin, edge - cfg.edge_margin
    if lo >= hi:
        raise ConfigError('edge_margin %g leaves no room in the sector' % cfg.edge_margin)
    t = np.arange(cfg.length)

    base = _MOTIONS[cfg.motion_model](cfg, rng, lo, hi, t)
    walk = _jitter_walk(cfg, rng)
    azimuths = [reflect(float(b + w), -edge, edge) for b, w in zip(base, walk)]
    if cfg.snap_to_pixels:
        azimuths = [column_to_azimuth(round(pixel_column(a, world)), world) for a in azimuths]

    el_lo, el_hi = world.elevation_range
    if cfg.elevation is not None:
        elevations = np.full(cfg.length, float(cfg.elevation))
    elif cfg.motion_model == 'linear-pass':
        elevations = np.full(cfg.length, rng.uniform(el_lo + 0.2 * (el_hi - el_lo),
                                                     el_hi - 0.2 * (el_hi - el_lo)))
    else:
        mid, amp = (el_lo + el_hi) / 2., (el_hi - el_lo) / 4.
        elevations = mid + amp * np.sin(np.pi * t / max(cfg.length - 1, 1))
    r_lo, r_hi = world.range_range
    r0 = cfg.range_m if cfg.range_m is not None else rng.uniform(r_lo, r_hi)
    ranges = np.clip(r0 + cfg.range_rate * t, r_lo, r_hi)

    return [UavState(azimuth_deg=float(a), elevation_deg=float(e), range_m=float(r))
            for a, e, r in zip(azimuths, elevations, ranges)]


def scenario_trajectories(scenario, template):
    """ One trajectory config per sequence of a scenario, each with its own derived seed.

    Parameters
    ----------
    scenario: ScenarioConfig
        gives `n_sequences` and the root `seed`
    template: TrajectoryConfig
        shared motion parameters
    """
    children = np.random.SeedSequence(scenario.seed).spawn(scenario.n_sequences)
    return [dataclasses.replace(template, seed=int(c.generate_state(1)[0])) for c in children]


# Rendering ########################################################################################
def pixel_column(azimuth, world):
    """ Image column of an azimuth in degrees (may be fractional). """
    return (azimuth + world.half_fov) / world.camera_fov * (world.image_width - 1)


def column_to_azimuth(column, world):
    return column / (world.image_width - 1) * world.camera_fov - world.half_fov


def pixel_row(elevation, world):
    lo, hi = world.elevation_range
    if hi == lo:
        return (world.image_height - 1) / 2.
    return (hi - elevation) / (hi - lo) * (world.image_height - 1)


def disc_radius(range_m, world):
    return max(1, int(round(world.image_width * world.disc_scale / range_m)))


def render_frame(state, world):
    """ Grayscale camera frame of one UAV state.

    Obstacles are painted first; the UAV disc is skipped when an obstacle
    covers its position. Background is 0.

    Returns
    -------
        uint8 array of shape (image_height, image_width)
    """
    if not -world.half_fov <= state.azimuth_deg <= world.half_fov:
        raise OutOfView('azimuth %g deg is outside the camera field of view' % state.azimuth_deg)
    frame = np.zeros((world.image_height, world.image_width), dtype=np.uint8)
    rows, cols = np.mgrid[0:world.image_height, 0:world.image_width]

    for ob in world.obstacles:
        c0, c1 = (pixel_column(a, world) for a in ob.azimuth_span)
        r0, r1 = sorted(pixel_row(e, world) for e in ob.elevation_span)
        inside = (cols >= round(c0)) & (cols <= round(c1)) & (rows >= round(r0)) & (rows <= round(r1))
        frame[inside] = int(round(ob.brightness * 255))

    if any(ob.covers(state.azimuth_deg, state.elevation_deg) for ob in world.obstacles):
        return frame
    cx, cy = pixel_column(state.azimuth_deg, world), pixel_row(state.elevation_deg, world)
    radius = disc_radius(state.range_m, world)
    frame[(cols - cx) ** 2 + (rows - cy) ** 2 <= radius ** 2] = world.uav_level
    return frame


def uav_centroid(frame, world):
    """ (column, row) centroid of the pixels at UAV brightness. """
    rows, cols = np.nonzero(np.asarray(frame) >= world.uav_level)
    if cols.size == 0:
        raise UavNotFound('no pixel reaches the UAV level %d' % world.uav_level)
    return float(cols.mean()), float(rows.mean())


# Labels ###########################################################################################
def label_sequence(states, cb):
    """ Optimal beam of a unit-gain line-of-sight channel for each state. """
    if not states:
        raise ConfigError('cannot label an empty sequence')
    return nearest_beams(np.radians([s.azimuth_deg for s in states]), cb)


# Dataset ##########################################################################################
@dataclass(eq=False)
class DatasetManifest:
    """ Index of a dataset directory.

    `samples` holds one dict per sliding window with keys index, seq,
    offset and split ('train', 'test' or None before splitting).
    """
    root: Path
    scenario_name: str
    scenario_tag: str
    codebook: dict
    world: dict
    trajectories: list
    sequences: list
    samples: list
    image_width: int
    image_height: int
    channels: int = 1
    format_version: int = FORMAT_VERSION
    _labels: Optional[dict] = field(default=None, repr=False)

    @property
    def sample_count(self):
        return len(self.samples)

    def samples_in(self, split):
        """ Sample indices of a split ('train', 'test'), or of every sample for None. """
        return [s['index'] for s in self.samples if split is None or s['split'] == split]

    def beam_codebook(self):
        return BeamCodebook.from_dict(self.codebook)

    def world_config(self):
        from aerolink.beamvlm.config import from_dict
        return from_dict(WorldConfig, self.world)

    def to_dict(self):
        return dict(format_version=self.format_version, scenario_name=self.scenario_name,
                    scenario_tag=self.scenario_tag, codebook=self.codebook, world=self.world,
                    trajectories=self.trajectories, sequences=self.sequences,
                    image_width=self.image_width, image_height=self.image_height,
                    channels=self.channels, samples=self.samples)

    def save(self):
        path = Path(self.root) / 'manifest.json'
        try:
            path.write_text(json.dumps(self.to_dict(), indent=1), encoding='utf-8')
        except OSError as err:
            raise StorageError('cannot write %s: %s' % (path, err))
        return path

    @classmethod
    def load(cls, root):
        root = Path(root)
        path = root / 'manifest.json'
        try:
            doc = json.loads(path.read_text(encoding='utf-8'))
        except FileNotFoundError:
            raise StorageError('no dataset manifest at %s' % path)
        except OSError as err:
            raise StorageError('cannot read %s: %s' % (path, err))
        except ValueError as err:
            raise FormatError('manifest %s is not valid JSON: %s' % (path, err))
        version = doc.get('format_version')
        if not isinstance(version, int):
            raise FormatError('manifest %s has no format_version' % path)
        if version > FORMAT_VERSION:
            raise VersionError('dataset format version %d is newer than the supported %d'
                               % (version, FORMAT_VERSION))
        try:
            return cls(root=root, **doc)
        except TypeError as err:
            raise FormatError('manifest %s is malformed: %s' % (path, err))

    def label_records(self):
        """ Per-timestep label records keyed by (seq, t). """
        if self._labels is None:
            path = Path(self.root) / 'labels.jsonl'
            try:
                lines = path.read_text(encoding='utf-8').splitlines()
            except OSError as err:
                raise StorageError('cannot read %s: %s' % (path, err))
            try:
                records = [json.loads(line) for line in lines if line.strip()]
            except ValueError as err:
                raise FormatError('labels %s are not valid JSON Lines: %s' % (path, err))
            self._labels = {(r['seq'], r['t']): r for r in records}
        return self._labels

    def labels(self):
        """ Label records as a DataFrame, ordered by sequence and time. """
        records = sorted(self.label_records().values(), key=lambda r: (r['seq'], r['t']))
        return pandas.DataFrame.from_records(records)


def _sequence_windows(length):
    return max(0, length - WINDOW + 1)


def _write_sequence(args):
    seq, cfg, world, cb, root = args
    states = simulate_trajectory(cfg, world)
    beams = label_sequence(states, cb)
    folder = root / 'frames' / str(seq)
    folder.mkdir(parents=True, exist_ok=True)
    for t, state in enumerate(states):
        Image.fromarray(render_frame(state, world)).save(folder / ('%d.pgm' % t), format='PPM')
    return [dict(seq=seq, t=t, beam=int(b), azimuth_deg=s.azimuth_deg,
                 elevation_deg=s.elevation_deg, range_m=s.range_m)
            for t, (s, b) in enumerate(zip(states, beams))]


def build_dataset(world, traj_cfgs, cb, out_dir, scenario_name='custom', scenario_tag='UAV',
                  threads=1, progress=False):
    """ Simulate, render and label every sequence, then write the dataset.

    Each sequence of length L yields L - 12 windows. Frames are stored once
    per sequence; samples reference them by (sequence, offset). The output
    does not depend on `threads`.

    Parameters
    ----------
    world: WorldConfig
    traj_cfgs: list of TrajectoryConfig
        one per sequence
    cb: BeamCodebook
    out_dir: str or Path

    Returns
    -------
        the saved, still unsplit, DatasetManifest
    """
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise StorageError('cannot create dataset directory %s: %s' % (root, err))
    for cfg in traj_cfgs:
        cfg.validate()

    jobs = [(seq, cfg, world, cb, root) for seq, cfg in enumerate(traj_cfgs)]
    try:
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            per_sequence = list(tqdm(pool.map(_write_sequence, jobs), total=len(jobs),
                                     desc='sequences', disable=not progress))
    except OSError as err:
        raise StorageError('cannot write dataset frames under %s: %s' % (root, err))

    try:
        with open(root / 'labels.jsonl', 'w', encoding='utf-8') as stream:
            for records in per_sequence:
                for rec in records:
                    stream.write(json.dumps(rec) + '\n')
    except OSError as err:
        raise StorageError('cannot write labels under %s: %s' % (root, err))

    samples = []
    for seq, cfg in enumerate(traj_cfgs):
        for offset in range(_sequence_windows(cfg.length)):
            samples.append(dict(index=len(samples), seq=seq, offset=offset, split=None))
    manifest = DatasetManifest(
        root=root, scenario_name=scenario_name, scenario_tag=scenario_tag,
        codebook=cb.to_dict(), world=dataclasses.asdict(world),
        trajectories=[dataclasses.asdict(c) for c in traj_cfgs],
        sequences=[dict(seq=seq, length=c.length) for seq, c in enumerate(traj_cfgs)],
        samples=samples, image_width=world.image_width, image_height=world.image_height)
    manifest.save()
    logger.info('generated %d sequences and %d samples in %s', len(traj_cfgs), len(samples), root)
    return manifest


def split_dataset(manifest, train_fraction=0.7, seed=0):
    """ Assign every sample to 'train' or 'test'.

    Samples are shuffled with a seeded permutation; the first
    ceil(train_fraction * n) go to train.

    Returns
    -------
        a new DatasetManifest (not saved)
    """
    if not 0. < train_fraction < 1.:
        raise ConfigError('train_fraction must lie in (0, 1), got %g' % train_fraction)
    n = manifest.sample_count
    n_train = int(math.ceil(round(train_fraction * n, 9)))
    order = np.random.default_rng(seed).permutation(n)
    train = set(int(i) for i in order[:n_train])
    samples = [dict(s, split='train' if k in train else 'test')
               for k, s in enumerate(manifest.samples)]
    logger.info('split %d samples: %d train, %d test', n, n_train, n - n_train)
    return dataclasses.replace(manifest, samples=samples, _labels=manifest._labels)


def _read_frame(path, width, height):
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == 'RGB':
                im = im.convert('L')
            mode, pixels = im.mode, np.asarray(im)
    except FileNotFoundError:
        raise StorageError('missing frame %s' % path)
    except UnidentifiedImageError:
        raise FormatError('%s is not a PGM/PPM image' % path)
    except OSError as err:
        raise FormatError('cannot decode %s: %s' % (path, err))
    if mode != 'L':
        raise FormatError('%s has unsupported pixel mode %s' % (path, mode))
    if pixels.shape != (height, width):
        raise FormatError('%s is %dx%d, expected %dx%d'
                          % (path, pixels.shape[1], pixels.shape[0], width, height))
    return pixels


def load_frames(manifest, seq, times):
    """ Stack of stored frames of one sequence, shape (len(times), H, W). """
    folder = Path(manifest.root) / 'frames' / str(seq)
    return np.stack([_read_frame(folder / ('%d.pgm' % t), manifest.image_width,
                                 manifest.image_height) for t in times])


def load_sample(manifest, index):
    """ Read one sliding window back from disk.

    Returns
    -------
        Sample with uint8 frames (8, H, W) for times offset..offset+7 and the
       beams of times offset+8..offset+12 as targets
    """
    if not 0 <= index < manifest.sample_count:
        raise SampleOutOfRange('sample %d out of range [0, %d)' % (index, manifest.sample_count))
    entry = manifest.samples[index]
    seq, offset = entry['seq'], entry['offset']
    records = manifest.label_records()
    try:
        window = [records[(seq, offset + k)] for k in range(WINDOW)]
    except KeyError as err:
        raise FormatError('labels are missing timestep %s' % (err.args[0],))
    frames = load_frames(manifest, seq, range(offset, offset + N_FRAMES))
    beams = tuple(int(r['beam']) for r in window)
    return Sample(frames=frames, target_beams=beams[N_FRAMES:], history_beams=beams[:N_FRAMES],
                  sequence_id=seq, offset=offset,
                  azimuths_deg=tuple(float(r['azimuth_deg']) for r in window))
