""" Antenna array and channel mathematics for the ground-to-UAV link.

The base station carries an N-antenna uniform linear array and picks its
transmit beam from an oversampled DFT codebook covering the camera sector.
Beam indices are 1-based everywhere in the package.
"""
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from aerolink.beamvlm.errors import ConfigError, DimensionMismatch, InvalidSector, InvalidSize

SPACING_RATIO = 0.5
SECTOR = (-np.pi / 4, np.pi / 4)


# Array response ###################################################################################
def steering_vector(phi, n_antennas, spacing_ratio=SPACING_RATIO):
    """ Unit-norm far-field response of the ULA to azimuth phi.

    Parameters
    ----------
    phi: float
        azimuth in radians
    n_antennas: int
        number of array elements N
    spacing_ratio: float
        element spacing over wavelength d/lambda

    Returns
    -------
        complex vector of length N, element k = exp(j 2pi (d/lambda) k sin(phi)) / sqrt(N)
    """
    k = np.arange(n_antennas)
    return np.exp(2j * np.pi * spacing_ratio * k * np.sin(phi)) / np.sqrt(n_antennas)


def _as_vector(h):
    return np.asarray(getattr(h, 'vector', h), dtype=complex)


# Codebook #########################################################################################
@dataclass(frozen=True, eq=False)
class BeamCodebook:
    """ Oversampled DFT codebook: column m-1 of `beams` is beam m. """
    num_antennas: int
    num_beams: int
    spacing_ratio: float
    beam_angles: np.ndarray
    beams: np.ndarray

    def __post_init__(self):
        self.beam_angles.setflags(write=False)
        self.beams.setflags(write=False)

    @property
    def sector(self):
        return float(self.beam_angles[0]), float(self.beam_angles[-1])

    def beam(self, m):
        """ Beamforming vector f_m (1-based index). """
        return self.beams[:, m - 1]

    def to_dict(self):
        lo, hi = self.sector
        return dict(n_antennas=self.num_antennas, n_beams=self.num_beams,
                    sector_deg=[float(np.degrees(lo)), float(np.degrees(hi))],
                    spacing_ratio=self.spacing_ratio)

    @classmethod
    def from_dict(cls, params):
        lo, hi = params.get('sector_deg', (-45., 45.))
        return build_codebook(params['n_antennas'], params['n_beams'],
                              (np.radians(lo), np.radians(hi)),
                              params.get('spacing_ratio', SPACING_RATIO))


def build_codebook(n_antennas=16, n_beams=32, sector=SECTOR, spacing_ratio=SPACING_RATIO):
    """ Build the oversampled DFT codebook over an azimuth sector.

    Beam angles are equispaced in sin(phi), endpoints included.

    Parameters
    ----------
    n_antennas: int
        N
    n_beams: int
        M, at least N
    sector: tuple
        (lo, hi) azimuths in radians, inside [-pi/2, pi/2]
    spacing_ratio: float
        d/lambda

    Returns
    -------
    codebook: BeamCodebook
    """
    lo, hi = float(sector[0]), float(sector[1])
    if not lo < hi:
        raise InvalidSector('sector lower bound %g must be below upper bound %g' % (lo, hi))
    if lo < -np.pi / 2 - 1e-12 or hi > np.pi / 2 + 1e-12:
        raise InvalidSector('sector [%g, %g] leaves [-pi/2, pi/2]' % (lo, hi))
    if n_antennas < 1:
        raise InvalidSize('at least one antenna is needed, got %d' % n_antennas)
    if n_beams < n_antennas:
        raise InvalidSize('codebook size M=%d is below the number of antennas N=%d'
                          % (n_beams, n_antennas))
    if spacing_ratio <= 0:
        raise InvalidSize('spacing ratio must be positive, got %g' % spacing_ratio)

    grid = np.linspace(np.sin(lo), np.sin(hi), n_beams)
    angles = np.arcsin(np.clip(grid, -1., 1.))
    beams = np.stack([steering_vector(a, n_antennas, spacing_ratio) for a in angles], axis=1)
    return BeamCodebook(num_antennas=n_antennas, num_beams=n_beams,
                        spacing_ratio=spacing_ratio, beam_angles=angles, beams=beams)


def beam_pattern(cb, angles):
    """ Gain |f_m^H a(phi)|^2 of every beam towards every angle (M x len(angles)). """
    responses = np.stack([steering_vector(a, cb.num_antennas, cb.spacing_ratio)
                          for a in np.atleast_1d(angles)], axis=1)
    return np.abs(cb.beams.conj().T @ responses) ** 2


# Channel ##########################################################################################
@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """ Geometric multipath channel h[t] = sum_p gain_p a(azimuth_p). """
    paths: Tuple[Tuple[complex, float], ...]
    vector: np.ndarray = field(repr=False)

    @classmethod
    def from_paths(cls, paths, n_antennas, spacing_ratio=SPACING_RATIO):
        """ :Parameters:
             - 'paths' (list): (complex_gain, azimuth) pairs, azimuth in radians
        """
        paths = tuple((complex(g), float(a)) for g, a in paths)
        vector = np.zeros(n_antennas, dtype=complex)
        for gain, azimuth in paths:
            vector += gain * steering_vector(azimuth, n_antennas, spacing_ratio)
        return cls(paths=paths, vector=vector)

    @classmethod
    def line_of_sight(cls, azimuth, n_antennas, spacing_ratio=SPACING_RATIO, gain=1.):
        return cls.from_paths([(gain, azimuth)], n_antennas, spacing_ratio)

    def scaled(self, alpha):
        return ChannelRealization(paths=tuple((alpha * g, a) for g, a in self.paths),
                                  vector=alpha * self.vector)


def random_multipath_channel(n_paths, n_antennas, rng, sector=SECTOR,
                             spacing_ratio=SPACING_RATIO):
    """ Draw a channel with circularly-symmetric Gaussian gains and uniform azimuths. """
    gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) / np.sqrt(2)
    azimuths = rng.uniform(sector[0], sector[1], n_paths)
    return ChannelRealization.from_paths(zip(gains, azimuths), n_antennas, spacing_ratio)


@dataclass(frozen=True)
class RxSample:
    value: complex
    noise_power: float


def received_power(h, f):
    """ |h^H f|^2. """
    h, f = _as_vector(h), _as_vector(f)
    if h.shape != f.shape:
        raise DimensionMismatch('channel has shape %s, beam has shape %s' % (h.shape, f.shape))
    return float(np.abs(np.vdot(h, f)) ** 2)


def beam_powers(h, cb):
    """ Received power of every codebook beam for channel h. """
    h = _as_vector(h)
    if h.shape != (cb.num_antennas,):
        raise DimensionMismatch('channel length %d does not match %d antennas'
                                % (h.size, cb.num_antennas))
    return np.abs(h.conj() @ cb.beams) ** 2


def optimal_beam(h, cb):
    """ Exhaustive-search beam oracle.

    Returns
    -------
        1-based index of the beam maximizing |h^H f_m|^2; ties go to the smallest index
    """
    return int(np.argmax(beam_powers(h, cb))) + 1


def simulate_rx(h, w, symbol, noise_power, rng):
    """ Received sample y = h^H w s + z with z ~ CN(0, noise_power). """
    if noise_power < 0:
        raise ConfigError('noise power must be nonnegative, got %g' % noise_power)
    h, w = _as_vector(h), _as_vector(w)
    if h.shape != w.shape:
        raise DimensionMismatch('channel has shape %s, beam has shape %s' % (h.shape, w.shape))
    z = 0j
    if noise_power > 0:
        z = np.sqrt(noise_power / 2.) * (rng.standard_normal() + 1j * rng.standard_normal())
    return RxSample(value=complex(np.vdot(h, w) * symbol + z), noise_power=float(noise_power))


def snr_db(h, w, noise_power, tx_power=1.):
    """ Link SNR in dB for beam w; infinite when noise_power is zero. """
    signal = tx_power * received_power(h, w)
    if noise_power == 0:
        return np.inf
    with np.errstate(divide='ignore'):
        return float(10 * np.log10(signal / noise_power))


def nearest_beams(azimuths, cb):
    """ Labels of pure line-of-sight channels at the given azimuths (radians). """
    return [optimal_beam(ChannelRealization.line_of_sight(a, cb.num_antennas, cb.spacing_ratio), cb)
            for a in np.atleast_1d(azimuths)]
