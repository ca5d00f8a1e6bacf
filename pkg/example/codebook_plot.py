""" Draw the gain pattern of the DFT codebook and the labels of a linear pass. """

import dataclasses

import numpy as np
import matplotlib.pyplot as plt

from aerolink.beamvlm.config import RunConfig
from aerolink.beamvlm.phy import beam_pattern
from aerolink.beamvlm.scene import label_sequence, simulate_trajectory

def plot_codebook(preset='uav_linear', beams=(1, 8, 16, 24, 32), ax=None):
    cfg = RunConfig.load(preset)
    cb = cfg.codebook.build()
    angles = np.radians(np.linspace(-60., 60., 721))
    gains = beam_pattern(cb, angles)
    if ax is None:
        fig, ax = plt.subplots(1, 1)
    for m in beams:
        ax.plot(np.degrees(angles), 10 * np.log10(gains[m - 1] + 1e-6), label='beam %d' % m)
    for lim in cfg.codebook.sector_deg:
        ax.axvline(lim, color='k', linestyle=':')
    ax.set_ylim(-40., 1.)
    ax.set_xlabel('azimuth (deg)')
    ax.set_ylabel('gain (dB)')
    ax.legend(loc='lower center', fontsize='small')
    return ax

def plot_labels(preset='uav_linear', seed=0, ax=None):
    cfg = RunConfig.load(preset)
    cb = cfg.codebook.build()
    traj = dataclasses.replace(cfg.trajectory, seed=seed)
    states = simulate_trajectory(traj, cfg.world)
    beams = label_sequence(states, cb)
    if ax is None:
        fig, ax = plt.subplots(1, 1)
    ax.step(range(len(beams)), beams, where='mid', color='C0')
    ax2 = ax.twinx()
    ax2.plot([s.azimuth_deg for s in states], color='C1', linestyle='--')
    ax.set_xlabel('timestep')
    ax.set_ylabel('optimal beam', color='C0')
    ax2.set_ylabel('azimuth (deg)', color='C1')
    return ax

if __name__ == '__main__':
    fig, axs = plt.subplots(1, 2, figsize=(12, 4))
    plot_codebook(ax=axs[0])
    plot_labels(ax=axs[1])
    plt.show()
