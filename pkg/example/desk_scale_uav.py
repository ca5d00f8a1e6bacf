""" Whole desk-scale experiment on the UAV scenario.

Generate the dataset, train the VLM and the two recurrent baselines, then
compare them with the pixel oracle. Everything is written under `out_dir`.
"""
import dataclasses
import logging
from pathlib import Path

import matplotlib.pyplot as plt

from aerolink.beamvlm.baseline import build_baseline, train_baseline
from aerolink.beamvlm.config import RunConfig
from aerolink.beamvlm.evaluation import (BaselinePredictor, MetricsTable, OraclePredictor,
                                         VlmPredictor, binomial_chance_interval, emit_csv,
                                         emit_svg, evaluate, load_split)
from aerolink.beamvlm.scene import (DatasetManifest, build_dataset, scenario_trajectories,
                                    split_dataset)
from aerolink.beamvlm.text import build_prompt
from aerolink.beamvlm.train import save_checkpoint, train
from aerolink.beamvlm.vlm import build_model

logging.basicConfig(level=logging.INFO)

def generate(cfg, out_dir, threads=4):
    data = Path(out_dir) / 'data'
    if (data / 'manifest.json').exists():
        return DatasetManifest.load(data)
    trajectories = scenario_trajectories(cfg.scenario, cfg.trajectory)
    manifest = build_dataset(cfg.world, trajectories, cfg.codebook.build(), data,
                             cfg.scenario.name, cfg.scenario.tag, threads=threads, progress=True)
    manifest = split_dataset(manifest, cfg.scenario.train_fraction, cfg.scenario.seed)
    manifest.save()
    return manifest

def run_experiment(out_dir='desk_uav', preset='uav_linear', epochs=None, seed=0):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig.load(preset).with_seed(seed)
    if epochs is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=epochs),
                                  baseline_train=dataclasses.replace(cfg.baseline_train,
                                                                     epochs=epochs))
    manifest = generate(cfg, out)
    cb = manifest.beam_codebook()
    samples = load_split(manifest, 'test')

    model = build_model(cfg.model, seed=seed)
    prompt = build_prompt(cfg.model.n_beams, cfg.model.n_frames, cfg.model.horizon,
                          cfg.scenario.tag)
    ckpt, curve = train(model, manifest, dataclasses.replace(cfg.train, progress=True), prompt)
    save_checkpoint(ckpt, out / 'vlm.ckpt')
    curve.to_csv(out / 'vlm_loss.csv', index=False)

    tables = [evaluate(VlmPredictor(model, prompt), manifest, cb, samples=samples)]
    for cell in ('elman', 'lstm'):
        clf = build_baseline(dataclasses.replace(cfg.baseline, cell_type=cell), seed=seed)
        bckpt, _ = train_baseline(clf, manifest, cfg.baseline_train)
        save_checkpoint(bckpt, out / ('%s.ckpt' % cell))
        tables.append(evaluate(BaselinePredictor(clf), manifest, cb, samples=samples))
    tables.append(evaluate(OraclePredictor(cb, manifest.world_config()), manifest, cb,
                           samples=samples))

    emit_csv(tables, out / 'metrics.csv')
    emit_svg(tables, out / 'topk.svg')
    lo, hi = binomial_chance_interval(len(samples), cb.num_beams)
    print('chance band for top-1: [%.3f, %.3f]' % (lo, hi))
    return MetricsTable.concat(tables), curve

def plot_loss(curve, ax=None):
    if ax is None:
        fig, ax = plt.subplots(1, 1)
    ax.plot(curve.step, curve.loss)
    ax.set_xlabel('step')
    ax.set_ylabel('teacher-forcing loss')
    return ax

if __name__ == '__main__':
    table, curve = run_experiment()
    print(table.to_frame().to_string(index=False))
    plot_loss(curve)
    plt.show()
