""" Transfer a UAV-trained VLM to the ground-vehicle scenario with LoRA.

Needs the checkpoint written by desk_scale_uav.py. The model is scored on
the V2I test split before and after adapter fine-tuning, and against a
baseline trained from scratch on the V2I data.
"""
import dataclasses
import logging
from pathlib import Path

from aerolink.beamvlm.baseline import build_baseline, train_baseline
from aerolink.beamvlm.config import RunConfig
from aerolink.beamvlm.evaluation import (BaselinePredictor, MetricsTable, OraclePredictor,
                                         emit_csv, evaluate, load_split, make_vlm_predictor)
from aerolink.beamvlm.scene import (DatasetManifest, build_dataset, scenario_trajectories,
                                    split_dataset)
from aerolink.beamvlm.train import finetune_lora, load_checkpoint, save_checkpoint

logging.basicConfig(level=logging.INFO)

def v2i_dataset(cfg, root):
    root = Path(root)
    if (root / 'manifest.json').exists():
        return DatasetManifest.load(root)
    manifest = build_dataset(cfg.world, scenario_trajectories(cfg.scenario, cfg.trajectory),
                             cfg.codebook.build(), root, cfg.scenario.name, cfg.scenario.tag,
                             threads=4)
    manifest = split_dataset(manifest, cfg.scenario.train_fraction, cfg.scenario.seed)
    manifest.save()
    return manifest

def transfer(base_checkpoint='desk_uav/vlm.ckpt', out_dir='desk_v2i'):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig.load('v2i_ground')
    manifest = v2i_dataset(cfg, out / 'data')
    cb = manifest.beam_codebook()
    samples = load_split(manifest)

    base = load_checkpoint(base_checkpoint)
    tables = [evaluate(make_vlm_predictor(base, manifest, name='vlm-zero-shot'), manifest, cb,
                       samples=samples)]
    adapted, curve = finetune_lora(base, manifest, cfg.train)
    save_checkpoint(adapted, out / 'lora.ckpt')
    curve.to_csv(out / 'lora_loss.csv', index=False)
    print('trainable parameters: %d' % adapted.metadata['trainable'])
    tables.append(evaluate(make_vlm_predictor(adapted, manifest), manifest, cb, samples=samples))

    clf = build_baseline(cfg.baseline)
    train_baseline(clf, manifest, dataclasses.replace(cfg.baseline_train, seed=cfg.scenario.seed))
    tables.append(evaluate(BaselinePredictor(clf), manifest, cb, samples=samples))
    tables.append(evaluate(OraclePredictor(cb, manifest.world_config()), manifest, cb,
                           samples=samples))
    emit_csv(tables, out / 'metrics.csv')
    return MetricsTable.concat(tables)

if __name__ == '__main__':
    print(transfer().to_frame().to_string(index=False))
