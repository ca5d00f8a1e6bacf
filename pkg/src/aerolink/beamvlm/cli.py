""" Command line entry point ``beamvlm``.

Subcommands::

    beamvlm gen-data --config uav_linear --out data/uav
    beamvlm train --config uav_linear --data data/uav --out vlm.ckpt
    beamvlm finetune --config v2i_ground --checkpoint vlm.ckpt --data data/v2i --out lora.ckpt
    beamvlm train-baseline --config uav_linear --data data/uav --out lstm.ckpt --cell lstm
    beamvlm predict --checkpoint vlm.ckpt --data data/uav --index 0
    beamvlm eval --checkpoint vlm.ckpt --checkpoint lstm.ckpt --data data/uav --out report
    beamvlm ablate --checkpoint vlm.ckpt --data data/uav --out report

The resolved configuration is printed on stderr before any work. Failures
print one JSON line ``{"error": kind, "message": text}`` on stderr and exit
with 2 (configuration or sample index), 3 (storage), 4 (format version) or 1.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import torch

from aerolink.beamvlm import __version__
from aerolink.beamvlm.baseline import build_baseline, train_baseline
from aerolink.beamvlm.config import RunConfig
from aerolink.beamvlm.errors import (BeamError, ConfigError, SampleOutOfRange, StorageError,
                                     VersionError)
from aerolink.beamvlm.evaluation import (K_LIST, MetricsTable, OraclePredictor, ablate_prompt,
                                         binomial_chance_interval, emit_ablation_csv,
                                         emit_complexity_csv, emit_csv, emit_svg, evaluate,
                                         load_split, parameter_counts, predictor_from_checkpoint)
from aerolink.beamvlm.scene import (DatasetManifest, build_dataset, load_sample,
                                    scenario_trajectories, split_dataset)
from aerolink.beamvlm.shared import shared_data
from aerolink.beamvlm.text import PromptTemplate, build_prompt, load_prompt_variants
from aerolink.beamvlm.train import (finetune_lora, load_checkpoint, model_from_checkpoint,
                                    save_checkpoint, train)
from aerolink.beamvlm.vlm import build_model, predict_beams

logger = logging.getLogger(__name__)

LOG_LEVELS = dict(error=logging.ERROR, info=logging.INFO, debug=logging.DEBUG)
EXIT_CONFIG, EXIT_STORAGE, EXIT_VERSION, EXIT_OTHER = 2, 3, 4, 1


def configure_logging(stream=None):
    """ Send package logs to stderr at the level named by BEAMVLM_LOG. """
    name = os.environ.get('BEAMVLM_LOG', 'info').lower()
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
    root = logging.getLogger('aerolink.beamvlm')
    root.handlers[:] = [handler]
    root.setLevel(LOG_LEVELS.get(name, logging.INFO))
    if name not in LOG_LEVELS:
        logger.warning('unknown BEAMVLM_LOG value %r, using info', name)


def _progress():
    return logging.getLogger('aerolink.beamvlm').isEnabledFor(logging.INFO)


def _out_dir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise StorageError('cannot create output directory %s: %s' % (path, err))
    return path


def _save_curve(curve, path):
    try:
        curve.to_json(path, orient='records', lines=True)
    except OSError as err:
        raise StorageError('cannot write training log %s: %s' % (path, err))
    logger.info('loss curve written to %s', path)


def _prompt(cfg, model_cfg, manifest, prompt_file=None):
    """ Prompt text from --prompt-file, the config prompt_file, or the shipped template. """
    source = prompt_file or cfg.prompt_file
    if source is None:
        return None
    template = PromptTemplate.from_file(source, manifest.scenario_tag)
    return build_prompt(model_cfg.n_beams, model_cfg.n_frames, model_cfg.horizon,
                        manifest.scenario_tag, template)


def _k_list(text):
    try:
        ks = tuple(int(k) for k in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError('expected comma-separated integers, got %r' % text)
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError('K values must be positive')
    return ks


# Subcommands ######################################################################################
def cmd_gen_data(args, cfg):
    cb = cfg.codebook.build()
    trajectories = scenario_trajectories(cfg.scenario, cfg.trajectory)
    manifest = build_dataset(cfg.world, trajectories, cb, _out_dir(args.out), cfg.scenario.name,
                             cfg.scenario.tag, threads=args.threads, progress=_progress())
    split = split_dataset(manifest, cfg.scenario.train_fraction, cfg.scenario.seed)
    split.save()
    logger.info('dataset %s: %d samples (%d train, %d test)', args.out, split.sample_count,
                len(split.samples_in('train')), len(split.samples_in('test')))
    return split


def cmd_train(args, cfg):
    manifest = DatasetManifest.load(args.data)
    model = build_model(cfg.model, seed=cfg.train.seed)
    ckpt, curve = train(model, manifest, cfg.train, _prompt(cfg, cfg.model, manifest))
    save_checkpoint(ckpt, args.out)
    _save_curve(curve, str(args.out) + '.loss.jsonl')
    return ckpt


def cmd_finetune(args, cfg):
    base = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.data)
    tcfg = dataclasses.replace(cfg.train, mode='lora_only')
    ckpt, curve = finetune_lora(base, manifest, tcfg, _prompt(cfg, cfg.model, manifest))
    save_checkpoint(ckpt, args.out)
    _save_curve(curve, str(args.out) + '.loss.jsonl')
    return ckpt


def cmd_train_baseline(args, cfg):
    manifest = DatasetManifest.load(args.data)
    bcfg = cfg.baseline
    if args.cell is not None:
        bcfg = dataclasses.replace(bcfg, cell_type=args.cell)
    clf = build_baseline(bcfg, seed=cfg.baseline_train.seed)
    ckpt, curve = train_baseline(clf, manifest, cfg.baseline_train)
    save_checkpoint(ckpt, args.out)
    _save_curve(curve, str(args.out) + '.loss.jsonl')
    return ckpt


def cmd_predict(args, cfg, stdout=None):
    stdout = stdout or sys.stdout
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.model_kind != 'vlm':
        raise ConfigError('predict needs a vlm checkpoint, got %r' % ckpt.model_kind)
    manifest = DatasetManifest.load(args.data)
    model = model_from_checkpoint(ckpt)
    mcfg = model.config
    prompt = _prompt(cfg, mcfg, manifest, args.prompt_file)
    if prompt is None:
        prompt = build_prompt(mcfg.n_beams, mcfg.n_frames, mcfg.horizon, manifest.scenario_tag)
    sample = load_sample(manifest, args.index)
    pred = predict_beams(model, sample.frames, prompt, sample.history_beams)
    stdout.write('raw: %s\n' % pred.raw)
    stdout.write('beams: %s\n' % ', '.join(str(b) for b in pred.beams))
    stdout.write('valid=%s\n' % ('true' if pred.valid else 'false'))
    return pred


def cmd_eval(args, cfg):
    if not args.checkpoint:
        raise ConfigError('eval needs at least one --checkpoint')
    manifest = DatasetManifest.load(args.data)
    out = _out_dir(args.out)
    prompt_file = args.prompt_file or cfg.prompt_file
    cb = manifest.beam_codebook()
    samples = load_split(manifest, 'test')
    tables, counts, names = [], [], set()
    for path in args.checkpoint:
        ckpt = load_checkpoint(path)
        predictor = predictor_from_checkpoint(ckpt, manifest)
        if ckpt.model_kind == 'vlm' and prompt_file:
            predictor.prompt = _prompt(cfg, predictor.model.config, manifest, prompt_file)
        if predictor.name in names:
            predictor.name = '%s-%s' % (predictor.name, Path(path).stem)
        names.add(predictor.name)
        counts.append(parameter_counts(ckpt, predictor.name))
        tables.append(evaluate(predictor, manifest, cb, k_list=args.k_list,
                               threads=args.threads, progress=_progress(), samples=samples))
    oracle = OraclePredictor(cb, manifest.world_config())
    tables.append(evaluate(oracle, manifest, cb, k_list=args.k_list, threads=args.threads,
                           samples=samples))
    lo, hi = binomial_chance_interval(len(samples), cb.num_beams)
    logger.info('chance-level top-1 band over %d samples: [%.4f, %.4f]', len(samples), lo, hi)
    emit_csv(tables, out / 'metrics.csv')
    emit_svg(tables, out / 'topk.svg')
    emit_complexity_csv(counts, out / 'complexity.csv')
    logger.info('metrics written to %s', out)
    return MetricsTable.concat(tables)


def cmd_ablate(args, cfg):
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.model_kind != 'vlm':
        raise ConfigError('ablate needs a vlm checkpoint, got %r' % ckpt.model_kind)
    manifest = DatasetManifest.load(args.data)
    out = _out_dir(args.out)
    variants = load_prompt_variants(args.prompts or shared_data('prompts'), manifest.scenario_tag)
    report = ablate_prompt(model_from_checkpoint(ckpt), manifest, variants,
                           k_list=args.k_list, threads=args.threads)
    emit_ablation_csv(report, out / 'ablation.csv')
    emit_svg(report.metrics(), out / 'ablation.svg', k_list=[min(args.k_list)])
    logger.info('ablation written to %s', out)
    return report


# Parser ###########################################################################################
def _common(parser):
    parser.add_argument('--config', help='config file or shipped preset name')
    parser.add_argument('--seed', type=int, help='overrides every seed of the config')
    parser.add_argument('--threads', type=int, default=1, help='worker threads (1: deterministic)')


def build_parser():
    parser = argparse.ArgumentParser(prog='beamvlm',
                                     description='Vision-language beam prediction at desk scale')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='simulate and render a labeled dataset')
    _common(p)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('train', help='train the VLM with teacher forcing')
    _common(p)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('finetune', help='LoRA fine-tuning of a base checkpoint')
    _common(p)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser('train-baseline', help='train a recurrent baseline')
    _common(p)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--cell', choices=['lstm', 'elman'])
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser('predict', help='predict the beams of one stored sample')
    _common(p)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--index', type=int, default=0)
    p.add_argument('--prompt-file')
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser('eval', help='Top-K tables of checkpoints and the pixel oracle')
    _common(p)
    p.add_argument('--checkpoint', action='append', default=[])
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--k-list', type=_k_list, default=K_LIST)
    p.add_argument('--prompt-file')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('ablate', help='evaluate one VLM under several prompt variants')
    _common(p)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--prompts', help='directory of prompt variant files')
    p.add_argument('--out', required=True)
    p.add_argument('--k-list', type=_k_list, default=K_LIST)
    p.set_defaults(func=cmd_ablate)
    return parser


def _fail(err, code, stream):
    stream.write(json.dumps(dict(error=err.kind, message=str(err))) + '\n')
    return code


def main(argv=None, stdout=None, stderr=None):
    stderr = stderr or sys.stderr
    args = build_parser().parse_args(argv)
    configure_logging(stderr)
    try:
        if args.threads < 1:
            raise ConfigError('--threads must be at least 1, got %d' % args.threads)
        torch.set_num_threads(args.threads)
        cfg = RunConfig.load(args.config).with_seed(args.seed)
        stderr.write(json.dumps(cfg.to_dict(), indent=2) + '\n')
        if args.func is cmd_predict:
            cmd_predict(args, cfg, stdout)
        else:
            args.func(args, cfg)
    except VersionError as err:
        return _fail(err, EXIT_VERSION, stderr)
    except StorageError as err:
        return _fail(err, EXIT_STORAGE, stderr)
    except (ConfigError, SampleOutOfRange) as err:
        return _fail(err, EXIT_CONFIG, stderr)
    except BeamError as err:
        return _fail(err, EXIT_OTHER, stderr)
    return 0


if __name__ == '__main__':
    sys.exit(main())
