""" Top-K evaluation of beam predictors, prompt ablation and report files.

Metrics CSV header::

    predictor,horizon,top1,top2,top3,top5,n,invalid_rate

followed by one topK column for every other requested K.

Ablation CSV header::

    variant,horizon,top1,delta_top1_vs_full

Model complexity CSV header::

    predictor,model_kind,total,trainable,lora
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib.metadata import entry_points

import numpy as np
import pandas
from matplotlib.figure import Figure
from scipy import stats
from tqdm import tqdm

from aerolink.beamvlm.baseline import baseline_forward, oracle_pixel_baseline
from aerolink.beamvlm.errors import (ConfigError, EmptyReport, LengthMismatch, StorageError,
                                     UavNotFound)
from aerolink.beamvlm.scene import HORIZON, load_sample
from aerolink.beamvlm.text import build_prompt, fallback_answer
from aerolink.beamvlm.train import model_from_checkpoint
from aerolink.beamvlm.vlm import DecodeSession, answer_prefix, read_answer

logger = logging.getLogger(__name__)

K_LIST = (1, 2, 3, 5)
REPORT_K = K_LIST
PLUGIN_GROUP = 'beamvlm.predictor'
COMPLEXITY_COLUMNS = ['predictor', 'model_kind', 'total', 'trainable', 'lora']


# Rankings #########################################################################################
@dataclass(frozen=True)
class RankedPrediction:
    """ Candidate beams per horizon step, best first; `valid` is False for fallbacks. """
    rankings: tuple
    valid: bool = True

    def __post_init__(self):
        for ranking in self.rankings:
            if len(set(ranking)) != len(ranking):
                raise ValueError('duplicate candidate in ranking %s' % (ranking,))


def outward_ranking(beam, m):
    """ beam, beam-1, beam+1, beam-2, beam+2, ... restricted to 1..m. """
    order = [beam]
    for d in range(1, m):
        order.extend(b for b in (beam - d, beam + d) if 1 <= b <= m)
    return tuple(order)


def rank_from_probabilities(probs):
    """ 1-based beams by decreasing probability, ties broken by the smaller index. """
    return tuple(int(b) + 1 for b in np.argsort(-np.asarray(probs), kind='stable'))


def topk_accuracy(preds, labels, k, horizon_step):
    """ Fraction of samples whose label at `horizon_step` is among the first k candidates.

    Parameters
    ----------
    preds: list
        RankedPrediction per sample
    labels: list
        tuple of true future beams per sample
    k: int
        number of candidates retained
    horizon_step: int
        1-based step into the future
    """
    if len(preds) != len(labels):
        raise LengthMismatch('%d predictions for %d labels' % (len(preds), len(labels)))
    if k < 1:
        raise ConfigError('k must be at least 1, got %d' % k)
    if not preds:
        raise EmptyReport('no prediction to score')
    j = horizon_step - 1
    hits = sum(int(lab[j] in pred.rankings[j][:k]) for pred, lab in zip(preds, labels))
    return hits / float(len(preds))


class MetricsTable(object):
    """ Top-K accuracies of one or several predictors, one row per (predictor, horizon).

    Parameters
    ----------
    frame: pandas.DataFrame
        top1, top2, top3 and top5 columns always, then the other requested K
        after invalid_rate
    k_list: list
        K values asked for, the ones plotted
    """
    def __init__(self, frame, k_list=K_LIST):
        self.frame = frame
        self.k_list = list(k_list)

    @classmethod
    def from_predictions(cls, name, preds, labels, k_list=K_LIST):
        if not preds:
            raise EmptyReport('predictor %s produced no prediction' % name)
        extra = sorted(set(k_list) - set(REPORT_K))
        horizon = len(labels[0])
        invalid = sum(int(not p.valid) for p in preds) / float(len(preds))
        rows = []
        for step in range(1, horizon + 1):
            row = dict(predictor=name, horizon=step)
            for k in REPORT_K + tuple(extra):
                row['top%d' % k] = topk_accuracy(preds, labels, k, step)
            row.update(n=len(preds), invalid_rate=invalid)
            rows.append(row)
        columns = (['predictor', 'horizon'] + ['top%d' % k for k in REPORT_K] +
                   ['n', 'invalid_rate'] + ['top%d' % k for k in extra])
        return cls(pandas.DataFrame(rows, columns=columns), k_list)

    @classmethod
    def concat(cls, tables):
        tables = list(tables)
        if not tables:
            raise EmptyReport('no predictor to report')
        k_list = []
        for t in tables:
            k_list.extend(k for k in t.k_list if k not in k_list)
        return cls(pandas.concat([t.frame for t in tables], ignore_index=True), k_list)

    @property
    def predictors(self):
        return list(pandas.unique(self.frame.predictor))

    def top(self, k, horizon, predictor=None):
        rows = self.frame[self.frame.horizon == horizon]
        if predictor is not None:
            rows = rows[rows.predictor == predictor]
        return float(rows['top%d' % k].iloc[0])

    def to_frame(self):
        return self.frame.copy()


# Predictors #######################################################################################
class VlmPredictor(object):
    """ Greedy answer first, remaining beams ordered by their candidate score. """
    def __init__(self, model, prompt, name='vlm'):
        self.model = model
        self.prompt = prompt
        self.name = name

    def rank(self, sample):
        cfg = self.model.config
        session = DecodeSession(self.model, sample.frames, self.prompt)
        pred = read_answer(session.generate(), sample.history_beams, cfg)
        if not pred.valid:
            return RankedPrediction(tuple(outward_ranking(b, cfg.n_beams) for b in pred.beams),
                                    valid=False)
        rankings = []
        for step, greedy in enumerate(pred.beams, 1):
            scores = session.score(step, answer_prefix(pred.beams, step))
            rest = [b for b in rank_from_probabilities(scores) if b != greedy]
            rankings.append((greedy,) + tuple(rest))
        return RankedPrediction(tuple(rankings), valid=True)


class BaselinePredictor(object):
    """ Beams sorted by the classifier probabilities. """
    def __init__(self, clf, name=None):
        self.clf = clf
        self.name = name or clf.config.model_kind

    def rank(self, sample):
        probs = baseline_forward(self.clf, sample.frames)
        return RankedPrediction(tuple(rank_from_probabilities(row) for row in probs))


class OraclePredictor(object):
    """ Pixel oracle; repeats the last observed beam when the UAV is hidden. """
    def __init__(self, cb, world, horizon=HORIZON, name='oracle'):
        self.cb = cb
        self.world = world
        self.horizon = horizon
        self.name = name

    def rank(self, sample):
        m = self.cb.num_beams
        try:
            beams, valid = oracle_pixel_baseline(sample.frames, self.cb, self.world,
                                                 self.horizon), True
        except UavNotFound:
            beams, valid = fallback_answer(sample.history_beams, self.horizon).beams, False
        return RankedPrediction(tuple(outward_ranking(b, m) for b in beams), valid=valid)


def _default_prompt(model, manifest, prompt):
    if prompt is not None:
        return prompt
    cfg = model.config
    return build_prompt(cfg.n_beams, cfg.n_frames, cfg.horizon, manifest.scenario_tag)


def make_vlm_predictor(ckpt, manifest, prompt=None, name=None):
    model = model_from_checkpoint(ckpt)
    return VlmPredictor(model, _default_prompt(model, manifest, prompt),
                        name or ('vlm-lora' if ckpt.lora else 'vlm'))


def make_rnn_predictor(ckpt, manifest, prompt=None, name=None):
    return BaselinePredictor(model_from_checkpoint(ckpt), name or ckpt.model_kind)


make_lstm_predictor = make_rnn_predictor


def make_oracle_predictor(ckpt, manifest, prompt=None, name=None):
    cfg = manifest.world_config()
    return OraclePredictor(manifest.beam_codebook(), cfg, name=name or 'oracle')


_BUILTIN = dict(vlm=make_vlm_predictor, rnn=make_rnn_predictor, lstm=make_lstm_predictor,
                oracle=make_oracle_predictor)


def plugin_predictor(kind):
    """ Predictor factory registered under `kind`, falling back on the built-in ones. """
    factories = {ep.name: ep for ep in entry_points(group=PLUGIN_GROUP)}
    try:
        return factories[kind].load()
    except KeyError:
        try:
            return _BUILTIN[kind]
        except KeyError:
            raise ConfigError('no predictor registered for model kind %r' % kind)


def predictor_from_checkpoint(ckpt, manifest, prompt=None, name=None):
    return plugin_predictor(ckpt.model_kind)(ckpt, manifest, prompt, name)


# Evaluation runs ##################################################################################
def evaluate_samples(predictor, samples, k_list=K_LIST, threads=1, progress=False):
    """ MetricsTable of a predictor over in-memory samples.

    Samples are ranked independently; `threads` > 1 spreads them over a thread
    pool without changing the result.
    """
    samples = list(samples)
    if not samples:
        raise EmptyReport('no sample to evaluate')
    with tqdm(total=len(samples), desc=predictor.name, disable=not progress) as bar:
        def rank(sample):
            out = predictor.rank(sample)
            bar.update(1)
            return out
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                preds = list(pool.map(rank, samples))
        else:
            preds = [rank(s) for s in samples]
    labels = [tuple(s.target_beams) for s in samples]
    table = MetricsTable.from_predictions(predictor.name, preds, labels, k_list)
    logger.info('%s on %d samples: top-1 at t+1 %.3f, invalid rate %.3f', predictor.name,
                len(samples), table.top(min(k_list), 1), table.frame.invalid_rate.iloc[0])
    return table


def load_split(manifest, split='test'):
    indices = manifest.samples_in(split)
    if not indices:
        raise EmptyReport('the %s split of %s is empty' % (split, manifest.root))
    return [load_sample(manifest, i) for i in indices]


def evaluate(predictor, manifest, cb=None, split='test', k_list=K_LIST, threads=1,
             progress=False, samples=None):
    """ Top-K table of a predictor on a dataset split.

    Parameters
    ----------
    predictor
        object with `name` and `rank(sample)`
    manifest: DatasetManifest
        split dataset
    cb: BeamCodebook
        codebook the labels refer to, the manifest's by default
    k_list: tuple
        K values reported as columns
    """
    cb = cb if cb is not None else manifest.beam_codebook()
    if max(k_list) > cb.num_beams:
        raise ConfigError('K=%d exceeds the codebook size %d' % (max(k_list), cb.num_beams))
    if samples is None:
        samples = load_split(manifest, split)
    return evaluate_samples(predictor, samples, k_list, threads, progress)


def binomial_chance_interval(n, m, n_sd=2.):
    """ Range of Top-1 accuracy within `n_sd` standard deviations of guessing among m beams. """
    p = 1. / m
    sd = stats.binom(n, p).std() / n
    return max(0., p - n_sd * sd), min(1., p + n_sd * sd)


# Prompt ablation ##################################################################################
class AblationReport(object):
    """ Tables of one model evaluated under several prompt variants. """
    def __init__(self, tables, reference='full'):
        self.tables = tables
        self.reference = reference

    def to_frame(self):
        ref = self.tables[self.reference].frame.set_index('horizon').top1
        rows = []
        for name, table in self.tables.items():
            for _, row in table.frame.iterrows():
                rows.append(dict(variant=name, horizon=int(row.horizon), top1=row.top1,
                                 delta_top1_vs_full=row.top1 - ref[int(row.horizon)]))
        return pandas.DataFrame(rows, columns=['variant', 'horizon', 'top1',
                                               'delta_top1_vs_full'])

    def metrics(self):
        return MetricsTable.concat(self.tables.values())


def ablate_prompt(model, manifest, variants, k_list=K_LIST, threads=1, split='test'):
    """ Evaluate the same weights on the same samples under each prompt variant.

    Parameters
    ----------
    model: BeamVlmModel
    variants: dict
        name -> PromptTemplate, must contain 'full'
    """
    if 'full' not in variants:
        raise ConfigError('prompt variants must include the full prompt')
    if len(variants) < 2:
        raise ConfigError('at least one ablated prompt variant is needed')
    cfg = model.config
    samples = load_split(manifest, split)
    tables = {}
    for name, template in variants.items():
        prompt = build_prompt(cfg.n_beams, cfg.n_frames, cfg.horizon, manifest.scenario_tag,
                              template)
        logger.info('prompt variant %s: %r', name, prompt)
        tables[name] = evaluate(VlmPredictor(model, prompt, name), manifest, k_list=k_list,
                                threads=threads, samples=samples)
    return AblationReport(tables)


# Model complexity #################################################################################
def parameter_counts(ckpt, name=None):
    """ Parameter counts of a checkpointed model, read from its stored arrays.

    Parameters
    ----------
    ckpt: Checkpoint
        base and adapter arrays; optimizer moments are not counted
    name: str, optional
        row label, the model kind by default

    Returns
    -------
    dict
        predictor, model_kind, total, trainable and lora. A checkpoint with
        adapters only trains them; any other trains all its weights.
    """
    base = sum(int(np.asarray(arr).size) for arr in ckpt.base.values())
    lora = sum(int(np.asarray(arr).size) for arr in ckpt.lora.values())
    return dict(predictor=name or ckpt.model_kind, model_kind=ckpt.model_kind,
                total=base + lora, trainable=lora if ckpt.lora else base + lora, lora=lora)


# Reports ##########################################################################################
def _write_csv(frame, path):
    try:
        frame.to_csv(path, index=False)
    except OSError as err:
        raise StorageError('cannot write %s: %s' % (path, err))
    return path


def emit_csv(table, path):
    """ Write a metrics table (or a list of them) as CSV. """
    if not isinstance(table, MetricsTable):
        table = MetricsTable.concat(table)
    if table.frame.empty:
        raise EmptyReport('no metric row to write')
    return _write_csv(table.frame, path)


def emit_ablation_csv(report, path):
    return _write_csv(report.to_frame(), path)


def emit_complexity_csv(rows, path):
    """ Write one row of parameter counts per model. """
    frame = pandas.DataFrame(list(rows), columns=COMPLEXITY_COLUMNS)
    if frame.empty:
        raise EmptyReport('no model to report')
    return _write_csv(frame, path)


def emit_svg(tables, path, k_list=None):
    """ Line chart of Top-K accuracy against horizon, one series per predictor and K. """
    if isinstance(tables, MetricsTable):
        tables = [tables]
    tables = list(tables)
    if not tables:
        raise EmptyReport('no predictor to plot')
    table = MetricsTable.concat(tables)
    if table.frame.empty:
        raise EmptyReport('no metric row to plot')
    k_list = k_list or table.k_list
    fig = Figure(figsize=(800 / 72., 500 / 72.), dpi=72)
    ax = fig.add_subplot(1, 1, 1)
    styles = ['-', '--', ':', '-.']
    for i, name in enumerate(table.predictors):
        rows = table.frame[table.frame.predictor == name]
        for j, k in enumerate(k_list):
            ax.plot(rows.horizon, rows['top%d' % k], marker='o', color='C%d' % (i % 10),
                    linestyle=styles[j % len(styles)], label='%s top-%d' % (name, k))
    ax.set_xlabel('prediction horizon t+k')
    ax.set_ylabel('top-K accuracy')
    ax.set_xticks(sorted(table.frame.horizon.unique()))
    ax.set_ylim(0., 1.)
    ax.set_yticks(np.round(np.arange(0., 1.01, 0.1), 1))
    ax.grid(True, alpha=0.3)
    ax.legend(loc='lower left', fontsize='small')
    try:
        fig.savefig(path, format='svg')
    except OSError as err:
        raise StorageError('cannot write %s: %s' % (path, err))
    return path
