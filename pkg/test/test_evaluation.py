""" Test Top-K scoring, the predictors, prompt ablation and report files """

# Imports #########################################################################
import xml.etree.ElementTree as ET

import numpy as np
import pandas
import pytest

from aerolink.beamvlm.errors import ConfigError, EmptyReport, LengthMismatch, StorageError
from aerolink.beamvlm.evaluation import (AblationReport, BaselinePredictor, MetricsTable,
                                         OraclePredictor, RankedPrediction, VlmPredictor,
                                         ablate_prompt, binomial_chance_interval,
                                         emit_ablation_csv, emit_complexity_csv, emit_csv, emit_svg,
                                         evaluate, evaluate_samples, load_split,
                                         make_oracle_predictor, make_rnn_predictor,
                                         make_vlm_predictor, outward_ranking, parameter_counts,
                                         plugin_predictor,
                                         predictor_from_checkpoint, rank_from_probabilities,
                                         topk_accuracy)
from aerolink.beamvlm.baseline import BaselineConfig, build_baseline
from aerolink.beamvlm.scene import Sample
from aerolink.beamvlm.text import default_template
from aerolink.beamvlm.train import Checkpoint
from aerolink.beamvlm.vlm import build_model

from rigging import (scripted_model, sevens_model, tiny_codebook, tiny_dataset, tiny_vlm_config,
                     tiny_world)

def ranked(*first_choices, m=32):
    """ Prediction whose ranking at every step starts with the given beam. """
    return RankedPrediction(tuple(outward_ranking(b, m) for b in first_choices))

def fake_sample(targets, history=(4,) * 8, size=16):
    return Sample(frames=np.zeros((8, size, size), dtype=np.uint8), target_beams=tuple(targets),
                  history_beams=tuple(history), sequence_id=0, offset=0)

class FixedPredictor(object):
    """ Always predicts the same beams. """
    def __init__(self, beams, name='fixed', m=32):
        self.beams = beams
        self.name = name
        self.m = m

    def rank(self, sample):
        return ranked(*self.beams, m=self.m)

# Tests ###########################################################################
def test_outward_ranking():
    assert outward_ranking(5, 8) == (5, 4, 6, 3, 7, 2, 8, 1)
    assert outward_ranking(1, 4) == (1, 2, 3, 4)
    assert outward_ranking(4, 4) == (4, 3, 2, 1)
    assert sorted(outward_ranking(17, 32)) == list(range(1, 33))

def test_rank_from_probabilities():
    """ Higher probability first, ties broken by the smaller beam. """
    assert rank_from_probabilities([0.1, 0.4, 0.1, 0.4]) == (2, 4, 1, 3)
    with pytest.raises(ValueError):
        RankedPrediction(((1, 1, 2),))

def test_topk_hand_example():
    """ Two of three labels fall among the first two candidates. """
    preds = [RankedPrediction(((3, 4, 5),)), RankedPrediction(((7, 8, 9),)),
             RankedPrediction(((1, 2, 3),))]
    labels = [(4,), (9,), (1,)]
    assert topk_accuracy(preds, labels, 1, 1) == pytest.approx(1 / 3.)
    assert topk_accuracy(preds, labels, 2, 1) == pytest.approx(2 / 3.)
    assert topk_accuracy(preds, labels, 3, 1) == 1.
    with pytest.raises(LengthMismatch):
        topk_accuracy(preds, labels[:2], 1, 1)
    with pytest.raises(ConfigError):
        topk_accuracy(preds, labels, 0, 1)
    with pytest.raises(EmptyReport):
        topk_accuracy([], [], 1, 1)

def test_topk_monotone_and_complete():
    """ Accuracy never decreases with K and reaches one at K = M. """
    rng = np.random.default_rng(0)
    preds = [ranked(*rng.integers(1, 33, 5)) for _ in range(50)]
    labels = [tuple(rng.integers(1, 33, 5)) for _ in range(50)]
    for step in range(1, 6):
        accs = [topk_accuracy(preds, labels, k, step) for k in range(1, 33)]
        assert all(a <= b for a, b in zip(accs, accs[1:]))
        assert accs[-1] == 1.

def test_metrics_table():
    preds = [ranked(3, 3, 3, 3, 3), ranked(5, 6, 7, 8, 9)]
    labels = [(3, 4, 3, 3, 3), (4, 6, 7, 1, 9)]
    table = MetricsTable.from_predictions('fixed', preds, labels, (1, 2))
    frame = table.to_frame()
    assert list(frame.columns) == ['predictor', 'horizon', 'top1', 'top2', 'top3', 'top5', 'n',
                                   'invalid_rate']
    assert frame.horizon.tolist() == [1, 2, 3, 4, 5]
    assert table.top(1, 1) == 0.5 and table.top(2, 1) == 1.
    assert table.top(1, 4) == 0.5 and table.top(2, 4) == 0.5
    assert table.k_list == [1, 2] and table.predictors == ['fixed']
    both = MetricsTable.concat([table, MetricsTable.from_predictions('other', preds, labels)])
    assert both.predictors == ['fixed', 'other']
    assert both.top(1, 2, 'other') == 0.5
    with pytest.raises(EmptyReport):
        MetricsTable.concat([])

def test_metrics_extra_k_columns():
    """ K values outside 1, 2, 3, 5 are appended after invalid_rate. """
    preds = [ranked(3, 3, 3, 3, 3), ranked(5, 6, 7, 8, 9)]
    labels = [(3, 4, 3, 3, 3), (1, 6, 7, 1, 9)]
    table = MetricsTable.from_predictions('fixed', preds, labels, (1, 4, 9))
    assert list(table.frame.columns) == ['predictor', 'horizon', 'top1', 'top2', 'top3', 'top5',
                                         'n', 'invalid_rate', 'top4', 'top9']
    assert table.k_list == [1, 4, 9]
    assert table.top(4, 1) == 0.5 and table.top(9, 1) == 1.
    both = MetricsTable.concat([MetricsTable.from_predictions('plain', preds, labels), table])
    assert both.k_list == [1, 2, 3, 5, 4, 9]
    assert both.frame[both.frame.predictor == 'plain'].top4.isna().all()

def test_invalid_rate():
    preds = [ranked(1, 1, 1, 1, 1), RankedPrediction(ranked(2, 2, 2, 2, 2).rankings, valid=False)]
    table = MetricsTable.from_predictions('x', preds, [(1,) * 5, (2,) * 5], (1,))
    assert table.frame.invalid_rate.tolist() == [0.5] * 5
    assert table.frame.top1.tolist() == [1.] * 5

def test_evaluate_samples_threads():
    """ A thread pool gives the same table as the sequential run. """
    rng = np.random.default_rng(1)
    samples = [fake_sample(rng.integers(1, 33, 5)) for _ in range(20)]

    class EchoPredictor(object):
        name = 'echo'
        def rank(self, sample):
            return ranked(*sample.target_beams[:2], 1, 1, 1)

    one = evaluate_samples(EchoPredictor(), samples).frame
    four = evaluate_samples(EchoPredictor(), samples, threads=4).frame
    pandas.testing.assert_frame_equal(one, four)
    assert one.top1.tolist()[:2] == [1., 1.]
    with pytest.raises(EmptyReport):
        evaluate_samples(EchoPredictor(), [])

def test_oracle_predictor_is_perfect(tmp_path):
    """ On noiseless linear passes the pixel oracle reaches top-1 = 1 at every horizon. """
    manifest = tiny_dataset(tmp_path, n_sequences=4)
    table = evaluate(make_oracle_predictor(None, manifest), manifest)
    assert table.frame.top1.tolist() == [1.] * 5
    assert table.frame.invalid_rate.tolist() == [0.] * 5
    assert table.frame.n.iloc[0] == len(manifest.samples_in('test'))

def test_oracle_predictor_fallback():
    """ With no UAV in the last frame the oracle repeats the last observed beam. """
    world = tiny_world()
    pred = OraclePredictor(tiny_codebook(), world).rank(fake_sample((1,) * 5, (2,) * 7 + (9,)))
    assert not pred.valid
    assert [r[0] for r in pred.rankings] == [9] * 5

def test_evaluate_errors(tmp_path):
    manifest = tiny_dataset(tmp_path)
    with pytest.raises(ConfigError):
        evaluate(FixedPredictor((1,) * 5), manifest, k_list=(1, 33))
    manifest.samples = [dict(s, split='train') for s in manifest.samples]
    with pytest.raises(EmptyReport):
        load_split(manifest, 'test')

def test_vlm_predictor_ranks_greedy_first():
    """ The greedy beam heads each ranking and every beam appears once. """
    beams = (12, 3, 30, 5, 6)
    model, prompt = scripted_model(', '.join(map(str, beams)))
    pred = VlmPredictor(model, prompt).rank(fake_sample(beams))
    assert pred.valid
    for step, ranking in enumerate(pred.rankings):
        assert ranking[0] == beams[step]
        assert sorted(ranking) == list(range(1, 33))

def test_vlm_predictor_invalid_answer():
    """ A malformed answer ranks outward from the last observed beam. """
    model, prompt = scripted_model('7, 7, x')
    pred = VlmPredictor(model, prompt).rank(fake_sample((1,) * 5, (3,) * 7 + (20,)))
    assert not pred.valid
    assert all(r == outward_ranking(20, 32) for r in pred.rankings)

def test_baseline_predictor():
    cfg = BaselineConfig(hidden_size=8, d_m=8, image_size=16, patch_size=8)
    predictor = BaselinePredictor(build_baseline(cfg, seed=0))
    assert predictor.name == 'lstm'
    pred = predictor.rank(fake_sample((1,) * 5))
    assert len(pred.rankings) == 5 and all(len(r) == 32 for r in pred.rankings)

def test_untrained_vlm_rankings_are_complete(tmp_path):
    """ An untrained model still ranks every beam at every step; the chance-level check
    over a thousand samples lives with the desk-scale runs.
    """
    manifest = tiny_dataset(tmp_path, n_sequences=4)
    ckpt = Checkpoint.from_model(build_model(tiny_vlm_config(max_answer_tokens=16), seed=7), 'vlm')
    table = evaluate(make_vlm_predictor(ckpt, manifest), manifest, k_list=(1, 32))
    assert table.frame.horizon.tolist() == [1, 2, 3, 4, 5]
    assert (table.frame.top32 == 1.).all()

def test_binomial_chance_interval():
    lo, hi = binomial_chance_interval(1000, 32)
    sd = np.sqrt(1 / 32. * 31 / 32. / 1000)
    assert np.isclose(lo, 1 / 32. - 2 * sd) and np.isclose(hi, 1 / 32. + 2 * sd)
    assert binomial_chance_interval(1, 2, 10.) == (0., 1.)

def test_predictor_factories(tmp_path):
    """ Checkpoint kinds resolve through the registry, falling back on the built-in ones. """
    manifest = tiny_dataset(tmp_path)
    cfg = tiny_vlm_config()
    model = build_model(cfg)
    vlm = predictor_from_checkpoint(Checkpoint.from_model(model, 'vlm'), manifest)
    assert isinstance(vlm, VlmPredictor) and vlm.name == 'vlm'
    assert vlm.prompt.startswith('UAV link')
    model.attach_lora()
    assert make_vlm_predictor(Checkpoint.from_model(model, 'vlm'), manifest).name == 'vlm-lora'
    clf = build_baseline(BaselineConfig(cell_type='elman', hidden_size=8, d_m=8, image_size=16))
    rnn = predictor_from_checkpoint(Checkpoint.from_model(clf, 'rnn'), manifest)
    assert isinstance(rnn, BaselinePredictor) and rnn.name == 'rnn'
    assert make_rnn_predictor(Checkpoint.from_model(clf, 'rnn'), manifest, name='x').name == 'x'
    assert plugin_predictor('oracle') is not None
    with pytest.raises(ConfigError):
        plugin_predictor('gru')

def test_ablation_report(tmp_path):
    """ Same weights under each prompt; the full prompt has a zero delta. """
    manifest = tiny_dataset(tmp_path)
    model = sevens_model(tiny_vlm_config())
    full = default_template()
    variants = dict(full=full, no_hint=full.without('context_hint'))
    report = ablate_prompt(model, manifest, variants, k_list=(1, 3))
    frame = report.to_frame()
    assert list(frame.columns) == ['variant', 'horizon', 'top1', 'delta_top1_vs_full']
    assert len(frame) == 2 * 5
    assert (frame[frame.variant == 'full'].delta_top1_vs_full == 0.).all()
    # the wired model answers 7s whatever the prompt
    assert (frame.delta_top1_vs_full == 0.).all()
    assert report.metrics().predictors == ['full', 'no_hint']
    with pytest.raises(ConfigError):
        ablate_prompt(model, manifest, dict(no_hint=variants['no_hint'], other=full))
    with pytest.raises(ConfigError):
        ablate_prompt(model, manifest, dict(full=full))

def test_emit_csv(tmp_path):
    preds = [ranked(3, 3, 3, 3, 3)] * 4
    labels = [(3, 3, 4, 4, 5)] * 4
    table = MetricsTable.from_predictions('fixed', preds, labels)
    path = emit_csv([table], tmp_path / 'metrics.csv')
    assert path.read_text().splitlines()[0] == 'predictor,horizon,top1,top2,top3,top5,n,invalid_rate'
    again = pandas.read_csv(path)
    assert again.top1.tolist() == [1., 1., 0., 0., 0.]
    assert again.top3.tolist() == [1., 1., 1., 1., 0.]
    assert again.top5.tolist() == [1.] * 5
    with pytest.raises(EmptyReport):
        emit_csv([], tmp_path / 'empty.csv')
    with pytest.raises(StorageError):
        emit_csv(table, tmp_path / 'missing' / 'metrics.csv')

def test_emit_ablation_csv(tmp_path):
    labels = [(1,) * 5] * 2
    tables = dict(full=MetricsTable.from_predictions('full', [ranked(1, 1, 1, 1, 1)] * 2, labels),
                  empty=MetricsTable.from_predictions('empty', [ranked(1, 2, 2, 2, 2)] * 2,
                                                      labels))
    path = emit_ablation_csv(AblationReport(tables), tmp_path / 'ablation.csv')
    frame = pandas.read_csv(path)
    assert frame.columns.tolist() == ['variant', 'horizon', 'top1', 'delta_top1_vs_full']
    assert frame[frame.variant == 'empty'].delta_top1_vs_full.tolist() == [0., -1., -1., -1., -1.]

def test_parameter_counts():
    """ Counts read from checkpoints agree with the live models; adapters alone are trainable. """
    cfg = tiny_vlm_config()
    model = build_model(cfg)
    base = parameter_counts(Checkpoint.from_model(model, 'vlm'))
    assert base == dict(predictor='vlm', model_kind='vlm', total=model.parameter_report()['total'],
                        trainable=model.parameter_report()['total'], lora=0)

    model.attach_lora()
    tuned = parameter_counts(Checkpoint.from_model(model, 'vlm'), 'vlm-lora')
    assert tuned['lora'] == cfg.layers * 3 * 2 * cfg.lora_rank * cfg.d_m
    assert tuned['lora'] == model.parameter_report()['lora']
    assert tuned['trainable'] == tuned['lora']
    assert tuned['total'] == base['total'] + tuned['lora']

    clf = build_baseline(BaselineConfig(hidden_size=8, d_m=8, image_size=16))
    lstm = parameter_counts(Checkpoint.from_model(clf, 'lstm'))
    assert lstm['total'] == lstm['trainable'] == sum(p.numel() for p in clf.parameters())

def test_emit_complexity_csv(tmp_path):
    rows = [dict(predictor='vlm', model_kind='vlm', total=10, trainable=10, lora=0),
            dict(predictor='vlm-lora', model_kind='vlm', total=14, trainable=4, lora=4)]
    frame = pandas.read_csv(emit_complexity_csv(rows, tmp_path / 'complexity.csv'))
    assert frame.columns.tolist() == ['predictor', 'model_kind', 'total', 'trainable', 'lora']
    assert frame.trainable.tolist() == [10, 4]
    with pytest.raises(EmptyReport):
        emit_complexity_csv([], tmp_path / 'empty.csv')

def test_emit_svg(tmp_path):
    """ The chart is a well-formed SVG document with one series per predictor and K. """
    labels = [(3, 3, 4, 4, 5)] * 3
    tables = [MetricsTable.from_predictions(name, [ranked(b, b, b, b, b)] * 3, labels)
              for name, b in (('a', 3), ('b', 4))]
    path = emit_svg(tables, tmp_path / 'topk.svg')
    root = ET.parse(str(path)).getroot()
    assert root.tag.endswith('svg')
    assert 'a top-1' in path.read_text() and 'b top-5' in path.read_text()
    with pytest.raises(EmptyReport):
        emit_svg([], tmp_path / 'none.svg')
