""" Effect of the prompt on a trained VLM.

Evaluates the same weights with the shipped prompt variants, then with a
prompt whose codebook size is deliberately wrong.
"""
import matplotlib.pyplot as plt

from aerolink.beamvlm.evaluation import ablate_prompt, emit_ablation_csv
from aerolink.beamvlm.scene import DatasetManifest
from aerolink.beamvlm.shared import shared_data
from aerolink.beamvlm.text import PromptTemplate, load_prompt_variants
from aerolink.beamvlm.train import load_checkpoint, model_from_checkpoint

def wrong_size_template(template, m=16):
    """ Same blocks with the codebook size written as a literal. """
    return PromptTemplate(template.dataset_def.replace('{M}', str(m)), template.task_instruction,
                          template.context_hint, template.scenario_tag)

def run_ablation(checkpoint='desk_uav/vlm.ckpt', data='desk_uav/data', out='ablation.csv'):
    manifest = DatasetManifest.load(data)
    model = model_from_checkpoint(load_checkpoint(checkpoint))
    variants = load_prompt_variants(shared_data('prompts'), manifest.scenario_tag)
    variants['wrong_size'] = wrong_size_template(variants['full'])
    report = ablate_prompt(model, manifest, variants)
    emit_ablation_csv(report, out)
    return report.to_frame()

def plot_deltas(frame, ax=None):
    if ax is None:
        fig, ax = plt.subplots(1, 1)
    for name, rows in frame.groupby('variant', sort=False):
        ax.plot(rows.horizon, rows.delta_top1_vs_full, marker='o', label=name)
    ax.axhline(0., color='k', linewidth=0.5)
    ax.set_xlabel('horizon step')
    ax.set_ylabel('top-1 change against the full prompt')
    ax.legend()
    return ax

if __name__ == '__main__':
    frame = run_ablation()
    print(frame.to_string(index=False))
    plot_deltas(frame)
    plt.show()
