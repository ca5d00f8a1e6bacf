""" Small worlds, datasets and hand-wired models shared by the tests """

# Imports #########################################################################
import torch

from aerolink.beamvlm.phy import build_codebook
from aerolink.beamvlm.scene import (TrajectoryConfig, WorldConfig, build_dataset,
                                    split_dataset)
from aerolink.beamvlm.text import Vocabulary, build_prompt, tokenize
from aerolink.beamvlm.vlm import BeamVlmModel, VlmConfig, build_model

# Builders ########################################################################
def tiny_world(**kwds):
    params = dict(image_width=16, image_height=16)
    params.update(kwds)
    return WorldConfig(**params)

def tiny_vlm_config(**kwds):
    params = dict(d_m=16, layers=1, heads=2, image_size=16, patch_size=8,
                  max_answer_tokens=13, max_context=512, lora_rank=4, lora_alpha=8.)
    params.update(kwds)
    return VlmConfig(**params)

def tiny_codebook():
    return build_codebook(16, 32)

def linear_trajectories(n_sequences=3, length=14, world=None):
    """ Noiseless pixel-snapped passes, one pixel column per step. """
    world = world or tiny_world()
    pitch = world.camera_fov / (world.image_width - 1)
    return [TrajectoryConfig(motion_model='linear-pass', speed=pitch, length=length, seed=s,
                             range_m=60., snap_to_pixels=True, edge_margin=4.)
            for s in range(n_sequences)]

def tiny_dataset(root, n_sequences=3, length=14, world=None, train_fraction=0.5, seed=0):
    """ Saved and split dataset of short linear passes. """
    world = world or tiny_world()
    manifest = build_dataset(world, linear_trajectories(n_sequences, length, world),
                             tiny_codebook(), root, scenario_name='tiny')
    manifest = split_dataset(manifest, train_fraction, seed)
    manifest.save()
    return manifest

def tiny_prompt(cfg, tag='UAV'):
    return build_prompt(cfg.n_beams, cfg.n_frames, cfg.horizon, tag)

# Rigged models ###################################################################
class ScriptedModel(BeamVlmModel):
    """ Model whose logits spell `script` right after a prefix of `prefix_len` positions,
    then EOS. The scripted token leads every other by `margin`.
    """
    def __init__(self, cfg, script, prefix_len, margin=8.):
        super(ScriptedModel, self).__init__(cfg)
        self.script = tokenize(script) + [Vocabulary.EOS]
        self.prefix_len = prefix_len
        self.margin = margin

    def forward(self, embeds, positions, cache=None):
        logits = torch.zeros(tuple(embeds.shape[:-1]) + (self.config.vocab_size,),
                             dtype=self.dtype)
        for i, p in enumerate(positions.tolist()):
            k = min(max(p - self.prefix_len + 1, 0), len(self.script) - 1)
            logits[..., i, self.script[k]] = self.margin
        return logits, []

def scripted_model(script, cfg=None, prompt=None, margin=8.):
    cfg = cfg or tiny_vlm_config()
    prompt = prompt if prompt is not None else tiny_prompt(cfg)
    model = ScriptedModel(cfg, script, cfg.sequence_length(len(tokenize(prompt))), margin)
    return model.eval(), prompt

def sevens_model(cfg=None, seed=0):
    """ Real model wired so that greedy decoding after any prompt writes '7, 7, 7, 7, 7'.

    Attention output and feed-forward are zeroed so every position only sees its own
    token; '7' is followed by ',', ',' by ' ' and anything else by '7'.
    """
    cfg = cfg or tiny_vlm_config()
    model = build_model(cfg, seed)
    seven, comma, space = tokenize('7, ')
    basis = torch.eye(cfg.d_m)
    with torch.no_grad():
        for block in model.blocks:
            block.attn.wo.weight.zero_()
            block.ffn.down.weight.zero_()
        model.token_embedding.weight.copy_(basis[2].expand(cfg.vocab_size, -1))
        model.token_embedding.weight[seven] = basis[0]
        model.token_embedding.weight[comma] = basis[1]
        model.lm_head.weight.zero_()
        model.lm_head.weight[comma] = 10. * basis[0]
        model.lm_head.weight[space] = 10. * basis[1]
        model.lm_head.weight[seven] = 10. * basis[2]
    return model.eval()
