""" The generative vision-language beam predictor.

Frames are cut in patches and projected straight into the model width
("visual words"); the decoder reads ``[BOS][visual tokens][prompt]`` and
writes the answer text byte by byte. Beam indices are read back from the
text with the strict answer grammar of ``text``.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from torch import nn

from aerolink.beamvlm.errors import (AnswerError, ConfigError, ContextOverflow, FormatError,
                                     ShapeError)
from aerolink.beamvlm.layers import ROPE_BASE, DecoderBlock
from aerolink.beamvlm.text import (Vocabulary, detokenize, fallback_answer, format_answer,
                                   parse_answer, tokenize)

logger = logging.getLogger(__name__)


# Configuration ####################################################################################
@dataclass(frozen=True)
class VlmConfig:
    d_m: int = 128
    layers: int = 4
    heads: int = 4
    vocab_size: int = Vocabulary.SIZE
    image_size: int = 64
    patch_size: int = 8
    n_frames: int = 8
    horizon: int = 5
    n_beams: int = 32
    max_answer_tokens: int = 24
    max_context: int = 1024
    ffn_mult: int = 4
    rope_base: float = ROPE_BASE
    per_head_scaling: bool = True
    lora_rank: int = 8
    lora_alpha: float = 16.

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def visual_tokens(self):
        return self.n_frames * self.n_patches

    def sequence_length(self, prompt_len, answer_len=None):
        """ Positions of [BOS][visual][prompt] plus [answer][EOS] when an answer is given. """
        n = 1 + self.visual_tokens + prompt_len
        return n if answer_len is None else n + answer_len + 1

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigError('image_size %d is not divisible by patch_size %d'
                              % (self.image_size, self.patch_size))
        if self.d_m % self.heads or (self.d_m // self.heads) % 2:
            raise ConfigError('d_m=%d must split in %d heads of even width' % (self.d_m, self.heads))
        if self.vocab_size != Vocabulary.SIZE:
            raise ConfigError('vocab_size is fixed to %d' % Vocabulary.SIZE)
        if min(self.layers, self.n_frames, self.horizon, self.max_answer_tokens) < 1:
            raise ConfigError('layers, n_frames, horizon and max_answer_tokens must be positive')
        if self.n_beams < 2:
            raise ConfigError('n_beams must be at least 2')
        if not 1 <= self.lora_rank <= self.d_m:
            raise ConfigError('lora_rank must lie in 1..d_m')


# Visual input #####################################################################################
def normalize_image(raw, size=64):
    """ Resize a grayscale image to size x size by area averaging and map it to [-1, 1].

    Returns
    -------
        float32 array, (pixel / 255 - 0.5) / 0.5
    """
    img = np.asarray(raw, dtype=np.float32)
    if img.ndim != 2 or img.size == 0:
        raise FormatError('expected a non-empty grayscale image, got shape %s' % (img.shape,))
    h, w = img.shape
    if (h, w) != (size, size):
        if h % size == 0 and w % size == 0:
            img = img.reshape(size, h // size, size, w // size).mean(axis=(1, 3))
        else:
            img = np.asarray(Image.fromarray(img).resize((size, size), Image.Resampling.BOX),
                             dtype=np.float32)
    return ((img / 255. - 0.5) / 0.5).astype(np.float32)


def prepare_frames(frames, cfg, dtype=torch.float32):
    """ Normalized frame stack as a tensor (n_frames, S, S); tensors pass through. """
    if isinstance(frames, torch.Tensor):
        return frames.to(dtype)
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[0] != cfg.n_frames:
        raise ShapeError('expected %d frames, got array of shape %s' % (cfg.n_frames, frames.shape))
    return torch.as_tensor(np.stack([normalize_image(f, cfg.image_size) for f in frames])).to(dtype)


class PatchEmbedder(nn.Module):
    """ Non-overlapping patches projected to d_m, plus patch and frame position offsets. """
    def __init__(self, image_size, patch_size, d_m, n_frames):
        super(PatchEmbedder, self).__init__()
        if image_size % patch_size:
            raise ShapeError('image_size %d is not divisible by patch_size %d'
                             % (image_size, patch_size))
        self.image_size = image_size
        self.patch_size = patch_size
        self.n_frames = n_frames
        self.n_patches = (image_size // patch_size) ** 2
        self.projection = nn.Linear(patch_size * patch_size, d_m)
        self.patch_position = nn.Parameter(0.02 * torch.randn(self.n_patches, d_m))
        self.frame_position = nn.Parameter(0.02 * torch.randn(n_frames, d_m))

    def patches(self, frames):
        """ (..., F, S, S) -> (..., F, n_patches, p*p), patches and pixels in row-major order. """
        p = self.patch_size
        x = frames.unfold(-2, p, p).unfold(-2, p, p)
        return x.reshape(*frames.shape[:-2], self.n_patches, p * p)

    def forward(self, frames):
        """ (..., F, S, S) normalized frames -> (..., F * n_patches, d_m). """
        if tuple(frames.shape[-3:]) != (self.n_frames, self.image_size, self.image_size):
            raise ShapeError('expected frames of shape (%d, %d, %d), got %s'
                             % (self.n_frames, self.image_size, self.image_size,
                                tuple(frames.shape)))
        tokens = self.projection(self.patches(frames))
        tokens = tokens + self.patch_position + self.frame_position.unsqueeze(-2)
        return tokens.reshape(*frames.shape[:-3], -1, tokens.shape[-1])


def embed_frames(frames, embedder):
    """ Visual tokens of a frame stack, frames in chronological order. """
    return embedder(torch.as_tensor(frames, dtype=embedder.patch_position.dtype))


# Model ############################################################################################
class BeamVlmModel(nn.Module):
    """ Patch embedder, token embedding, decoder stack and output projection. """
    def __init__(self, cfg):
        super(BeamVlmModel, self).__init__()
        self.config = cfg
        self.patch_embedder = PatchEmbedder(cfg.image_size, cfg.patch_size, cfg.d_m, cfg.n_frames)
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.d_m)
        scale_dim = None if cfg.per_head_scaling else cfg.d_m
        self.blocks = nn.ModuleList([DecoderBlock(cfg.d_m, cfg.heads, cfg.ffn_mult, cfg.rope_base,
                                                  scale_dim) for _ in range(cfg.layers)])
        self.norm = nn.RMSNorm(cfg.d_m, eps=1e-6)
        self.lm_head = nn.Linear(cfg.d_m, cfg.vocab_size, bias=False)

    @property
    def dtype(self):
        return self.lm_head.weight.dtype

    @property
    def has_lora(self):
        return any(b.attn.wq.lora is not None for b in self.blocks)

    def embed_tokens(self, ids):
        return self.token_embedding(torch.as_tensor(ids, dtype=torch.long))

    def forward(self, embeds, positions, cache=None):
        """ Logits for every input position.

        Parameters
        ----------
        embeds: Tensor
            (..., n, d_m)
        positions: Tensor
            (n,) absolute positions of the inputs
        cache: list of KVCache
            one entry per block from a previous call

        Returns
        -------
            (logits (..., n, vocab_size), new cache)
        """
        x = embeds
        new_cache = []
        for i, block in enumerate(self.blocks):
            x, c = block(x, positions, None if cache is None else cache[i])
            new_cache.append(c)
        return self.lm_head(self.norm(x)), new_cache

    def attach_lora(self, rank=None, alpha=None, seed=0):
        """ Attach fresh adapters to the Q, K and V projections of every block. """
        if self.has_lora:
            raise ConfigError('the model already carries LoRA adapters')
        rank = rank or self.config.lora_rank
        alpha = alpha or self.config.lora_alpha
        gen = torch.Generator().manual_seed(seed)
        adapters = []
        for block in self.blocks:
            adapters.extend(block.attn.attach_lora(rank, alpha, gen))
        return adapters

    def freeze_base(self):
        for name, p in self.named_parameters():
            p.requires_grad_('.lora.' in name)

    def lora_parameters(self):
        return [p for name, p in self.named_parameters() if '.lora.' in name]

    def base_state(self):
        return {k: v for k, v in self.state_dict().items() if '.lora.' not in k}

    def lora_state(self):
        return {k: v for k, v in self.state_dict().items() if '.lora.' in k}

    def parameter_report(self):
        """ Total, trainable and adapter parameter counts. """
        params = list(self.named_parameters())
        return dict(total=sum(p.numel() for _, p in params),
                    trainable=sum(p.numel() for _, p in params if p.requires_grad),
                    lora=sum(p.numel() for n, p in params if '.lora.' in n))


def build_model(cfg, seed=0):
    """ Freshly initialized model; the global torch generator is left untouched. """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return BeamVlmModel(cfg)


# Sequence assembly ################################################################################
@dataclass(eq=False)
class AssembledSequence:
    embeds: torch.Tensor
    token_ids: torch.Tensor
    positions: torch.Tensor
    loss_mask: torch.Tensor

    def __len__(self):
        return self.token_ids.shape[-1]


def assemble_sequence(model, visual_tokens, prompt_ids, answer_ids=None):
    """ Lay out [BOS][visual tokens][prompt][answer][EOS].

    Visual positions carry the IMG id and their continuous embeddings.
    The loss mask is true on the answer and EOS positions only; without an
    answer the sequence ends after the prompt.
    """
    cfg = model.config
    if tuple(visual_tokens.shape) != (cfg.visual_tokens, cfg.d_m):
        raise ShapeError('expected %d visual tokens of width %d, got %s'
                         % (cfg.visual_tokens, cfg.d_m, tuple(visual_tokens.shape)))
    prompt_ids = list(prompt_ids)
    text_ids = prompt_ids + ([] if answer_ids is None else list(answer_ids) + [Vocabulary.EOS])
    n = 1 + cfg.visual_tokens + len(text_ids)
    if n > cfg.max_context:
        raise ContextOverflow('sequence of %d positions exceeds the context of %d'
                              % (n, cfg.max_context))
    token_ids = torch.tensor([Vocabulary.BOS] + [Vocabulary.IMG] * cfg.visual_tokens + text_ids)
    embeds = torch.cat((model.embed_tokens([Vocabulary.BOS]), visual_tokens.to(model.dtype),
                        model.embed_tokens(text_ids).reshape(len(text_ids), cfg.d_m)))
    mask = torch.zeros(n, dtype=torch.bool)
    if answer_ids is not None:
        mask[n - len(answer_ids) - 1:] = True
    return AssembledSequence(embeds=embeds, token_ids=token_ids, positions=torch.arange(n),
                             loss_mask=mask)


def pad_batch(model, sequences):
    """ Stack sequences, right-padding with PAD. Causal attention keeps padding invisible. """
    n = max(len(s) for s in sequences)
    pad = model.embed_tokens([Vocabulary.PAD])
    embeds, ids, masks = [], [], []
    for s in sequences:
        extra = n - len(s)
        embeds.append(torch.cat((s.embeds, pad.expand(extra, -1))))
        ids.append(torch.cat((s.token_ids, torch.full((extra,), Vocabulary.PAD))))
        masks.append(torch.cat((s.loss_mask, torch.zeros(extra, dtype=torch.bool))))
    return AssembledSequence(embeds=torch.stack(embeds), token_ids=torch.stack(ids),
                             positions=torch.arange(n), loss_mask=torch.stack(masks))


# Decoding #########################################################################################
_NEVER_EMITTED = [Vocabulary.BOS, Vocabulary.PAD, Vocabulary.IMG]


def _restrict(logits):
    logits = logits.clone()
    logits[..., _NEVER_EMITTED] = float('-inf')
    return logits


def _prompt_ids(prompt):
    return tokenize(prompt) if isinstance(prompt, (str, bytes)) else list(prompt)


class DecodeSession(object):
    """ Encoded prefix of one sample, shared by greedy decoding and candidate scoring. """
    def __init__(self, model, frames, prompt):
        self.model = model
        cfg = model.config
        with torch.no_grad():
            visual = embed_frames(prepare_frames(frames, cfg, model.dtype), model.patch_embedder)
            seq = assemble_sequence(model, visual, _prompt_ids(prompt))
            logits, self.cache = model(seq.embeds.unsqueeze(0), seq.positions)
        self.length = len(seq)
        self.last_logits = logits[0, -1]

    def _advance(self, ids, cache, start):
        """ Feed text ids after the prefix; returns logits of every fed id and the cache. """
        embeds = self.model.embed_tokens(ids).reshape(1, len(ids), -1)
        logits, cache = self.model(embeds, torch.arange(start, start + len(ids)), cache)
        return logits[0], cache

    def generate(self, max_tokens=None):
        """ Greedy answer text, stopping at EOS or after `max_tokens` bytes. """
        max_tokens = max_tokens or self.model.config.max_answer_tokens
        if self.length + max_tokens > self.model.config.max_context:
            raise ContextOverflow('prefix of %d positions leaves no room for %d answer tokens'
                                  % (self.length, max_tokens))
        out = []
        logits, cache, pos = self.last_logits, self.cache, self.length
        with torch.no_grad():
            for _ in range(max_tokens):
                token = int(torch.argmax(_restrict(logits)))
                if token == Vocabulary.EOS:
                    break
                out.append(token)
                if len(out) == max_tokens:
                    break
                step, cache = self._advance([token], cache, pos)
                logits, pos = step[-1], pos + 1
        return detokenize(out)

    def score(self, step_j, greedy_prefix, n_beams=None):
        """ Log-probability of every beam index as the answer at step `step_j`.

        Candidate m is the canonical text of m followed by ', ', or by EOS
        at the last step, decoded after `greedy_prefix`.

        Returns
        -------
            float64 array of n_beams scores, index m-1 for beam m
        """
        cfg = self.model.config
        n_beams = n_beams or cfg.n_beams
        if not 1 <= step_j <= cfg.horizon:
            raise ShapeError('step %d outside 1..%d' % (step_j, cfg.horizon))
        tail = [Vocabulary.EOS] if step_j == cfg.horizon else tokenize(', ')
        candidates = [tokenize(str(m)) + tail for m in range(1, n_beams + 1)]
        prefix = tokenize(greedy_prefix)
        with torch.no_grad():
            logits, cache, start = self.last_logits, self.cache, self.length
            if prefix:
                step, cache = self._advance(prefix, cache, start)
                logits, start = step[-1], start + len(prefix)
            first = torch.log_softmax(_restrict(logits).double(), dim=-1)

            width = max(len(c) for c in candidates) - 1
            inputs = torch.tensor([c[:-1] + [Vocabulary.PAD] * (width - len(c) + 1)
                                   for c in candidates])
            embeds = self.model.embed_tokens(inputs)
            batch_cache = [c.expand(n_beams) for c in cache]
            out, _ = self.model(embeds, torch.arange(start, start + width), batch_cache)
            rest = torch.log_softmax(_restrict(out).double(), dim=-1)

        scores = np.empty(n_beams)
        for k, cand in enumerate(candidates):
            total = first[cand[0]]
            for i in range(1, len(cand)):
                total = total + rest[k, i - 1, cand[i]]
            scores[k] = float(total)
        return scores


def generate(model, frames, prompt, max_answer_tokens=None):
    """ Greedy answer text for one frame stack. """
    return DecodeSession(model, frames, prompt).generate(max_answer_tokens)


@dataclass(frozen=True)
class BeamPrediction:
    beams: tuple
    valid: bool
    raw: str


def read_answer(raw, history, cfg):
    """ Parse generated text, falling back on the last observed beam. """
    try:
        return BeamPrediction(parse_answer(raw, cfg.n_beams, cfg.horizon).beams, True, raw)
    except AnswerError as err:
        logger.debug('invalid answer %r: %s', raw, err)
        return BeamPrediction(fallback_answer(history, cfg.horizon).beams, False, raw)


def predict_beams(model, frames, prompt, input_beam_history):
    """ Beam indices for the next `horizon` steps and whether the model answered validly. """
    return read_answer(generate(model, frames, prompt), input_beam_history, model.config)


def answer_prefix(beams, step_j):
    """ Canonical answer text written before step `step_j`. """
    return format_answer(beams[:step_j - 1]) + ', ' if step_j > 1 else ''


def score_candidates(model, frames, prompt, step_j, greedy_prefix):
    return DecodeSession(model, frames, prompt).score(step_j, greedy_prefix)
