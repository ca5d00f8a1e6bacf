""" Teacher-forcing training, LoRA fine-tuning and checkpoints.

Checkpoint file layout (all integers little-endian)::

    b'BVLMCKPT'          magic, 8 bytes
    version              1 byte
    header length        uint32
    header               UTF-8 JSON: model kind, config, metadata, array table
    arrays               raw little-endian array data, in table order
    crc32                uint32 over everything above
"""
import dataclasses
import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas
import torch
from torch.utils.data import DataLoader, Dataset, RandomSampler
from tqdm import tqdm

from aerolink.beamvlm.errors import (ConfigError, CorruptionError, DivergenceError, FormatError,
                                     GraphError, StorageError, VersionError)
from aerolink.beamvlm.layers import (adamw_step, backward, clip_gradients, cross_entropy,
                                     make_optimizer)
from aerolink.beamvlm.scene import HORIZON, N_FRAMES, load_frames
from aerolink.beamvlm.text import build_prompt, format_answer, tokenize
from aerolink.beamvlm.vlm import (VlmConfig, assemble_sequence, build_model, embed_frames,
                                  normalize_image, pad_batch, predict_beams)

logger = logging.getLogger(__name__)

MAGIC = b'BVLMCKPT'
CHECKPOINT_VERSION = 1
MODES = ('full', 'lora_only')


# Configuration ####################################################################################
@dataclass(frozen=True)
class TrainConfig:
    """ Optimisation settings. Learning rate 1e-5 is the fine-tuning preset. """
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 3e-4
    weight_decay: float = 1e-2
    seed: int = 0
    mode: str = 'full'
    grad_clip: Optional[float] = 1.
    eval_every: int = 200
    warmup_steps: int = 0
    log_every: int = 20
    eval_samples: int = 64
    max_steps: Optional[int] = None
    progress: bool = False
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError('batch_size must be at least 1, got %d' % self.batch_size)
        if self.epochs < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError('epochs, learning_rate and weight_decay must be nonnegative')
        if self.mode not in MODES:
            raise ConfigError('unknown training mode %r, expected one of %s'
                              % (self.mode, ', '.join(MODES)))
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError('grad_clip must be positive or null')
        if self.warmup_steps < 0 or self.eval_every < 0 or self.log_every < 0:
            raise ConfigError('warmup_steps, eval_every and log_every must be nonnegative')


# Data #############################################################################################
class SceneDataset(Dataset):
    """ Samples of a dataset split with frames normalized once per sequence. """
    def __init__(self, manifest, indices, image_size):
        self.manifest = manifest
        self.indices = list(indices)
        records = manifest.label_records()
        entries = [manifest.samples[i] for i in self.indices]
        lengths = {s['seq']: s['length'] for s in manifest.sequences}
        self._frames = {}
        for seq in sorted(set(e['seq'] for e in entries)):
            raw = load_frames(manifest, seq, range(lengths[seq]))
            self._frames[seq] = torch.as_tensor(np.stack([normalize_image(f, image_size)
                                                          for f in raw]))
        self._entries = entries
        self._beams = {key: r['beam'] for key, r in records.items()}

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        e = self._entries[i]
        seq, offset = e['seq'], e['offset']
        beams = [self._beams[(seq, offset + k)] for k in range(N_FRAMES + HORIZON)]
        return dict(index=self.indices[i],
                    frames=self._frames[seq][offset:offset + N_FRAMES],
                    history=torch.tensor(beams[:N_FRAMES]),
                    targets=torch.tensor(beams[N_FRAMES:]))


def make_loader(dataset, batch_size, seed):
    """ Seeded shuffling loader; the last partial batch is kept. """
    sampler = RandomSampler(dataset, generator=torch.Generator().manual_seed(seed))
    return DataLoader(dataset, batch_size=batch_size, sampler=sampler, num_workers=0)


def collate_samples(samples, cfg):
    """ Batch dict of raw `scene.Sample` records. """
    return dict(frames=torch.stack([torch.as_tensor(np.stack([normalize_image(f, cfg.image_size)
                                                              for f in s.frames]))
                                    for s in samples]),
                history=torch.tensor([list(s.history_beams) for s in samples]),
                targets=torch.tensor([list(s.target_beams) for s in samples]))


# Loss #############################################################################################
def teacher_forcing_loss(model, batch, prompt):
    """ Mean over the batch of the per-sample answer cross-entropy.

    Each sample is fed [BOS][frames][prompt][ground-truth answer][EOS]; only
    answer and EOS positions are scored, each conditioned on the true prefix.

    Parameters
    ----------
    batch: dict or list
        collated batch with 'frames' and 'targets', or Samples
    prompt: str or list
        prompt text or ids
    """
    if not isinstance(batch, dict):
        batch = collate_samples(batch, model.config)
    targets = batch['targets']
    if len(targets) == 0:
        raise ConfigError('empty batch')
    prompt_ids = tokenize(prompt) if isinstance(prompt, (str, bytes)) else list(prompt)
    visual = embed_frames(batch['frames'], model.patch_embedder)
    sequences = [assemble_sequence(model, visual[b], prompt_ids,
                                   tokenize(format_answer(targets[b].tolist())))
                 for b in range(len(targets))]
    padded = pad_batch(model, sequences)
    logits, _ = model(padded.embeds, padded.positions)
    losses = [cross_entropy(logits[b, :-1], padded.token_ids[b, 1:], padded.loss_mask[b, 1:])
              for b in range(len(targets))]
    return torch.stack(losses).mean()


# Optimisation loop ################################################################################
class TrainingRecorder(object):
    """ Record the loss curve during training """
    columns = ['step', 'loss', 'lr', 'top1_holdout']

    def __init__(self):
        self.rows = []

    def record(self, step, loss, lr, top1_holdout=None):
        self.rows.append(dict(step=step, loss=loss, lr=lr, top1_holdout=top1_holdout))

    def to_frame(self):
        return pandas.DataFrame(self.rows, columns=self.columns)

    def save(self, path):
        """ Write the curve as JSON Lines, omitting absent hold-out scores. """
        try:
            with open(path, 'w', encoding='utf-8') as stream:
                for row in self.rows:
                    rec = {k: v for k, v in row.items() if v is not None}
                    stream.write(json.dumps(rec) + '\n')
        except OSError as err:
            raise StorageError('cannot write training log %s: %s' % (path, err))


def fit(params, step_loss, loader, cfg, recorder=None, holdout=None, desc='train'):
    """ Shared AdamW loop.

    Parameters
    ----------
    params: list
        trainable parameters
    step_loss: callable
        batch -> scalar loss tensor
    loader: iterable
        batches, iterated once per epoch
    cfg: TrainConfig
    holdout: callable
        no-argument function returning a hold-out Top-1, called every `eval_every` steps

    Returns
    -------
        (optimizer, number of steps, recorder)
    """
    params = list(params)
    recorder = recorder if recorder is not None else TrainingRecorder()
    optimizer = make_optimizer(params, cfg.learning_rate, cfg.weight_decay, cfg.betas, cfg.eps)
    total = cfg.epochs * len(loader)
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    step = 0
    with tqdm(total=total, desc=desc, disable=not cfg.progress) as bar:
        for epoch in range(cfg.epochs):
            for batch in loader:
                if step >= total:
                    break
                lr = cfg.learning_rate
                if cfg.warmup_steps:
                    lr *= min(1., (step + 1.) / cfg.warmup_steps)
                for group in optimizer.param_groups:
                    group['lr'] = lr
                loss = step_loss(batch)
                if not torch.isfinite(loss):
                    raise DivergenceError('loss became %s at step %d' % (float(loss), step))
                grads, _ = clip_gradients(backward(loss, params), cfg.grad_clip)
                adamw_step(optimizer, params, grads)
                step += 1
                top1 = None
                if holdout is not None and cfg.eval_every and step % cfg.eval_every == 0:
                    top1 = holdout()
                    logger.info('%s step %d: hold-out top-1 %.3f', desc, step, top1)
                recorder.record(step, float(loss), lr, top1)
                if cfg.log_every and step % cfg.log_every == 0:
                    logger.info('%s step %d/%d epoch %d: loss %.4f', desc, step, total, epoch,
                                float(loss))
                bar.update(1)
    return optimizer, step, recorder


def holdout_top1(model, manifest, prompt, n_samples=64):
    """ Greedy Top-1 at the first horizon step on the first test samples. """
    indices = manifest.samples_in('test')[:n_samples]
    if not indices:
        return float('nan')
    data = SceneDataset(manifest, indices, model.config.image_size)
    was_training = model.training
    model.eval()
    hits = 0
    for i in range(len(data)):
        item = data[i]
        pred = predict_beams(model, item['frames'], prompt, item['history'].tolist())
        hits += int(pred.beams[0] == int(item['targets'][0]))
    model.train(was_training)
    return hits / len(data)


def _default_prompt(model, manifest, prompt):
    if prompt is not None:
        return prompt
    cfg = model.config
    return build_prompt(cfg.n_beams, cfg.n_frames, cfg.horizon, manifest.scenario_tag)


def _train_loader(model, manifest, cfg):
    indices = manifest.samples_in('train')
    if not indices:
        raise ConfigError('the dataset split contains no train sample')
    return make_loader(SceneDataset(manifest, indices, model.config.image_size),
                       cfg.batch_size, cfg.seed)


def train(model, manifest, cfg, prompt=None):
    """ Train every parameter of the model on the train split.

    Returns
    -------
        (Checkpoint, loss curve DataFrame)
    """
    if cfg.mode != 'full':
        raise ConfigError('mode %r needs a base checkpoint, use finetune_lora' % cfg.mode)
    prompt = _default_prompt(model, manifest, prompt)
    loader = _train_loader(model, manifest, cfg)
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    logger.info('training %d parameters on %d samples', sum(p.numel() for p in params),
                len(loader.dataset))
    optimizer, steps, recorder = fit(
        params, lambda batch: teacher_forcing_loss(model, batch, prompt), loader, cfg,
        holdout=lambda: holdout_top1(model, manifest, prompt, cfg.eval_samples))
    model.eval()
    curve = recorder.to_frame()
    metadata = dict(seed=cfg.seed, steps=steps, scenario=manifest.scenario_name, prompt=prompt,
                    loss=float(curve.loss.iloc[-1]) if len(curve) else None)
    return Checkpoint.from_model(model, 'vlm', optimizer, metadata), curve


def finetune_lora(base, manifest, cfg, prompt=None):
    """ Adapt a base checkpoint to a new scenario through Q/K/V adapters only.

    The base weights are frozen and verified unchanged afterwards.

    Parameters
    ----------
    base: Checkpoint
        VLM checkpoint without adapters, or with all-zero adapters
    manifest: DatasetManifest
        dataset of the new scenario
    cfg: TrainConfig
        with mode 'lora_only'

    Returns
    -------
        (Checkpoint, loss curve DataFrame)
    """
    if cfg.mode != 'lora_only':
        raise ConfigError('finetune_lora needs mode lora_only, got %r' % cfg.mode)
    if base.model_kind != 'vlm':
        raise ConfigError('cannot fine-tune a %r checkpoint with LoRA' % base.model_kind)
    if any(np.any(a != 0) for k, a in base.lora.items() if k.endswith('.b')):
        raise ConfigError('the base checkpoint already carries a trained adapter')
    model = model_from_checkpoint(dataclasses.replace(base, lora={}))
    before = state_checksum(model.base_state())
    model.attach_lora(seed=cfg.seed)
    model.freeze_base()
    params = model.lora_parameters()
    report = model.parameter_report()
    logger.info('LoRA fine-tuning: %d trainable of %d parameters', report['trainable'],
                report['total'])

    prompt = _default_prompt(model, manifest, prompt)
    loader = _train_loader(model, manifest, cfg)
    model.train()
    optimizer, steps, recorder = fit(
        params, lambda batch: teacher_forcing_loss(model, batch, prompt), loader, cfg,
        holdout=lambda: holdout_top1(model, manifest, prompt, cfg.eval_samples), desc='finetune')
    model.eval()
    after = state_checksum(model.base_state())
    if after != before:
        raise GraphError('base weights changed during LoRA fine-tuning')
    curve = recorder.to_frame()
    metadata = dict(base.metadata, seed=cfg.seed, steps=steps, scenario=manifest.scenario_name,
                    prompt=prompt, base_checksum=before, trainable=report['trainable'],
                    loss=float(curve.loss.iloc[-1]) if len(curve) else None)
    return Checkpoint.from_model(model, 'vlm', optimizer, metadata), curve


# Checkpoint #######################################################################################
def _to_numpy(state):
    return {k: v.detach().cpu().numpy().copy() for k, v in state.items()}


def state_checksum(state):
    """ SHA-256 over the names and little-endian bytes of a state dict. """
    digest = hashlib.sha256()
    for name in sorted(state):
        arr = state[name]
        arr = arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else np.asarray(arr)
        digest.update(name.encode('utf-8'))
        digest.update(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder('<')).tobytes())
    return digest.hexdigest()


@dataclass(eq=False)
class Checkpoint:
    """ Model kind, config and arrays; LoRA arrays are kept apart from the base. """
    model_kind: str
    config: dict
    base: dict
    lora: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model, kind, optimizer=None, metadata=None):
        opt = {}
        if optimizer is not None:
            for i, state in optimizer.state_dict()['state'].items():
                for key, value in state.items():
                    opt['%d.%s' % (i, key)] = torch.as_tensor(value).detach().cpu().numpy()
        state = model.state_dict()
        return cls(model_kind=kind, config=dataclasses.asdict(model.config),
                   base=_to_numpy({k: v for k, v in state.items() if '.lora.' not in k}),
                   lora=_to_numpy({k: v for k, v in state.items() if '.lora.' in k}),
                   optimizer=opt, metadata=dict(metadata or {}))


def save_checkpoint(ckpt, path):
    """ Write a checkpoint file. """
    table, chunks, offset = [], [], 0
    for section in ('base', 'lora', 'optimizer'):
        for name, arr in getattr(ckpt, section).items():
            arr = np.asarray(arr)
            data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder('<')).tobytes()
            table.append(dict(section=section, name=name, dtype=arr.dtype.newbyteorder('<').str,
                              shape=list(arr.shape), offset=offset, nbytes=len(data)))
            chunks.append(data)
            offset += len(data)
    header = json.dumps(dict(model_kind=ckpt.model_kind, config=ckpt.config,
                             metadata=ckpt.metadata, arrays=table)).encode('utf-8')
    body = MAGIC + struct.pack('<BI', ckpt.format_version, len(header)) + header + b''.join(chunks)
    try:
        Path(path).write_bytes(body + struct.pack('<I', zlib.crc32(body)))
    except OSError as err:
        raise StorageError('cannot write checkpoint %s: %s' % (path, err))
    logger.info('checkpoint written to %s', path)
    return path


def load_checkpoint(path):
    """ Read and verify a checkpoint file. """
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise StorageError('cannot read checkpoint %s: %s' % (path, err))
    # magic, version byte, header length and trailing crc32
    if len(blob) < len(MAGIC) + 5 + 4:
        raise CorruptionError('checkpoint %s is truncated' % path)
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError('%s is not a checkpoint file' % path)
    version, header_len = struct.unpack_from('<BI', blob, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise VersionError('checkpoint format version %d is not the supported %d'
                           % (version, CHECKPOINT_VERSION))
    body, (crc,) = blob[:-4], struct.unpack('<I', blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError('checkpoint %s fails its checksum' % path)
    start = len(MAGIC) + 5
    try:
        header = json.loads(body[start:start + header_len].decode('utf-8'))
    except ValueError as err:
        raise CorruptionError('checkpoint %s has an unreadable header: %s' % (path, err))
    data = body[start + header_len:]
    sections = dict(base={}, lora={}, optimizer={})
    for entry in header['arrays']:
        if entry['offset'] + entry['nbytes'] > len(data):
            raise CorruptionError('array %s runs past the end of %s' % (entry['name'], path))
        arr = np.frombuffer(data, dtype=np.dtype(entry['dtype']),
                            count=int(np.prod(entry['shape'], dtype=np.int64)),
                            offset=entry['offset'])
        sections[entry['section']][entry['name']] = arr.reshape(entry['shape']).copy()
    return Checkpoint(model_kind=header['model_kind'], config=header['config'],
                      metadata=header.get('metadata', {}), format_version=version, **sections)


def model_from_checkpoint(ckpt):
    """ Rebuild the VLM or baseline network stored in a checkpoint, in eval mode. """
    from aerolink.beamvlm.config import from_dict
    if ckpt.model_kind == 'vlm':
        cfg = from_dict(VlmConfig, ckpt.config)
        model = build_model(cfg)
        if ckpt.lora:
            model.attach_lora()
    elif ckpt.model_kind in ('rnn', 'lstm'):
        from aerolink.beamvlm.baseline import BaselineConfig, RecurrentClassifier
        model = RecurrentClassifier(from_dict(BaselineConfig, ckpt.config))
    else:
        raise FormatError('unknown model kind %r' % ckpt.model_kind)
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in {**ckpt.base, **ckpt.lora}.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as err:
        raise FormatError('checkpoint arrays do not match the model: %s' % err)
    return model.eval()
