""" Neural-network building blocks of the beam predictor.

Thin, typed operations over torch: low-rank adapters, rotary positional
embedding, causal multi-head attention, the pre-norm decoder block, the
masked cross-entropy, gradients and the AdamW optimizer. Every operation
works in float32 and in float64 (``module.double()``), the latter being used
by ``check_gradients``.
"""
import logging
import math
from typing import NamedTuple, Optional

import pandas
import torch
import torch.nn.functional as F
from torch import nn

from aerolink.beamvlm.errors import EmptyMask, GraphError, ShapeError

logger = logging.getLogger(__name__)

ROPE_BASE = 10000.


# Low-rank adaptation ##############################################################################
class LoraAdapter(nn.Module):
    """ Low-rank update (alpha / rank) * B A of a d_out x d_in weight.

    A is drawn from a zero-mean Gaussian and B starts at zero, so a fresh
    adapter leaves the adapted layer unchanged.
    """
    def __init__(self, d_in, d_out, rank=8, alpha=16., generator=None):
        super(LoraAdapter, self).__init__()
        if not 1 <= rank <= min(d_in, d_out):
            raise ShapeError('LoRA rank %d must lie in 1..%d' % (rank, min(d_in, d_out)))
        self.rank = rank
        self.alpha = float(alpha)
        self.a = nn.Parameter(torch.randn(rank, d_in, generator=generator) / math.sqrt(d_in))
        self.b = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def scaling(self):
        return self.alpha / self.rank

    def delta(self):
        return self.scaling * (self.b @ self.a)

    def extra_repr(self):
        return 'rank=%d, alpha=%g' % (self.rank, self.alpha)


def lora_merge(w0, adapter):
    """ W0 + (alpha / r) B A. """
    if adapter is None:
        return w0
    expected = (adapter.b.shape[0], adapter.a.shape[1])
    if tuple(w0.shape) != expected:
        raise ShapeError('weight of shape %s cannot take an adapter for %s'
                         % (tuple(w0.shape), expected))
    return w0 + adapter.delta()


def lora_forward(x, w0, adapter=None):
    """ x (W0 + (alpha / r) B A)^T, computed without merging the weight. """
    if x.shape[-1] != w0.shape[1]:
        raise ShapeError('input width %d does not match weight of shape %s'
                         % (x.shape[-1], tuple(w0.shape)))
    out = x @ w0.T
    if adapter is None:
        return out
    if adapter.a.shape[1] != w0.shape[1] or adapter.b.shape[0] != w0.shape[0]:
        raise ShapeError('adapter of shape %s x %s does not fit weight %s'
                         % (tuple(adapter.b.shape), tuple(adapter.a.shape), tuple(w0.shape)))
    return out + adapter.scaling * ((x @ adapter.a.T) @ adapter.b.T)


class LoraLinear(nn.Module):
    """ Bias-free linear map with an optional adapter. """
    def __init__(self, d_in, d_out):
        super(LoraLinear, self).__init__()
        self.weight = nn.Parameter(torch.randn(d_out, d_in) / math.sqrt(d_in))
        self.lora = None

    def attach_adapter(self, rank=8, alpha=16., generator=None):
        d_out, d_in = self.weight.shape
        self.lora = LoraAdapter(d_in, d_out, rank, alpha, generator).to(self.weight.dtype)
        return self.lora

    def merged_weight(self):
        return lora_merge(self.weight, self.lora)

    def forward(self, x):
        return lora_forward(x, self.weight, self.lora)


# Rotary embedding #################################################################################
def rope_apply(x, positions, base=ROPE_BASE):
    """ Rotate consecutive coordinate pairs of x by position-dependent angles.

    Pair i of a row at position p is turned by p * base^(-2i/d_h).

    :Parameters:
     - 'x' (Tensor): (..., n, d_h)
     - 'positions' (Tensor): integer positions of the n rows
    """
    d_h = x.shape[-1]
    if d_h % 2:
        raise ShapeError('rotary embedding needs an even head dimension, got %d' % d_h)
    positions = torch.as_tensor(positions)
    freqs = base ** (-torch.arange(0, d_h, 2, dtype=torch.float64) / d_h)
    angles = positions.to(torch.float64).unsqueeze(-1) * freqs
    cos, sin = angles.cos().to(x.dtype), angles.sin().to(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1).flatten(-2)


# Attention ########################################################################################
def _split_heads(x, heads):
    *lead, n, d_m = x.shape
    return x.reshape(*lead, n, heads, d_m // heads).transpose(-3, -2)


def _merge_heads(x):
    *lead, heads, n, d_h = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, heads * d_h)


def attention(q, k, v, heads, causal_mask=True, positions=None, key_positions=None, wo=None,
              scale_dim=None, rope_base=ROPE_BASE, return_weights=False):
    """ Multi-head attention with rotary positions.

    Per head: softmax(Q^p K^p^T / sqrt(d)) V where Q^p, K^p are the rotated
    projections and d is the head width unless `scale_dim` is given. With
    `causal_mask`, keys at a later position than the query are excluded.

    Parameters
    ----------
    q: Tensor
        (..., n_q, d_m) query projections, not rotated
    k, v: Tensor
        (..., n_k, d_m) key and value projections, not rotated
    heads: int
        number of heads H
    positions: Tensor
        positions of the queries, defaults to the last n_q key positions
    key_positions: Tensor
        positions of the keys, defaults to 0..n_k-1
    wo: callable or Tensor
        output projection applied to the concatenated heads

    Returns
    -------
        output (..., n_q, d_m), and the (..., H, n_q, n_k) weights when `return_weights`
    """
    d_m = q.shape[-1]
    if k.shape != v.shape or k.shape[-1] != d_m:
        raise ShapeError('attention inputs do not conform: q %s, k %s, v %s'
                         % (tuple(q.shape), tuple(k.shape), tuple(v.shape)))
    if d_m % heads:
        raise ShapeError('model width %d is not divisible by %d heads' % (d_m, heads))
    n_q, n_k = q.shape[-2], k.shape[-2]
    if key_positions is None:
        key_positions = torch.arange(n_k)
    if positions is None:
        positions = torch.as_tensor(key_positions)[n_k - n_q:]
    positions, key_positions = torch.as_tensor(positions), torch.as_tensor(key_positions)
    if positions.shape[-1] != n_q or key_positions.shape[-1] != n_k:
        raise ShapeError('position lists do not match the sequence lengths')

    qh = rope_apply(_split_heads(q, heads), positions, rope_base)
    kh = rope_apply(_split_heads(k, heads), key_positions, rope_base)
    vh = _split_heads(v, heads)
    scale = math.sqrt(scale_dim if scale_dim else d_m // heads)
    scores = qh @ kh.transpose(-2, -1) / scale
    if causal_mask:
        future = key_positions.unsqueeze(-2) > positions.unsqueeze(-1)
        scores = scores.masked_fill(future, float('-inf'))
    weights = torch.softmax(scores, dim=-1)
    out = _merge_heads(weights @ vh)
    if wo is not None:
        out = wo(out) if callable(wo) else out @ wo.T
    if return_weights:
        return out, weights
    return out


class KVCache(NamedTuple):
    """ Unrotated keys and values already seen by one attention block. """
    keys: torch.Tensor
    values: torch.Tensor
    positions: torch.Tensor

    def expand(self, batch):
        return KVCache(self.keys.expand(batch, -1, -1), self.values.expand(batch, -1, -1),
                       self.positions)


class AttentionBlock(nn.Module):
    """ Q, K, V and O projections around `attention`.

    Adapters are only ever attached to Q, K and V.
    """
    def __init__(self, d_m, heads, rope_base=ROPE_BASE, scale_dim=None):
        super(AttentionBlock, self).__init__()
        if d_m % heads:
            raise ShapeError('model width %d is not divisible by %d heads' % (d_m, heads))
        self.heads = heads
        self.rope_base = rope_base
        self.scale_dim = scale_dim
        self.wq = LoraLinear(d_m, d_m)
        self.wk = LoraLinear(d_m, d_m)
        self.wv = LoraLinear(d_m, d_m)
        self.wo = LoraLinear(d_m, d_m)

    def attach_lora(self, rank=8, alpha=16., generator=None):
        return [proj.attach_adapter(rank, alpha, generator) for proj in (self.wq, self.wk, self.wv)]

    def forward(self, x, positions, cache=None):
        k, v = self.wk(x), self.wv(x)
        key_positions = positions
        if cache is not None:
            k = torch.cat((cache.keys, k), dim=-2)
            v = torch.cat((cache.values, v), dim=-2)
            key_positions = torch.cat((cache.positions, positions))
        out = attention(self.wq(x), k, v, self.heads, True, positions, key_positions, self.wo,
                        self.scale_dim, self.rope_base)
        return out, KVCache(k, v, key_positions)


class FeedForward(nn.Module):
    def __init__(self, d_m, mult=4):
        super(FeedForward, self).__init__()
        self.up = nn.Linear(d_m, mult * d_m, bias=False)
        self.down = nn.Linear(mult * d_m, d_m, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.up(x)))


class DecoderBlock(nn.Module):
    """ Pre-norm residual block: x + attn(norm(x)), then x + ffn(norm(x)). """
    def __init__(self, d_m, heads, ffn_mult=4, rope_base=ROPE_BASE, scale_dim=None):
        super(DecoderBlock, self).__init__()
        self.norm1 = nn.RMSNorm(d_m, eps=1e-6)
        self.attn = AttentionBlock(d_m, heads, rope_base, scale_dim)
        self.norm2 = nn.RMSNorm(d_m, eps=1e-6)
        self.ffn = FeedForward(d_m, ffn_mult)

    def forward(self, x, positions, cache=None):
        h, cache = self.attn(self.norm1(x), positions, cache)
        x = x + h
        return x + self.ffn(self.norm2(x)), cache


# Loss and gradients ###############################################################################
def cross_entropy(logits, targets, mask):
    """ Mean of -log softmax(logits)[target] over the positions where mask is true.

    Parameters
    ----------
    logits: Tensor
        (..., n, V)
    targets: Tensor
        (..., n) integer ids
    mask: Tensor
        (..., n) booleans
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError('logits %s, targets %s and mask %s do not conform'
                         % (tuple(logits.shape), tuple(targets.shape), tuple(mask.shape)))
    if not bool(mask.any()):
        raise EmptyMask('no position carries a target')
    return F.cross_entropy(logits[mask], targets[mask])


def backward(loss, params):
    """ Gradients of a scalar loss with respect to `params`, in the same order.

    A loss recorded without any graph is a constant: every gradient is zero.
    A parameter left out of a recorded graph raises GraphError.
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise GraphError('parameter of shape %s does not require gradients' % (tuple(p.shape),))
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        if g is None:
            raise GraphError('parameter of shape %s is detached from the loss' % (tuple(p.shape),))
    return list(grads)


def clip_gradients(grads, max_norm=None):
    """ Rescale gradients to a global norm of at most `max_norm`.

    Returns
    -------
        (clipped gradients, global norm before clipping)
    """
    norm = torch.sqrt(sum((g.detach() ** 2).sum() for g in grads)) if grads else torch.tensor(0.)
    if max_norm is None or not norm > max_norm:
        return list(grads), float(norm)
    scale = max_norm / (float(norm) + 1e-6)
    return [g * scale for g in grads], float(norm)


# Optimizer ########################################################################################
def make_optimizer(params, learning_rate, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
    """ AdamW: bias-corrected moments, weight decay applied directly to the parameters. """
    return torch.optim.AdamW(list(params), lr=learning_rate, betas=tuple(betas), eps=eps,
                             weight_decay=weight_decay, foreach=False)


def adamw_step(optimizer, params, grads):
    """ One optimizer step with explicitly given gradients. """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ShapeError('%d parameters but %d gradients' % (len(params), len(grads)))
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError('gradient of shape %s for parameter of shape %s'
                             % (tuple(g.shape), tuple(p.shape)))
        p.grad = g.detach().to(p.dtype)
    optimizer.step()
    for p in params:
        p.grad = None
    return optimizer


# Gradient check ###################################################################################
def check_gradients(loss_fn, named_params, eps=1e-5, seed=0, rtol=1e-4, atol=None):
    """ Compare autograd with central finite differences.

    For each parameter a random unit direction u is drawn and the analytic
    directional derivative <grad, u> is compared with
    (f(p + eps u) - f(p - eps u)) / (2 eps). Run it on a float64 model.

    Parameters
    ----------
    loss_fn: callable
        no-argument function returning the scalar loss
    named_params: list
        (name, parameter) pairs
    eps: float
        finite-difference step
    seed: int
        seed of the random directions
    rtol, atol: float
        a parameter passes when |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|).
        The default atol is the roundoff floor of the central difference, so a
        wrong gradient is caught however small the true one is.

    Returns
    -------
    pandas.DataFrame
        one row per parameter: parameter, analytic, numeric, abs_error, rel_error, passed
    """
    named_params = list(named_params)
    gen = torch.Generator().manual_seed(seed)
    loss = loss_fn()
    if atol is None:
        atol = 10 * float(torch.finfo(loss.dtype).eps) * max(abs(float(loss)), 1.) / eps
    grads = torch.autograd.grad(loss, [p for _, p in named_params], allow_unused=True)
    rows = []
    for (name, p), g in zip(named_params, grads):
        u = torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype)
        u = u / u.norm()
        analytic = 0. if g is None else float((g * u).sum())
        original = p.detach().clone()
        with torch.no_grad():
            p.add_(eps * u)
            upper = float(loss_fn())
            p.copy_(original - eps * u)
            lower = float(loss_fn())
            p.copy_(original)
        numeric = (upper - lower) / (2 * eps)
        err, scale = abs(analytic - numeric), max(abs(analytic), abs(numeric))
        rows.append(dict(parameter=name, analytic=analytic, numeric=numeric, abs_error=err,
                         rel_error=err / scale if scale > 0 else 0.,
                         passed=err <= atol + rtol * scale))
    report = pandas.DataFrame(rows, columns=['parameter', 'analytic', 'numeric', 'abs_error',
                                             'rel_error', 'passed'])
    logger.debug('gradient check: %d of %d parameters off, max relative error %.3g',
                 len(report) - int(report.passed.sum()), len(report),
                 report.rel_error.max() if len(report) else 0.)
    return report
