"""Neural building blocks: attention, feed-forward, layer norm, embeddings,
and pre-norm encoder/decoder layers.

All parameters are float64 leaf tensors created with uniform init in
±1/sqrt(fan_in); biases and layer-norm offsets start at zero, layer-norm
gains at one.  Modules discover their parameters by walking attributes, so
a module is just a plain object holding Tensors, sub-modules, or lists of
sub-modules.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_init(shape, fan_in, rng):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Module:
    """Base class providing recursive parameter discovery."""

    def named_parameters(self, prefix=""):
        """Every parameter tensor, frozen ones included."""
        out = []
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{name}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = uniform_init((d_in, d_out), d_in, rng)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias \
            else None

    def __call__(self, x):
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.offset = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.offset, eps=self.eps)


class Embedding(Module):
    """Token plus learned positional embedding."""

    def __init__(self, vocab_size, max_len, d, rng):
        self.token_table = uniform_init((vocab_size, d), d, rng)
        self.position_table = uniform_init((max_len, d), d, rng)
        self.max_len = max_len

    def __call__(self, tokens):
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.size == 0:
            raise ValueError("embed: empty token sequence")
        if tokens.size > self.max_len:
            raise IndexError(
                f"embed: sequence length {tokens.size} exceeds maximum "
                f"{self.max_len}"
            )
        tok = T.gather_rows(self.token_table, tokens)
        pos = T.gather_rows(self.position_table, np.arange(tokens.size))
        return T.add(tok, pos)


def _build_additive_mask(l_q, l_kv, mask, causal):
    """Combine an optional boolean keep-mask with a causal constraint into
    an additive 0/−inf matrix, or None when nothing is masked."""
    if mask is None and not causal:
        return None
    keep = np.ones((l_q, l_kv), dtype=bool)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != (l_q, l_kv):
            raise ValueError(
                f"attention mask shape {m.shape} does not match "
                f"({l_q}, {l_kv})"
            )
        keep &= m
    if causal:
        keep &= np.tril(np.ones((l_q, l_kv), dtype=bool))
    if not keep.any(axis=1).all():
        row = int(np.flatnonzero(~keep.any(axis=1))[0])
        raise ValueError(f"attention mask leaves query row {row} fully masked")
    add = np.zeros((l_q, l_kv))
    add[~keep] = -np.inf
    return Tensor(add)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head projections folded into
    shared W_Q/W_K/W_V matrices of width d_k.

    Returns the projected output and the head-averaged post-softmax weight
    matrix (the visualization object).
    """

    def __init__(self, d_q_in, d_kv_in, d_k, d_out, heads, rng):
        if d_k % heads != 0:
            raise ValueError(f"d_k={d_k} is not divisible by heads={heads}")
        self.W_Q = uniform_init((d_q_in, d_k), d_q_in, rng)
        self.W_K = uniform_init((d_kv_in, d_k), d_kv_in, rng)
        self.W_V = uniform_init((d_kv_in, d_k), d_kv_in, rng)
        self.W_O = uniform_init((d_k, d_out), d_k, rng)
        self.heads = heads
        self.d_head = d_k // heads

    def __call__(self, q_in, kv_in, mask=None, causal=False):
        l_q = q_in.shape[0]
        l_kv = kv_in.shape[0]
        h, dh = self.heads, self.d_head

        def split(x, l):
            return T.permute(T.reshape(x, (l, h, dh)), (1, 0, 2))

        q = split(T.matmul(q_in, self.W_Q), l_q)
        k = split(T.matmul(kv_in, self.W_K), l_kv)
        v = split(T.matmul(kv_in, self.W_V), l_kv)

        scores = T.scale(T.bmm(q, T.permute(k, (0, 2, 1))),
                         1.0 / math.sqrt(dh))
        additive = _build_additive_mask(l_q, l_kv, mask, causal)
        if additive is not None:
            scores = T.add(scores, additive)
        weights = T.softmax(scores, axis=-1)

        mixed = T.bmm(weights, v)
        merged = T.reshape(T.permute(mixed, (1, 0, 2)), (l_q, h * dh))
        return T.matmul(merged, self.W_O), T.mean_axis(weights, axis=0)


class FeedForward(Module):
    def __init__(self, d, d_ff, rng):
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)

    def __call__(self, x):
        return self.fc2(T.tanh(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm: x + SelfAttn(LN(x)), then + FFN(LN(.))."""

    def __init__(self, d, d_ff, heads, rng):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, d, d, d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff, rng)

    def __call__(self, x, mask=None):
        a = self.norm1(x)
        attn_out, _ = self.attn(a, a, mask=mask)
        x = T.add(x, attn_out)
        return T.add(x, self.ffn(self.norm2(x)))


class DecoderLayer(Module):
    """Pre-norm decoder: causal self-attention, cross-attention over the
    memory sequence, then feed-forward, each behind a residual."""

    def __init__(self, d, d_ff, heads, rng):
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, d, d, d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, d, d, d, heads, rng)
        self.norm3 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff, rng)

    def __call__(self, y, memory):
        a = self.norm1(y)
        self_out, _ = self.self_attn(a, a, causal=True)
        y = T.add(y, self_out)
        cross_out, _ = self.cross_attn(self.norm2(y), memory)
        y = T.add(y, cross_out)
        return T.add(y, self.ffn(self.norm3(y)))


class Conv1d(Module):
    """Strided 1-D convolution over a [length, channels] sequence.

    Zero-pads so the output length is exactly ceil(length / stride); with
    length divisible by stride that is length / stride.
    """

    def __init__(self, in_channels, out_channels, width, stride, rng):
        if width < 1 or stride < 1:
            raise ValueError(
                f"conv width/stride must be positive, got {width}/{stride}"
            )
        self.weight = uniform_init((width * in_channels, out_channels),
                                   width * in_channels, rng)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.in_channels = in_channels
        self.width = width
        self.stride = stride

    def __call__(self, x):
        l_in, channels = x.shape
        if channels != self.in_channels:
            raise ValueError(
                f"conv expects {self.in_channels} channels, got {channels}"
            )
        if l_in < 1:
            raise ValueError("conv input sequence is empty")
        l_out = -(-l_in // self.stride)
        # pad with an explicit zero row, then gather windows (out-of-range
        # taps index the zero row)
        zero_row = Tensor(np.zeros((1, channels)))
        padded = T.concat([x, zero_row], axis=0)
        starts = np.arange(l_out) * self.stride
        taps = starts[:, None] + np.arange(self.width)[None, :]
        taps = np.where(taps < l_in, taps, l_in)
        windows = T.gather_rows(padded, taps.reshape(-1))
        windows = T.reshape(windows, (l_out, self.width * channels))
        return T.add(T.matmul(windows, self.weight), self.bias)
