"""Transformer building blocks: multi-head attention, encoder/decoder layers,
sinusoidal positions, causal masks and the strided frame-subsampling front end.

Layers are pre-norm residual blocks. Attention maps are retained and returned
in eval mode only; training skips map retention.
"""

import math
from array import array
from dataclasses import dataclass, field

from twopass_slu import ops
from twopass_slu.tensor import ShapeError, Tensor, full, randn, zeros


@dataclass
class AttentionConfig:
    model_dim: int
    n_heads: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ValueError(f"n_heads={self.n_heads} must divide model_dim={self.model_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self):
        return self.model_dim // self.n_heads


@dataclass
class AttentionMap:
    """Per-head attention weights [query_len x key_len] for inspection."""
    layer: int
    head: int
    weights: Tensor
    kind: str = "self"

    @property
    def query_len(self):
        return self.weights.shape[0]

    @property
    def key_len(self):
        return self.weights.shape[1]


def sinusoidal_positions(length, dim, _cache={}):
    """Parameter-free absolute position encoding [length x dim]."""
    key = (length, dim)
    cached = _cache.get(key)
    if cached is not None:
        return cached
    data = array("d", bytes(8 * length * dim))
    for pos in range(length):
        for i in range(0, dim, 2):
            angle = pos / (10000.0 ** (i / dim))
            data[pos * dim + i] = math.sin(angle)
            if i + 1 < dim:
                data[pos * dim + i + 1] = math.cos(angle)
    enc = Tensor((length, dim), data)
    _cache[key] = enc
    return enc


def causal_mask(length, _cache={}):
    """Additive mask: position i may attend to positions <= i only."""
    if length < 1:
        raise ShapeError(f"causal_mask needs length >= 1, got {length}")
    cached = _cache.get(length)
    if cached is not None:
        return cached
    neg = float("-inf")
    data = array("d", bytes(8 * length * length))
    for i in range(length):
        for j in range(i + 1, length):
            data[i * length + j] = neg
    mask = Tensor((length, length), data)
    _cache[length] = mask
    return mask


def add_positions(x):
    """x + sinusoidal positions over its row index."""
    return ops.add(x, sinusoidal_positions(x.shape[0], x.shape[1]))


class MultiHeadAttention:
    """Scaled dot-product attention with per-head projections."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        d = cfg.model_dim
        std = 1.0 / math.sqrt(d)
        self.wq = randn((d, d), rng, std, requires_grad=True)
        self.wk = randn((d, d), rng, std, requires_grad=True)
        self.wv = randn((d, d), rng, std, requires_grad=True)
        self.wo = randn((d, d), rng, std, requires_grad=True)
        self.bq = zeros((d,), requires_grad=True)
        self.bk = zeros((d,), requires_grad=True)
        self.bv = zeros((d,), requires_grad=True)
        self.bo = zeros((d,), requires_grad=True)

    def named_params(self, prefix):
        return {f"{prefix}.{n}": getattr(self, n)
                for n in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}

    def __call__(self, q_input, kv_input, mask=None, train=False, rng=None,
                 layer=0, kind="self"):
        """Returns (output [Tq x d], attention maps; maps empty in train mode)."""
        cfg = self.cfg
        if q_input.shape[1] != cfg.model_dim or kv_input.shape[1] != cfg.model_dim:
            raise ShapeError(f"attention inputs must have width {cfg.model_dim}, "
                             f"got {q_input.shape} / {kv_input.shape}")
        if mask is not None and mask.shape != (q_input.shape[0], kv_input.shape[0]):
            raise ShapeError(f"mask shape {mask.shape} incompatible with "
                             f"query {q_input.shape[0]} x key {kv_input.shape[0]}")
        dh = cfg.head_dim
        q = ops.add(ops.matmul(q_input, self.wq), self.bq)
        k = ops.add(ops.matmul(kv_input, self.wk), self.bk)
        v = ops.add(ops.matmul(kv_input, self.wv), self.bv)
        scale = 1.0 / math.sqrt(dh)
        head_outs = []
        maps = []
        for h in range(cfg.n_heads):
            qh = ops.narrow(q, 1, h * dh, dh)
            kh = ops.narrow(k, 1, h * dh, dh)
            vh = ops.narrow(v, 1, h * dh, dh)
            scores = ops.scale(ops.matmul(qh, ops.transpose(kh)), scale)
            if mask is not None:
                scores = ops.add(scores, mask)
            att = ops.softmax(scores)
            if not train:
                maps.append(AttentionMap(layer, h, att, kind))
            att = ops.dropout(att, cfg.dropout, rng, train)
            head_outs.append(ops.matmul(att, vh))
        ctx = ops.concat(head_outs, axis=1) if len(head_outs) > 1 else head_outs[0]
        return ops.add(ops.matmul(ctx, self.wo), self.bo), maps


class FeedForward:
    def __init__(self, d, hidden, rng):
        self.w1 = randn((d, hidden), rng, 1.0 / math.sqrt(d), requires_grad=True)
        self.b1 = zeros((hidden,), requires_grad=True)
        self.w2 = randn((hidden, d), rng, 1.0 / math.sqrt(hidden), requires_grad=True)
        self.b2 = zeros((d,), requires_grad=True)

    def named_params(self, prefix):
        return {f"{prefix}.{n}": getattr(self, n) for n in ("w1", "b1", "w2", "b2")}

    def __call__(self, x):
        return ops.add(ops.matmul(ops.gelu(ops.add(ops.matmul(x, self.w1), self.b1)),
                                  self.w2), self.b2)


class LayerNormParams:
    def __init__(self, d):
        self.gain = full((d,), 1.0, requires_grad=True)
        self.bias = zeros((d,), requires_grad=True)

    def named_params(self, prefix):
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}

    def __call__(self, x):
        return ops.layer_norm(x, self.gain, self.bias)


class EncoderLayer:
    """Pre-norm self-attention + feed-forward residual block."""

    def __init__(self, cfg, ff_dim, rng):
        self.cfg = cfg
        self.ln1 = LayerNormParams(cfg.model_dim)
        self.attn = MultiHeadAttention(cfg, rng)
        self.ln2 = LayerNormParams(cfg.model_dim)
        self.ff = FeedForward(cfg.model_dim, ff_dim, rng)

    def named_params(self, prefix):
        out = {}
        out.update(self.ln1.named_params(f"{prefix}.ln1"))
        out.update(self.attn.named_params(f"{prefix}.attn"))
        out.update(self.ln2.named_params(f"{prefix}.ln2"))
        out.update(self.ff.named_params(f"{prefix}.ff"))
        return out

    def __call__(self, x, mask=None, train=False, rng=None, layer=0):
        normed = self.ln1(x)
        att_out, maps = self.attn(normed, normed, mask, train, rng, layer, "self")
        x = ops.add(x, ops.dropout(att_out, self.cfg.dropout, rng, train))
        x = ops.add(x, ops.dropout(self.ff(self.ln2(x)), self.cfg.dropout, rng, train))
        return x, maps


class DecoderLayer:
    """Pre-norm causal self-attention, cross-attention and feed-forward block."""

    def __init__(self, cfg, ff_dim, rng):
        self.cfg = cfg
        self.ln1 = LayerNormParams(cfg.model_dim)
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.ln2 = LayerNormParams(cfg.model_dim)
        self.cross_attn = MultiHeadAttention(cfg, rng)
        self.ln3 = LayerNormParams(cfg.model_dim)
        self.ff = FeedForward(cfg.model_dim, ff_dim, rng)

    def named_params(self, prefix):
        out = {}
        out.update(self.ln1.named_params(f"{prefix}.ln1"))
        out.update(self.self_attn.named_params(f"{prefix}.self_attn"))
        out.update(self.ln2.named_params(f"{prefix}.ln2"))
        out.update(self.cross_attn.named_params(f"{prefix}.cross_attn"))
        out.update(self.ln3.named_params(f"{prefix}.ln3"))
        out.update(self.ff.named_params(f"{prefix}.ff"))
        return out

    def __call__(self, x, context, self_mask, train=False, rng=None, layer=0):
        normed = self.ln1(x)
        att_out, self_maps = self.self_attn(normed, normed, self_mask, train, rng,
                                            layer, "self")
        x = ops.add(x, ops.dropout(att_out, self.cfg.dropout, rng, train))
        cross_out, cross_maps = self.cross_attn(self.ln2(x), context, None, train,
                                                rng, layer, "cross")
        x = ops.add(x, ops.dropout(cross_out, self.cfg.dropout, rng, train))
        x = ops.add(x, ops.dropout(self.ff(self.ln3(x)), self.cfg.dropout, rng, train))
        return x, self_maps + cross_maps


def encoder_forward(layers, x, mask=None, train=False, rng=None):
    """Shape-preserving stack of encoder layers; zero layers is the identity."""
    maps = []
    for i, layer in enumerate(layers):
        x, layer_maps = layer(x, mask, train, rng, i)
        maps.extend(layer_maps)
    return x, maps


def decoder_forward(layers, tok_embeddings, context, self_mask, train=False, rng=None):
    """Stack of decoder layers over target embeddings, cross-attending context."""
    x = tok_embeddings
    maps = []
    for i, layer in enumerate(layers):
        x, layer_maps = layer(x, context, self_mask, train, rng, i)
        maps.extend(layer_maps)
    return x, maps


class Subsampler:
    """Strided linear projection of stacked frame groups into the model dim."""

    def __init__(self, feat_dim, factor, model_dim, rng):
        if factor < 1:
            raise ValueError(f"subsample factor must be >= 1, got {factor}")
        self.feat_dim = feat_dim
        self.factor = factor
        self.weight = randn((factor * feat_dim, model_dim), rng,
                            1.0 / math.sqrt(factor * feat_dim), requires_grad=True)
        self.bias = zeros((model_dim,), requires_grad=True)

    def named_params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def __call__(self, frames):
        """frames [T x feat] -> [ceil(T/factor) x model_dim]; requires T >= factor."""
        t, feat = frames.shape
        if feat != self.feat_dim:
            raise ShapeError(f"expected feature dim {self.feat_dim}, got {feat}")
        if t < self.factor:
            raise ShapeError(f"need at least factor={self.factor} frames, got {t}")
        out_len = (t + self.factor - 1) // self.factor
        width = self.factor * feat
        stacked = array("d", bytes(8 * out_len * width))
        flat = frames.data
        for r in range(out_len):
            start = r * self.factor
            stop = min(start + self.factor, t)
            chunk = flat[start * feat:stop * feat]
            stacked[r * width:r * width + len(chunk)] = chunk
        return ops.add(ops.matmul(Tensor((out_len, width), stacked), self.weight),
                       self.bias)
