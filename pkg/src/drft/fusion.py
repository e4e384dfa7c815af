"""Co-attentional fusion across visual streams.

A common stream (RGB by default) is paired with each other stream. In each
pair the common stream's block attends to the partner (partner-conditioned
common feature) and the partner's block attends to the common stream
(common-conditioned partner feature). The common block is one parameter set
shared by both pairs unless sharing is switched off. The resulting
conditioned features are mixed with input-dependent convex weights.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import LayerNorm, Linear, MLP, Module


class ConfigurationError(ValueError):
    pass


def feature_name(conditioner, target):
    """Name of the ``target`` stream's feature attended with ``conditioner`` keys."""
    return f"{conditioner}_cond_{target}"


class CrossAttentionBlock(Module):
    """Multi-head attention with queries from one stream and keys/values from
    another, followed by residual + layer norm and a feed-forward sublayer."""

    def __init__(self, rng, c, heads, dtype=np.float64, ff_mult=2):
        if c % heads:
            raise ConfigurationError(f"hidden size {c} is not divisible by {heads} heads")
        self.c = c
        self.heads = heads
        self.q = Linear(rng, c, c, dtype)
        self.k = Linear(rng, c, c, dtype, bias=False)  # a key bias cancels in the softmax
        self.v = Linear(rng, c, c, dtype)
        self.o = Linear(rng, c, c, dtype)
        self.norm1 = LayerNorm(c, dtype)
        self.ff = MLP(rng, c, ff_mult * c, c, dtype)
        self.norm2 = LayerNorm(c, dtype)

    def _split(self, x):
        *lead, T, c = x.shape
        d = c // self.heads
        x = x.reshape(*lead, T, self.heads, d)
        nl = len(lead)
        return x.transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2))

    def attend(self, x, y):
        """Attention output before the residual, plus the (..., H, T, T) weights."""
        *lead, T, c = x.shape
        Ty = y.shape[-2]
        d = c // self.heads
        q, k, v = self._split(self.q(x)), self._split(self.k(y)), self._split(self.v(y))
        scores = ag.matmul(q, k.T) / np.sqrt(d)
        weights = ag.softmax(scores, axis=-1)
        ctx = ag.matmul(weights, v)
        nl = len(lead)
        ctx = ctx.transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2)).reshape(*lead, T, c)
        return self.o(ctx), weights

    def forward(self, x, y):
        attn, _ = self.attend(x, y)
        h = self.norm1(x + attn)
        return self.norm2(h + self.ff(h))


def multi_head_cross_attention(queries_from, keys_values_from, block):
    queries_from = ag.as_tensor(queries_from)
    keys_values_from = ag.as_tensor(keys_values_from)
    if queries_from.shape[-1] != block.c or keys_values_from.shape[-1] != block.c:
        raise ag.DimensionError(
            f"block size {block.c} vs inputs {queries_from.shape}, {keys_values_from.shape}"
        )
    return block(queries_from, keys_values_from)


@dataclass
class CoAttentionOutputs:
    """Conditioned features in fusion order, keyed by ``feature_name``."""

    features: dict = field(default_factory=dict)

    @property
    def names(self):
        return list(self.features)

    def __getitem__(self, name):
        return self.features[name]

    def values(self):
        return list(self.features.values())


class CoAttention(Module):
    """Stacked co-attentional layers over (partner, common) pairs."""

    def __init__(self, rng, c, heads, partners, common="rgb", layers=1, share_common=True,
                 dtype=np.float64):
        if common in partners:
            raise ConfigurationError(f"common stream {common!r} cannot also be a partner")
        self.common = common
        self.partners = tuple(partners)
        self.layers = layers
        self.share_common = share_common
        self.partner_blocks = {
            m: [CrossAttentionBlock(rng, c, heads, dtype) for _ in range(layers)] for m in partners
        }
        if share_common:
            shared = [CrossAttentionBlock(rng, c, heads, dtype) for _ in range(layers)]
            self.common_blocks = {"shared": shared}
        else:
            self.common_blocks = {
                m: [CrossAttentionBlock(rng, c, heads, dtype) for _ in range(layers)] for m in partners
            }

    def common_block(self, partner, layer):
        key = "shared" if self.share_common else partner
        return self.common_blocks[key][layer]

    def output_names(self):
        names = []
        for m in self.partners:
            names += [feature_name(m, self.common), feature_name(self.common, m)]
        return names

    def forward(self, feats, only_pair=None):
        """feats: modality -> (..., T, c) tensors. ``only_pair`` restricts the
        pass to one partner (used to isolate gradient paths)."""
        T = {m: feats[m].shape[-2] for m in (self.common,) + self.partners}
        if len(set(T.values())) != 1:
            raise ag.DimensionError(f"streams disagree on segment count: {T}")
        out = {}
        for m in self.partners:
            if only_pair is not None and m != only_pair:
                continue
            x_common, x_partner = feats[self.common], feats[m]
            for layer in range(self.layers):
                common_next = self.common_block(m, layer)(x_common, x_partner)
                partner_next = self.partner_blocks[m][layer](x_partner, x_common)
                x_common, x_partner = common_next, partner_next
            out[feature_name(m, self.common)] = x_common
            out[feature_name(self.common, m)] = x_partner
        return CoAttentionOutputs(out)

    def passthrough(self, feats):
        """Identity replacement used when transformers are disabled."""
        out = {}
        for m in self.partners:
            out[feature_name(m, self.common)] = feats[self.common]
            out[feature_name(self.common, m)] = feats[m]
        return CoAttentionOutputs(out)


def co_attend(m_d, m_f, m_r, coattn):
    """Unbatched helper over three ModalFeatures with RGB as the common stream."""
    feats = {"depth": m_d.M, "flow": m_f.M, "rgb": m_r.M}
    for k in feats:
        feats[k] = feats[k].reshape(1, *feats[k].shape)
    out = coattn(feats)
    return CoAttentionOutputs({k: v[0] for k, v in out.features.items()})


@dataclass
class FusionWeights:
    """(..., K) non-negative weights summing to one, in fusion order."""

    values: np.ndarray
    names: list


class DynamicFusion(Module):
    """Pool each feature over time, map it to one logit, softmax the logits
    and mix the features. With ``learnable=False`` the weights are uniform."""

    def __init__(self, rng, c, names, learnable=True, dtype=np.float64):
        self.names_ = list(names)
        self.learnable = learnable
        if learnable:
            self.logit_fc = {n: Linear(rng, c, 1, dtype) for n in self.names_}

    def logits(self, outputs):
        cols = [self.logit_fc[n](outputs[n].mean(axis=-2)) for n in self.names_]
        return ag.concat(cols, axis=-1)

    def forward(self, outputs):
        feats = [outputs[n] for n in self.names_]
        K = len(feats)
        lead = feats[0].shape[:-2]
        if self.learnable:
            w = ag.softmax(self.logits(outputs), axis=-1)
        else:
            w = Tensor(np.full(lead + (K,), 1.0 / K, dtype=feats[0].dtype))
        fused = None
        for i, f in enumerate(feats):
            wi = w[..., i : i + 1].reshape(*lead, 1, 1)
            term = f * wi
            fused = term if fused is None else fused + term
        return fused, FusionWeights(w.data, list(self.names_))


def dynamic_fuse(outputs, fusion):
    """Unbatched form over (T, c) features; weights come back as a (K,) vector."""
    batched = {n: ag.as_tensor(v).reshape(1, *v.shape) for n, v in outputs.items()}
    fused, w = fusion(batched)
    return fused[0], FusionWeights(w.values[0], w.names)
