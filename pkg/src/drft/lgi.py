"""Query-to-video interaction for one visual stream.

Sequential query attention splits the sentence into S phrase features; each
phrase modulates the segment features (local interaction), a temporal
self-attention layer spreads context across segments (global interaction),
and the per-phrase results are averaged into the text-conditioned feature.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .encoders import EncodedQuery
from .nn import LayerNorm, Linear, Module, glorot

MASK_FILL = -1e9


@dataclass
class QueryAttention:
    """A: (..., N, S); each column is a distribution over the words."""

    A: Tensor

    @property
    def S(self):
        return self.A.shape[-1]


@dataclass
class ModalFeature:
    M: Tensor  # (..., T, c)
    modality: str


def positional_encoding(T, c, dtype=np.float64):
    pos = np.arange(T)[:, None]
    i = np.arange(c // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / c)
    pe = np.zeros((T, c))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : (c - c // 2)])
    return pe.astype(dtype)


class SequentialQueryAttention(Module):
    def __init__(self, rng, c, S, dtype=np.float64):
        if S < 1:
            raise ValueError(f"number of query attention steps must be >= 1, got {S}")
        self.S = S
        self.word_proj = Linear(rng, c, c, dtype, bias=False)
        self.step_proj = Parameter(glorot(rng, c, c, dtype, shape=(S, c, c)))
        self.prev_proj = Linear(rng, c, c, dtype)
        self.score = Linear(rng, c, 1, dtype, bias=False)

    def forward(self, query):
        """query: batched EncodedQuery. Returns phrases (B, S, c) and A (B, N, S)."""
        words = query.word_features
        B, N, c = words.shape
        keys = self.word_proj(words)
        mask_bias = None
        if query.mask is not None and not query.mask.all():
            mask_bias = np.where(query.mask, 0.0, MASK_FILL).astype(words.dtype)
        prev = None
        phrases, columns = [], []
        for s in range(self.S):
            guide = ag.matmul(query.sentence_feature, self.step_proj[s])
            guide = guide + self.prev_proj(prev) if prev is not None else guide + self.prev_proj.bias
            guide = ag.tanh(guide)
            hidden = ag.tanh(keys + guide.reshape(B, 1, c))
            logits = self.score(hidden).reshape(B, N)
            if mask_bias is not None:
                logits = logits + mask_bias
            a = ag.softmax(logits, axis=-1)
            phrase = ag.matmul(a.reshape(B, 1, N), words).reshape(B, c)
            phrases.append(phrase)
            columns.append(a)
            prev = phrase
        return ag.stack(phrases, axis=1), QueryAttention(ag.stack(columns, axis=-1))


class LocalGlobal(Module):
    def __init__(self, rng, c, dtype=np.float64):
        self.c = c
        self.phrase_proj = Linear(rng, c, c, dtype)
        self.q = Linear(rng, c, c, dtype)
        self.k = Linear(rng, c, c, dtype, bias=False)  # a key bias cancels in the softmax
        self.v = Linear(rng, c, c, dtype)
        self.out = Linear(rng, c, c, dtype)
        self.norm = LayerNorm(c, dtype)

    def per_phrase(self, seg, phrases):
        """seg: (B, T, c), phrases: (B, S, c) -> (B, S, T, c) before averaging."""
        B, T, c = seg.shape
        S = phrases.shape[1]
        gate = self.phrase_proj(phrases).reshape(B, S, 1, c)
        local = seg.reshape(B, 1, T, c) * gate + positional_encoding(T, c, seg.dtype)
        q, k, v = self.q(local), self.k(local), self.v(local)
        scores = ag.matmul(q, k.T) / np.sqrt(c)
        att = ag.softmax(scores, axis=-1)
        ctx = self.out(ag.matmul(att, v))
        return self.norm(local + ctx)

    def forward(self, seg, phrases):
        return self.per_phrase(seg, phrases).mean(axis=1)


class LGI(Module):
    """One stream's query attention + local-global interaction."""

    def __init__(self, rng, c, S, modality, dtype=np.float64):
        self.modality = modality
        self.sqa = SequentialQueryAttention(rng, c, S, dtype)
        self.lg = LocalGlobal(rng, c, dtype)

    def forward(self, seg, query):
        phrases, attn = self.sqa(query)
        return ModalFeature(self.lg(seg, phrases), self.modality), attn, phrases


def sequential_query_attention(eq, sqa):
    """Unbatched form: eq holds (N, c) word and (c,) sentence features."""
    words = eq.word_features
    batched = EncodedQuery(words.reshape(1, *words.shape), eq.sentence_feature.reshape(1, -1))
    phrases, attn = sqa(batched)
    return phrases[0], QueryAttention(attn.A[0])


def local_global_interaction(seg, phrases, lg, modality="rgb"):
    """Unbatched form: seg (T, c), phrases (S, c) -> ModalFeature (T, c)."""
    seg = ag.as_tensor(seg)
    phrases = ag.as_tensor(phrases)
    if seg.shape[-1] != phrases.shape[-1]:
        raise ag.DimensionError(f"feature sizes disagree: {seg.shape} vs {phrases.shape}")
    M = lg(seg.reshape(1, *seg.shape), phrases.reshape(1, *phrases.shape))
    return ModalFeature(M[0], modality)
