"""Text and per-modality visual encoders.

Visual inputs are precomputed segment features; each modality gets a
per-segment two-layer MLP. The query goes through a bidirectional LSTM
whose sentence feature is the concatenation of the last forward and last
backward hidden states.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .nn import MLP, Module, glorot

MODALITIES = ("rgb", "flow", "depth")


class VocabularyError(ValueError):
    pass


@dataclass
class QueryTokens:
    token_ids: np.ndarray
    raw_text: str = ""

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64).reshape(-1)
        if self.token_ids.size < 1:
            raise ValueError("a query needs at least one token")

    @property
    def N(self):
        return int(self.token_ids.size)


@dataclass
class RawSegmentFeatures:
    modality: str
    values: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"segment features must be T x d_in with T >= 1, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("segment features contain non-finite values")

    @property
    def T(self):
        return int(self.values.shape[0])


@dataclass
class EncodedQuery:
    word_features: Tensor  # (N, c) or (B, N, c)
    sentence_feature: Tensor  # (c,) or (B, c)
    mask: np.ndarray = None  # (B, N) validity mask for batched queries


class LSTMDirection(Module):
    def __init__(self, rng, d_in, hidden, dtype):
        self.w_x = Parameter(glorot(rng, d_in, 4 * hidden, dtype))
        self.w_h = Parameter(glorot(rng, hidden, 4 * hidden, dtype))
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden : 2 * hidden] = 1.0  # forget gate starts open
        self.bias = Parameter(bias)
        self.hidden = hidden

    def run(self, x, mask, reverse=False):
        """x: (B, N, d_in) tensor, mask: (B, N) array. Returns per-step hidden
        states in original order and the final state."""
        B, N, _ = x.shape
        h_dim = self.hidden
        proj = ag.matmul(x, self.w_x) + self.bias
        h = Tensor(np.zeros((B, h_dim), dtype=x.dtype))
        c = Tensor(np.zeros((B, h_dim), dtype=x.dtype))
        states = [None] * N
        steps = range(N - 1, -1, -1) if reverse else range(N)
        for t in steps:
            z = proj[:, t, :] + ag.matmul(h, self.w_h)
            i = ag.sigmoid(z[:, :h_dim])
            f = ag.sigmoid(z[:, h_dim : 2 * h_dim])
            g = ag.tanh(z[:, 2 * h_dim : 3 * h_dim])
            o = ag.sigmoid(z[:, 3 * h_dim :])
            c_new = f * c + i * g
            h_new = o * ag.tanh(c_new)
            m = mask[:, t : t + 1]
            if m.all():
                c, h = c_new, h_new
            else:
                # padded steps carry the previous state through unchanged
                m = m.astype(x.dtype)
                c = c_new * m + c * (1.0 - m)
                h = h_new * m + h * (1.0 - m)
            states[t] = h
        return states, h


class TextEncoder(Module):
    def __init__(self, rng, vocab_size, c, embed_dim=None, dtype=np.float64):
        if c % 2:
            raise ValueError(f"text feature size c={c} must be even (two directions of c/2)")
        embed_dim = embed_dim or c
        self.vocab_size = vocab_size
        self.embedding = Parameter(rng.normal(0.0, 1.0 / np.sqrt(embed_dim), (vocab_size, embed_dim)).astype(dtype))
        self.fwd = LSTMDirection(rng, embed_dim, c // 2, dtype)
        self.bwd = LSTMDirection(rng, embed_dim, c // 2, dtype)

    def forward(self, token_ids, mask=None):
        """token_ids: (B, N) ints; mask: (B, N) bool. Returns EncodedQuery with
        (B, N, c) word features and (B, c) sentence features."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if token_ids.ndim != 2:
            raise ValueError(f"token_ids must be (B, N), got {token_ids.shape}")
        if mask is None:
            mask = np.ones(token_ids.shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        valid = token_ids[mask]
        if valid.size and (valid.min() < 0 or valid.max() >= self.vocab_size):
            bad = valid[(valid < 0) | (valid >= self.vocab_size)][0]
            raise VocabularyError(f"token id {bad} outside vocabulary of size {self.vocab_size}")
        if not mask.any(axis=1).all():
            raise ValueError("every query needs at least one valid token")
        safe_ids = np.where(mask, token_ids, 0)
        x = self.embedding[safe_ids]
        fwd_states, fwd_last = self.fwd.run(x, mask)
        bwd_states, bwd_last = self.bwd.run(x, mask, reverse=True)
        B, N = token_ids.shape
        fwd_seq = ag.stack(fwd_states, axis=1)
        bwd_seq = ag.stack(bwd_states, axis=1)
        words = ag.concat([fwd_seq, bwd_seq], axis=-1)
        sentence = ag.concat([fwd_last, bwd_last], axis=-1)
        return EncodedQuery(words, sentence, mask)


def encode_text(q, encoder):
    """Encode a single query; returns (N, c) word and (c,) sentence features."""
    if not isinstance(q, QueryTokens):
        q = QueryTokens(q)
    enc = encoder(q.token_ids[None, :])
    return EncodedQuery(enc.word_features[0], enc.sentence_feature[0], enc.mask[0])


class ModalityEncoder(Module):
    """Per-segment two-layer MLP: (..., T, d_in) -> (..., T, c)."""

    def __init__(self, rng, modality, d_in, c, dtype=np.float64):
        self.modality = modality
        self.d_in = d_in
        self.mlp = MLP(rng, d_in, c, c, dtype)

    def forward(self, x):
        x = ag.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ag.DimensionError(
                f"{self.modality} encoder expects d_in={self.d_in}, got features of shape {x.shape}"
            )
        return ag.relu(self.mlp(x))


def encode_modality(x, encoder):
    """Encode one video's RawSegmentFeatures into a T x c tensor."""
    if x.modality != encoder.modality:
        raise ValueError(f"encoder for {encoder.modality} given {x.modality} features")
    return encoder(Tensor(x.values.astype(encoder.mlp.fc1.weight.dtype)))
