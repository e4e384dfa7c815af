"""Cross-video contrastive learning inside each visual stream.

Ground-truth segments are average-pooled, projected by a per-stream head,
L2-normalized, and scored against sampled same-category (positive) and
different-category (negative) videos with a temperature-scaled softmax.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .nn import MLP, Module


class SamplingError(ValueError):
    """No valid positive or negative candidate for an anchor."""


def segment_range(t_s, t_e, T):
    """Inclusive segment index range [lo, hi] covered by a normalized interval.

    Maps to [floor(t_s*T), ceil(t_e*T) - 1] clamped to [0, T-1]; an interval
    that covers no segment collapses to the single segment floor(t_s*T).
    Products within 1e-9 of an integer are snapped to it so that intervals
    recovered from seconds do not gain or lose a segment to rounding.
    """
    if t_s > t_e:
        raise ValueError(f"interval start {t_s} exceeds end {t_e}")
    a, b = t_s * T, t_e * T
    ra, rb = round(a), round(b)
    a = ra if abs(a - ra) < 1e-9 else a
    b = rb if abs(b - rb) < 1e-9 else b
    lo = min(max(math.floor(a), 0), T - 1)
    hi = min(max(math.ceil(b) - 1, 0), T - 1)
    if hi < lo:
        hi = lo
    return lo, hi


def segment_mask(intervals, T, dtype=np.float64):
    """(B, T) 0/1 mask of the segments inside each (t_s, t_e) row."""
    intervals = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((len(intervals), T), dtype=dtype)
    for i, (s, e) in enumerate(intervals):
        lo, hi = segment_range(s, e, T)
        mask[i, lo : hi + 1] = 1.0
    return mask


def pool_gt_segment(m, gt):
    """Mean of the rows of ``m`` (T, c) inside ``gt`` = (t_s, t_e)."""
    m = ag.as_tensor(getattr(m, "M", m))
    lo, hi = segment_range(gt[0], gt[1], m.shape[0])
    return m[lo : hi + 1].mean(axis=0)


def pool_gt_batch(M, intervals):
    """Batched pooling: M (B, T, c), intervals (B, 2) -> (B, c)."""
    B, T, c = M.shape
    mask = segment_mask(intervals, T, M.dtype)
    weights = mask / mask.sum(axis=1, keepdims=True)
    return ag.matmul(ag.Tensor(weights.reshape(B, 1, T)), M).reshape(B, c)


class ProjectionHead(MLP):
    """Two-layer MLP from the feature space to the embedding space."""

    def embed(self, x):
        return ag.l2_normalize(self.forward(x), axis=-1)


@dataclass
class ContrastiveBatch:
    anchor: object  # (c,) or (B, c) pooled feature
    positives: object  # (P, c) or (B, P, c)
    negatives: object  # (Q, c) or (B, Q, c)
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if np.shape(_data(self.positives))[-2] < 1:
            raise ValueError("contrastive batch needs at least one positive")
        if np.shape(_data(self.negatives))[-2] < 1:
            raise ValueError("contrastive batch needs at least one negative")


def _data(x):
    return x.data if isinstance(x, ag.Tensor) else np.asarray(x)


def loss_from_similarities(pos_sims, neg_sims, tau):
    """-log of the positive share of softmax mass over all similarities / tau.

    pos_sims: (..., P), neg_sims: (..., Q). Returns per-row losses (...).
    """
    pos_sims, neg_sims = ag.as_tensor(pos_sims), ag.as_tensor(neg_sims)
    P = pos_sims.shape[-1]
    logits = ag.concat([pos_sims, neg_sims], axis=-1) / tau
    probs = ag.softmax(logits, axis=-1)
    pos_mass = probs[..., :P].sum(axis=-1)
    return -ag.log(pos_mass, floor=1e-300 if pos_mass.dtype == np.float64 else 1e-38)


def contrastive_loss(batch, head):
    """Contrastive loss of one anchor (or a (B,) stack of anchors)."""
    anchor = ag.as_tensor(batch.anchor)
    pos = ag.as_tensor(batch.positives)
    neg = ag.as_tensor(batch.negatives)
    if anchor.ndim == 1:
        e_a = head.embed(anchor.reshape(1, -1))
        e_p = head.embed(pos)
        e_n = head.embed(neg)
        pos_s = ag.matmul(e_a, e_p.T).reshape(-1)
        neg_s = ag.matmul(e_a, e_n.T).reshape(-1)
    else:
        B, c = anchor.shape
        e_a = head.embed(anchor).reshape(B, 1, c)
        e_p = head.embed(pos)
        e_n = head.embed(neg)
        pos_s = ag.matmul(e_a, e_p.T).reshape(B, -1)
        neg_s = ag.matmul(e_a, e_n.T).reshape(B, -1)
    return loss_from_similarities(pos_s, neg_s, batch.tau)


def sample_contrastive_indices(labels, anchor, rng, n_pos=3, n_neg=4, pool=None):
    """Pick positive and negative video indices for ``anchor``.

    Candidates come from ``pool`` (default: every index) minus the anchor.
    Sampling is uniform, with replacement only when there are fewer distinct
    candidates than requested.
    """
    labels = np.asarray(labels)
    idx = np.arange(len(labels)) if pool is None else np.asarray(pool)
    idx = idx[idx != anchor]
    pos_c = idx[labels[idx] == labels[anchor]]
    neg_c = idx[labels[idx] != labels[anchor]]
    if pos_c.size == 0:
        raise SamplingError(f"no positive candidate for anchor {anchor} (label {labels[anchor]})")
    if neg_c.size == 0:
        raise SamplingError(f"no negative candidate for anchor {anchor}")
    pos = rng.choice(pos_c, size=n_pos, replace=pos_c.size < n_pos)
    neg = rng.choice(neg_c, size=n_neg, replace=neg_c.size < n_neg)
    return pos, neg


def sample_contrastive_batch(pooled, labels, anchor, rng, n_pos=3, n_neg=4, tau=0.1):
    """Build a ContrastiveBatch for each stream from pooled features.

    ``pooled`` maps modality -> (num_videos, c) array. The same video indices
    are used for every stream. Returns (batches by modality, pos idx, neg idx).
    """
    pos, neg = sample_contrastive_indices(labels, anchor, rng, n_pos, n_neg)
    batches = {
        m: ContrastiveBatch(feats[anchor], feats[pos], feats[neg], tau) for m, feats in pooled.items()
    }
    return batches, pos, neg


def total_contrastive(batches, heads):
    """Sum of per-stream contrastive losses; streams whose batch is None are skipped."""
    total = None
    for m, batch in batches.items():
        if batch is None:
            continue
        term = contrastive_loss(batch, heads[m])
        total = term if total is None else total + term
    if total is None:
        return ag.Tensor(0.0)
    return total
