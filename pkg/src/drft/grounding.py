"""Regression head and the supervised grounding losses."""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import NumericError, Tensor
from .contrastive import segment_mask
from .nn import MLP, Module


@dataclass(frozen=True)
class TimeInterval:
    t_s: float
    t_e: float

    def __post_init__(self):
        if not (0.0 <= self.t_s <= self.t_e <= 1.0):
            raise ValueError(f"invalid normalized interval ({self.t_s}, {self.t_e})")

    def as_tuple(self):
        return (self.t_s, self.t_e)


def repair_intervals(raw):
    """Sort each (start, end) row so start <= end; values stay in [0, 1]."""
    raw = np.asarray(raw)
    return np.sort(np.clip(raw, 0.0, 1.0), axis=-1)


class RegressionHead(Module):
    """Temporal attention over segments, weighted pooling, MLP to two sigmoids."""

    def __init__(self, rng, c, dtype=np.float64):
        self.att = MLP(rng, c, c, 1, dtype)
        self.reg = MLP(rng, c, c, 2, dtype)

    def forward(self, fused):
        """fused (..., T, c) -> raw (..., 2) sigmoid endpoints, attention (..., T)."""
        if fused.ndim == 2:
            raw, o = self.forward(fused.reshape(1, *fused.shape))
            return raw[0], o[0]
        *lead, T, c = fused.shape
        logits = self.att(fused).reshape(*lead, T)
        o = ag.softmax(logits, axis=-1)
        pooled = ag.matmul(o.reshape(*lead, 1, T), fused).reshape(*lead, c)
        raw = ag.sigmoid(self.reg(pooled))
        return raw, o


def reg_forward(fused, head):
    """Unbatched: returns (TimeInterval, attention vector as Tensor)."""
    raw, o = head(ag.as_tensor(fused))
    s, e = repair_intervals(raw.data)
    return TimeInterval(float(s), float(e)), o


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise; composed from ReLU so it is C^1.

    With m = min(|x|, 1): value = 0.5 m^2 + max(|x| - 1, 0).
    """
    scalar = not isinstance(x, Tensor)
    x = ag.as_tensor(np.asarray(x, dtype=np.float64) if scalar else x)
    absx = ag.relu(x) + ag.relu(-x)
    excess = ag.relu(absx - 1.0)
    m = absx - excess
    out = 0.5 * (m * m) + excess
    return out.item() if scalar else out


def loss_reg(pred, gt):
    """Sum of smooth-L1 over both endpoints; (..., 2) inputs give (...) losses."""
    if isinstance(pred, TimeInterval):
        pred = Tensor(np.array(pred.as_tuple()))
    if isinstance(gt, TimeInterval):
        gt = gt.as_tuple()
    pred = ag.as_tensor(pred)
    diff = pred - np.asarray(gt, dtype=pred.dtype)
    return smooth_l1(diff).sum(axis=-1)


def loss_tag(o, mask, clamp=1e-12):
    """-sum(mask * log o) / sum(mask) along the segment axis."""
    o = ag.as_tensor(o)
    mask = np.asarray(mask, dtype=o.dtype)
    counts = mask.sum(axis=-1)
    if np.any(counts <= 0):
        raise ValueError("temporal attention mask has no positive segment")
    logs = ag.log(o, floor=clamp)
    return -(logs * mask).sum(axis=-1) / counts


def loss_dqa(A, lam=0.3):
    """||A^T A - lam I||_F^2 for (..., N, S) query attention."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    A = ag.as_tensor(getattr(A, "A", A))
    S = A.shape[-1]
    gram = ag.matmul(A.T, A)
    diff = gram - lam * np.eye(S, dtype=A.dtype)
    return (diff * diff).sum(axis=(-2, -1))


LOSS_TERMS = ("reg", "tag", "dqa", "cl")


def total_loss(reg, tag, dqa, cl, enabled=None):
    """Unweighted sum of the enabled terms. ``enabled`` maps term -> bool."""
    enabled = enabled or {}
    terms = {"reg": reg, "tag": tag, "dqa": dqa, "cl": cl}
    total = None
    for name in LOSS_TERMS:
        if not enabled.get(name, True):
            continue
        value = terms[name]
        if value is None:
            continue
        v = value.data if isinstance(value, Tensor) else value
        if not np.all(np.isfinite(v)):
            raise NumericError(f"loss term L_{name} is not finite")
        total = value if total is None else total + value
    if total is None:
        return 0.0
    return total


def gt_mask(intervals, T, dtype=np.float64):
    return segment_mask(intervals, T, dtype)
