"""Training loop, prediction, evaluation and checkpoint I/O."""

import csv
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from .autograd import NumericError
from .contrastive import (
    ContrastiveBatch,
    SamplingError,
    contrastive_loss,
    pool_gt_batch,
    sample_contrastive_indices,
)
from .grounding import gt_mask, loss_dqa, loss_reg, loss_tag, repair_intervals, total_loss
from .metrics import evaluate, mean_from_ious, tiou_batch, write_eval_csv
from .model import DRFT
from .optim import Adam

log = logging.getLogger(__name__)

TRAIN_COLUMNS = ["epoch", "L_reg", "L_tag", "L_dqa", "L_cl", "train_mIoU"]
EVAL_CHUNK = 64


class IncompatibleCheckpointError(ValueError):
    pass


def _dtype(cfg):
    return np.float64 if cfg["train.dtype"] == "float64" else np.float32


def build_model(cfg, dataset):
    d_in = {m: dataset.features[m].shape[-1] for m in dataset.features}
    return DRFT(cfg, len(dataset.vocabulary), d_in, dtype=_dtype(cfg))


def batch_losses(model, batch, cfg, contrast=None):
    """Forward one batch and return (term -> scalar Tensor, outputs).

    ``contrast`` maps modality -> (pos (B, P, c), neg (B, Q, c), valid (B,))
    of constant pooled features; it is None when the contrastive term is off.
    """
    out = model(batch)
    gts = batch["intervals"]
    T = out.attention.shape[-1]
    reg = loss_reg(out.raw_interval, gts).mean()
    tag = loss_tag(out.attention, gt_mask(gts, T, model.dtype)).mean()
    dqa = None
    for m in model.streams:
        term = loss_dqa(out.query_attention[m], model.dqa_lambda)
        dqa = term if dqa is None else dqa + term
    dqa = dqa.mean()
    cl = None
    if contrast is not None and cfg["loss.contrastive"]:
        for m in model.streams:
            pos, neg, valid = contrast[m]
            if not valid.any():
                continue
            anchors = pool_gt_batch(out.modal[m], gts)
            rows = np.flatnonzero(valid)
            if rows.size < len(valid):
                anchors = anchors[rows]
            cb = ContrastiveBatch(anchors, pos[rows], neg[rows], cfg["contrastive.tau"])
            term = contrastive_loss(cb, model.heads[m]).sum() / len(valid)
            cl = term if cl is None else cl + term
    return {"reg": reg, "tag": tag, "dqa": dqa, "cl": cl}, out


def predict(model, dataset, idx=None):
    """Sorted interval predictions (n, 2) and fusion weights (n, K) or None."""
    idx = np.arange(len(dataset)) if idx is None else np.asarray(idx)
    preds, weights = [], []
    with ag.no_grad():
        for lo in range(0, len(idx), EVAL_CHUNK):
            out = model(dataset.batch(idx[lo : lo + EVAL_CHUNK], model.dtype))
            preds.append(repair_intervals(out.raw_interval.data))
            if out.fusion_weights is not None:
                weights.append(out.fusion_weights)
    preds = np.concatenate(preds).astype(np.float64)
    return preds, (np.concatenate(weights) if weights else None)


@dataclass
class EpochStats:
    epoch: int
    losses: dict
    train_miou: float

    def row(self):
        return [self.epoch] + [f"{self.losses[k]:.6f}" for k in ("reg", "tag", "dqa", "cl")] + [
            f"{self.train_miou:.2f}"
        ]

    @property
    def total(self):
        return sum(self.losses.values())


class Trainer:
    def __init__(self, cfg, train_set, model=None):
        self.cfg = cfg
        self.data = train_set
        self.model = model if model is not None else build_model(cfg, train_set)
        self.named = self.model.named_parameters()
        self.opt = Adam(self.named.values(), lr=cfg["optim.lr"])
        self.rng = np.random.default_rng([cfg["seed"], 1])
        self.epoch = 0
        self.history = []

    # -- contrastive sampling ------------------------------------------------

    def _contrast_sets(self, anchors):
        cfg = self.cfg
        labels = self.data.labels
        n_pos, n_neg = cfg["contrastive.n_pos"], cfg["contrastive.n_neg"]
        pos_idx = np.zeros((len(anchors), n_pos), dtype=np.int64)
        neg_idx = np.zeros((len(anchors), n_neg), dtype=np.int64)
        valid = np.ones(len(anchors), dtype=bool)
        for row, a in enumerate(anchors):
            try:
                p, q = sample_contrastive_indices(labels, a, self.rng, n_pos, n_neg)
            except SamplingError:
                valid[row] = False
                continue
            pos_idx[row], neg_idx[row] = p, q
        if not valid.any():
            return None
        union = np.unique(np.concatenate([pos_idx[valid].ravel(), neg_idx[valid].ravel()]))
        where = {v: i for i, v in enumerate(union)}
        batch = self.data.batch(union, self.model.dtype)
        with ag.no_grad():
            modal, _ = self.model.encode_streams(batch)
        out = {}
        for m in self.model.streams:
            pooled = pool_gt_batch(modal[m], batch["intervals"]).data
            remap = np.vectorize(where.get)
            pos = np.where(valid[:, None], pos_idx, union[0])
            neg = np.where(valid[:, None], neg_idx, union[0])
            out[m] = (pooled[remap(pos)], pooled[remap(neg)], valid)
        return out

    # -- training -------------------------------------------------------------

    def train_epoch(self):
        cfg = self.cfg
        n = len(self.data)
        order = self.rng.permutation(n)
        bs = cfg["train.batch_size"]
        sums = {k: 0.0 for k in ("reg", "tag", "dqa", "cl")}
        enabled = {"cl": cfg["loss.contrastive"]}
        for lo in range(0, n, bs):
            anchors = order[lo : lo + bs]
            batch = self.data.batch(anchors, self.model.dtype)
            self.opt.zero_grad()
            try:
                contrast = self._contrast_sets(anchors) if cfg["loss.contrastive"] else None
                terms, _ = batch_losses(self.model, batch, cfg, contrast)
            except NumericError as exc:
                raise self._diverged(f"step {lo // bs + 1}", exc) from exc
            loss = total_loss(terms["reg"], terms["tag"], terms["dqa"], terms["cl"], enabled)
            if not isinstance(loss, ag.Tensor):
                continue
            loss.backward()
            for name, p in self.named.items():
                if not np.isfinite(p.grad).all():
                    raise NumericError(f"non-finite gradient for {name}")
            self.opt.step()
            for k, v in terms.items():
                if v is not None:
                    sums[k] += float(v.item()) * len(anchors)
        self.epoch += 1
        losses = {k: v / n for k, v in sums.items()}
        try:
            preds, _ = predict(self.model, self.data)
        except NumericError as exc:
            raise self._diverged("evaluation", exc) from exc
        miou = mean_from_ious(tiou_batch(preds, self.data.intervals))
        stats = EpochStats(self.epoch, losses, miou)
        self.history.append(stats)
        return stats

    def _diverged(self, where, exc):
        name, p = max(self.named.items(), key=lambda kv: np.abs(kv[1].data).max())
        return NumericError(
            f"epoch {self.epoch + 1}, {where}: forward pass diverged ({exc}); "
            f"largest parameter {name} has magnitude {np.abs(p.data).max():.3g}"
        )

    def fit(self, epochs=None, log_path=None, checkpoint_path=None, callback=None):
        epochs = self.cfg["train.epochs"] if epochs is None else epochs
        writer = None
        fh = None
        if log_path:
            new = not os.path.exists(log_path) or self.epoch == 0
            fh = open(log_path, "w" if new else "a", newline="", encoding="utf-8")
            writer = csv.writer(fh, lineterminator="\n")
            if new:
                writer.writerow(TRAIN_COLUMNS)
        every = self.cfg["train.checkpoint_every"]
        try:
            target = self.epoch + epochs
            while self.epoch < target:
                stats = self.train_epoch()
                log.info("epoch %d total %.4f mIoU %.2f", stats.epoch, stats.total, stats.train_miou)
                if writer:
                    writer.writerow(stats.row())
                    fh.flush()
                if checkpoint_path and every and stats.epoch % every == 0:
                    self.save(checkpoint_path)
                if callback is not None:
                    callback(stats)
        finally:
            if fh:
                fh.close()
        if checkpoint_path:
            self.save(checkpoint_path)
        return self.history

    # -- persistence ------------------------------------------------------------

    def meta(self):
        cfg = self.cfg
        return {
            "epoch": self.epoch,
            "adam_step": self.opt.step_count,
            "rng_state": self.rng.bit_generator.state,
            "model": model_signature(cfg, self.model),
        }

    def save(self, path):
        arrays = dict(self.model.state_dict())
        arrays.update(self.opt.state_arrays(list(self.named)))
        return ckpt.save(path, arrays, self.meta())

    def load(self, path):
        arrays, meta = ckpt.load(path)
        load_model_state(self.model, self.cfg, arrays, meta)
        self.opt.load_state_arrays(list(self.named), arrays, meta["adam_step"])
        self.epoch = int(meta["epoch"])
        self.rng.bit_generator.state = meta["rng_state"]
        return meta


def model_signature(cfg, model):
    return {
        "c": cfg["model.c"],
        "heads": cfg["model.heads"],
        "steps": cfg["model.steps"],
        "coattn_layers": cfg["model.coattn_layers"],
        "streams": list(model.streams),
        "common": model.common,
        "transformer": cfg["model.transformer"],
        "share_common_block": cfg["model.share_common_block"],
        "learnable_weights": cfg["model.learnable_weights"],
        "contrastive": cfg["loss.contrastive"],
        "vocab_size": model.text.vocab_size,
    }


def load_model_state(model, cfg, arrays, meta):
    expected = model_signature(cfg, model)
    stored = meta.get("model", {})
    diffs = {k: (stored.get(k), v) for k, v in expected.items() if stored.get(k) != v}
    if diffs:
        detail = ", ".join(f"{k}: checkpoint={a} config={b}" for k, (a, b) in diffs.items())
        raise IncompatibleCheckpointError(f"checkpoint does not match config ({detail})")
    state = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise IncompatibleCheckpointError(str(exc)) from exc


def evaluate_model(model, dataset):
    """EvalResult plus mean fusion weights per category (and 'ALL')."""
    preds, weights = predict(model, dataset)
    labels = dataset.labels
    result = evaluate(preds, dataset.intervals, labels)
    mean_w = None
    if weights is not None:
        mean_w = {"ALL": weights.mean(axis=0)}
        for lab in np.unique(labels):
            mean_w[int(lab)] = weights[labels == lab].mean(axis=0)
    return result, preds, weights, mean_w


def write_eval(path, split, model, dataset):
    result, preds, weights, mean_w = evaluate_model(model, dataset)
    names = model.fusion_names() if weights is not None else []
    write_eval_csv(path, split, result, mean_w, names, dataset.category_names)
    return result, mean_w


def save_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
