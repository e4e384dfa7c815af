"""Finite-difference verification of every op, every stage module and the full loss.

All checks run in float64 at tiny dimensions. Primitive ops must agree with
central differences to 1e-6, modules and the full objective to 1e-3.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .config import RunConfig
from .contrastive import ContrastiveBatch, ProjectionHead, contrastive_loss, pool_gt_batch
from .encoders import EncodedQuery, ModalityEncoder, TextEncoder
from .fusion import CoAttention, DynamicFusion
from .gradcheck import grad_check
from .grounding import RegressionHead, gt_mask, loss_dqa, loss_reg, loss_tag, total_loss
from .lgi import LGI
from .model import DRFT
from .train import batch_losses

OP_TOL = 1e-6
MODULE_TOL = 1e-3
F64 = np.float64

# tiny dimensions shared by the module and end-to-end checks
TINY = {"T": 4, "c": 8, "N": 5, "S": 2, "H": 2, "B": 2, "d_in": 6, "vocab": 12}


@dataclass
class CheckRow:
    module: str
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error)) and self.error < self.tol


def _param(rng, *shape, low=None):
    x = rng.normal(size=shape)
    if low is not None:
        # push values away from kinks / the log domain boundary
        x = np.sign(x) * (np.abs(x) + low)
    return ag.Parameter(x.astype(F64))


def _project(out, rng_seed=99):
    """Fixed random linear functional so every output coordinate matters."""
    r = np.random.default_rng(rng_seed).normal(size=out.shape)
    return (out * r).sum()


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def op_cases(rng):
    a = _param(rng, 3, 4)
    b = _param(rng, 3, 4)
    row = _param(rng, 1, 4)
    m = _param(rng, 4, 5)
    batch_m = _param(rng, 2, 3, 4)
    batch_n = _param(rng, 2, 4, 3)
    pos = ag.Parameter(np.abs(rng.normal(size=(3, 4))) + 0.5)
    away = _param(rng, 3, 4, low=0.2)
    gamma = _param(rng, 4)
    beta = _param(rng, 4)
    return {
        "add": (lambda: _project(a + row), [a, row]),
        "sub": (lambda: _project(a - b), [a, b]),
        "neg": (lambda: _project(-a), [a]),
        "mul": (lambda: _project(a * b), [a, b]),
        "matmul": (lambda: _project(a @ m), [a, m]),
        "matmul_batched": (lambda: _project(ag.matmul(batch_m, batch_n)), [batch_m, batch_n]),
        "sum": (lambda: _project(a.sum(axis=1)), [a]),
        "mean": (lambda: _project(a.mean(axis=0)), [a]),
        "exp": (lambda: _project(ag.exp(a)), [a]),
        "log": (lambda: _project(ag.log(pos)), [pos]),
        "relu": (lambda: _project(ag.relu(away)), [away]),
        "tanh": (lambda: _project(ag.tanh(a)), [a]),
        "sigmoid": (lambda: _project(ag.sigmoid(a)), [a]),
        "softmax": (lambda: _project(ag.softmax(a, axis=-1)), [a]),
        "softmax_axis0": (lambda: _project(ag.softmax(batch_m, axis=1)), [batch_m]),
        "layer_norm": (lambda: _project(ag.layer_norm(a, gamma, beta)), [a, gamma, beta]),
        "l2_normalize": (lambda: _project(ag.l2_normalize(a)), [a]),
        "concat": (lambda: _project(ag.concat([a, b], axis=0)), [a, b]),
        "slice": (lambda: _project(a[1:, ::2]), [a]),
        "fancy_index": (lambda: _project(a[np.array([0, 2, 0])]), [a]),
        "reshape_transpose": (lambda: _project(a.reshape(2, 6).T), [a]),
    }


# ---------------------------------------------------------------------------
# stage modules
# ---------------------------------------------------------------------------


def _tokens(rng):
    B, N, V = TINY["B"], TINY["N"], TINY["vocab"]
    ids = rng.integers(1, V, size=(B, N))
    mask = np.ones((B, N), dtype=bool)
    mask[1, N - 2 :] = False  # second query is shorter
    ids[~mask] = 0
    return ids, mask


def _query(rng):
    B, N, c = TINY["B"], TINY["N"], TINY["c"]
    mask = np.ones((B, N), dtype=bool)
    mask[1, N - 1 :] = False
    words = ag.Tensor(rng.normal(size=(B, N, c)))
    sent = ag.Tensor(rng.normal(size=(B, c)))
    return EncodedQuery(words, sent, mask)


def module_cases(rng):
    T, c, S, H, B, d_in = (TINY[k] for k in ("T", "c", "S", "H", "B", "d_in"))
    cases = {}

    text = TextEncoder(rng, TINY["vocab"], c, dtype=F64)
    ids, mask = _tokens(rng)

    def f_text():
        q = text(ids, mask)
        return _project(q.word_features, 1) + _project(q.sentence_feature, 2)

    cases[("encoders", "text_encoder")] = (f_text, text.parameters())

    enc = ModalityEncoder(rng, "flow", d_in, c, dtype=F64)
    x = ag.Tensor(rng.normal(size=(B, T, d_in)))
    cases[("encoders", "modality_encoder")] = (lambda: _project(enc(x)), enc.parameters())

    lgi = LGI(rng, c, S, "rgb", dtype=F64)
    seg = _param(rng, B, T, c)
    query = _query(rng)

    def f_lgi():
        feat, qa, _ = lgi(seg, query)
        return _project(feat.M, 3) + _project(qa.A, 4)

    cases[("lgi", "sequential_attention+local_global")] = (f_lgi, lgi.parameters() + [seg])

    coattn = CoAttention(rng, c, H, ("depth", "flow"), "rgb", dtype=F64)
    fusion = DynamicFusion(rng, c, coattn.output_names(), dtype=F64)
    feats = {m: _param(rng, B, T, c) for m in ("rgb", "flow", "depth")}

    def f_fusion():
        fused, _ = fusion(coattn(feats))
        return _project(fused, 5)

    cases[("fusion", "co_attention+dynamic_fusion")] = (
        f_fusion,
        coattn.parameters() + fusion.parameters() + list(feats.values()),
    )

    head = ProjectionHead(rng, c, c, c, dtype=F64)
    anchor = _param(rng, B, c)
    pos = ag.Tensor(rng.normal(size=(B, 3, c)))
    neg = ag.Tensor(rng.normal(size=(B, 4, c)))

    def f_cl():
        return contrastive_loss(ContrastiveBatch(anchor, pos, neg, 0.1), head).sum()

    cases[("contrastive", "projection+contrastive_loss")] = (f_cl, head.parameters() + [anchor])

    reg = RegressionHead(rng, c, dtype=F64)
    fused = _param(rng, B, T, c)
    gts = np.array([[0.1, 0.6], [0.3, 0.95]])
    gt_m = gt_mask(gts, T)
    logits_a = _param(rng, B, TINY["N"], S)

    def f_ground():
        raw, o = reg(fused)
        A = ag.softmax(logits_a, axis=-2)
        return (loss_reg(raw, gts) + loss_tag(o, gt_m) + loss_dqa(A, 0.3)).sum()

    cases[("grounding", "reg_head+L_reg+L_tag+L_dqa")] = (
        f_ground,
        reg.parameters() + [fused, logits_a],
    )
    return cases


# ---------------------------------------------------------------------------
# full objective
# ---------------------------------------------------------------------------


def tiny_config(**flags):
    values = {
        "model.c": TINY["c"],
        "model.heads": TINY["H"],
        "model.steps": TINY["S"],
        "train.dtype": "float64",
    }
    values.update(flags)
    return RunConfig(values)


def tiny_batch(rng):
    T, B, d_in = TINY["T"], 3, TINY["d_in"]
    ids, mask = _tokens(rng)
    ids = np.vstack([ids, ids[:1, ::-1]])
    mask = np.vstack([mask, mask[:1]])
    return {
        "index": np.arange(B),
        "features": {m: rng.normal(size=(B, T, d_in)) for m in ("rgb", "flow", "depth")},
        "token_ids": ids,
        "token_mask": mask,
        "intervals": np.array([[0.0, 0.5], [0.25, 1.0], [0.4, 0.6]]),
        "labels": np.array([0, 1, 0]),
    }


def full_loss_case(rng, cfg=None):
    cfg = cfg or tiny_config()
    d_in = {m: TINY["d_in"] for m in ("rgb", "flow", "depth")}
    model = DRFT(cfg, TINY["vocab"], d_in, dtype=F64, seed=3)
    batch = tiny_batch(rng)
    B = len(batch["index"])
    # sampled videos are constants, pooled from the model's own features as in training
    others = tiny_batch(rng)
    with ag.no_grad():
        modal, _ = model.encode_streams(others)
    pos_idx, neg_idx = np.array([[0, 2, 0]] * B), np.array([[1, 1, 1, 1]] * B)
    contrast = {}
    for m in model.streams:
        pooled = pool_gt_batch(modal[m], others["intervals"]).data
        contrast[m] = (pooled[pos_idx], pooled[neg_idx], np.ones(B, dtype=bool))

    def f():
        terms, _ = batch_losses(model, batch, cfg, contrast)
        return total_loss(terms["reg"], terms["tag"], terms["dqa"], terms["cl"])

    return f, model.parameters()


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _timed(module, name, fn, params, tol, max_coords, seed):
    t0 = time.perf_counter()
    try:
        err = grad_check(fn, params, epsilon=1e-4, max_coords=max_coords,
                         rng=np.random.default_rng(seed))
    except (ArithmeticError, ValueError) as exc:  # a broken op should show as a failing row
        err = float("inf")
        name = f"{name} ({type(exc).__name__}: {exc})"
    return CheckRow(module, name, err, tol, time.perf_counter() - t0)


def run_all(seed=0, max_coords=12, faults=()):
    """Run every check; ``faults`` lists op names whose backward is scaled x2."""
    ag.clear_faults()
    for op in faults:
        ag.set_fault(op, 2.0)
    rows = []
    try:
        rng = np.random.default_rng([seed, 7])
        for name, (fn, params) in op_cases(rng).items():
            rows.append(_timed("numeric-core", name, fn, params, OP_TOL, None, seed))
        for (module, name), (fn, params) in module_cases(rng).items():
            rows.append(_timed(module, name, fn, params, MODULE_TOL, max_coords, seed))
        fn, params = full_loss_case(rng)
        rows.append(_timed("full", "L_reg+L_tag+L_dqa+L_cl", fn, params, MODULE_TOL, max_coords, seed))
    finally:
        ag.clear_faults()
    return rows


def format_table(rows):
    lines = [f"{'module':<13} {'check':<38} {'max rel err':>12} {'tol':>8}  status"]
    for r in rows:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.module:<13} {r.name:<38} {r.error:>12.3e} {r.tol:>8.0e}  {status}")
    return "\n".join(lines)
