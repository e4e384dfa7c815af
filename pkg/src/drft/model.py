"""The full grounding network, assembled from the stage modules by config flags."""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .contrastive import ProjectionHead
from .encoders import ModalityEncoder, TextEncoder
from .fusion import CoAttention, CoAttentionOutputs, DynamicFusion, feature_name
from .grounding import RegressionHead
from .lgi import LGI
from .nn import Module

PARTNER_ORDER = ("depth", "flow", "rgb")


@dataclass
class ModelOutputs:
    raw_interval: ag.Tensor  # (B, 2) sigmoid endpoints, unsorted
    attention: ag.Tensor  # (B, T) REG temporal attention
    modal: dict  # modality -> (B, T, c) text-conditioned features
    query_attention: dict  # modality -> (B, N, S)
    fused: ag.Tensor
    fusion_weights: np.ndarray = None  # (B, K) or None for a single stream
    fusion_names: list = None


class DRFT(Module):
    def __init__(self, cfg, vocab_size, d_in, dtype=np.float32, seed=None):
        seed = cfg["seed"] if seed is None else seed
        rng = np.random.default_rng([seed, 0])
        c, S = cfg["model.c"], cfg["model.steps"]
        self.streams = tuple(m for m in ("rgb", "flow", "depth") if m in cfg["model.streams"])
        self.dqa_lambda = cfg["model.dqa_lambda"]
        self.use_transformer = cfg["model.transformer"]
        self.c = c
        self.text = TextEncoder(rng, vocab_size, c, dtype=dtype)
        self.encoders = {m: ModalityEncoder(rng, m, d_in[m], c, dtype) for m in self.streams}
        self.lgi = {m: LGI(rng, c, S, m, dtype) for m in self.streams}
        self.common = None
        self.partners = ()
        if len(self.streams) > 1:
            self.common = cfg.common_stream
            self.partners = tuple(
                m for m in PARTNER_ORDER if m in self.streams and m != self.common
            )
            if self.use_transformer:
                self.coattn = CoAttention(
                    rng, c, cfg["model.heads"], self.partners, self.common,
                    layers=cfg["model.coattn_layers"],
                    share_common=cfg["model.share_common_block"], dtype=dtype,
                )
            self.fusion = DynamicFusion(
                rng, c, self.fusion_names(), learnable=cfg["model.learnable_weights"], dtype=dtype
            )
        self.reg = RegressionHead(rng, c, dtype)
        if cfg["loss.contrastive"]:
            self.heads = {m: ProjectionHead(rng, c, c, c, dtype) for m in self.streams}
        self.assign_names()

    @property
    def dtype(self):
        return self.reg.att.fc1.weight.dtype

    def fusion_names(self):
        names = []
        for m in self.partners:
            names += [feature_name(m, self.common), feature_name(self.common, m)]
        return names

    def encode_streams(self, batch):
        """Text + visual encoders + LGI for every stream."""
        query = self.text(batch["token_ids"], batch["token_mask"])
        modal, attn = {}, {}
        for m in self.streams:
            seg = self.encoders[m](ag.Tensor(batch["features"][m].astype(self.dtype, copy=False)))
            feat, qa, _ = self.lgi[m](seg, query)
            modal[m] = feat.M
            attn[m] = qa.A
        return modal, attn

    def conditioned(self, modal):
        if self.use_transformer:
            return self.coattn(modal)
        out = {}
        for m in self.partners:
            out[feature_name(m, self.common)] = modal[self.common]
            out[feature_name(self.common, m)] = modal[m]
        return CoAttentionOutputs(out)

    def forward(self, batch):
        modal, attn = self.encode_streams(batch)
        weights = names = None
        if len(self.streams) == 1:
            fused = modal[self.streams[0]]
        else:
            fused, fw = self.fusion(self.conditioned(modal))
            weights, names = fw.values, fw.names
        raw, o = self.reg(fused)
        return ModelOutputs(raw, o, modal, attn, fused, weights, names)
