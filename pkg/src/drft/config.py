"""Run configuration: a flat ``key=value`` file with dotted keys.

Every key has a default; the defaults describe the full three-stream model.
Lines starting with ``#`` are comments. Unknown keys are rejected.
"""

import os
from dataclasses import dataclass, field

from .data import SyntheticConfig

OUTPUT_ENV = "DRFT_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _list(text):
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


# key -> (default, parser, help)
DEFAULTS = {
    "data.root": ("data/synthetic", str, "dataset directory"),
    "data.train_split": ("train", str, "annotation file stem used for training"),
    "data.eval_split": ("test", str, "default split for eval"),
    "data.oov": ("error", str, "out-of-vocabulary policy: error | unk"),
    "synth.num_videos": (64, int, "training videos"),
    "synth.num_test_videos": (64, int, "held-out videos"),
    "synth.T": (16, int, "segments per video"),
    "synth.d_rgb": (16, int, "rgb feature size"),
    "synth.d_flow": (16, int, "flow feature size"),
    "synth.d_depth": (16, int, "depth feature size"),
    "synth.categories": (9, int, "action categories"),
    "synth.groups": ((), _list, "group per category (appearance|motion|structure); empty = round robin"),
    "synth.strength": (1.0, float, "signature norm"),
    "synth.noise": (0.5, float, "background noise std"),
    "synth.weak_rgb": (0.25, float, "rgb copy of motion/structure signatures, relative"),
    "synth.seed": (0, int, "generator seed"),
    "model.c": (32, int, "feature size"),
    "model.heads": (4, int, "co-attention heads"),
    "model.steps": (3, int, "sequential query attention steps"),
    "model.coattn_layers": (1, int, "stacked co-attentional layers"),
    "model.streams": (("rgb", "flow", "depth"), _list, "visual streams used"),
    "model.common": ("rgb", str, "stream shared across co-attention pairs"),
    "model.transformer": (True, _bool, "co-attentional transformers on/off"),
    "model.share_common_block": (True, _bool, "one attention block for the common stream"),
    "model.learnable_weights": (True, _bool, "dynamic fusion weights on/off"),
    "model.dqa_lambda": (0.3, float, "overlap target of the distinct query attention loss"),
    "loss.contrastive": (True, _bool, "intra-modal contrastive loss on/off"),
    "contrastive.tau": (0.1, float, "temperature"),
    "contrastive.n_pos": (3, int, "positives per anchor"),
    "contrastive.n_neg": (4, int, "negatives per anchor"),
    "optim.lr": (4e-4, float, "Adam learning rate"),
    "train.epochs": (500, int, "training epochs"),
    "train.batch_size": (16, int, "anchors per optimizer step"),
    "train.dtype": ("float32", str, "float32 | float64"),
    "train.checkpoint_every": (0, int, "epochs between intermediate checkpoints (0 = final only)"),
    "seed": (0, int, "model init / shuffling / sampling seed"),
    "output_dir": ("runs/default", str, "where logs and checkpoints go"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: d for k, (d, _, _) in DEFAULTS.items()}
        for k, v in self.values.items():
            merged[k] = self._parse(k, v)
        self.values = merged
        self.validate()

    @staticmethod
    def _parse(key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        _, parser, _ = DEFAULTS[key]
        if isinstance(value, str) or parser is _list:
            try:
                return parser(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        return parser(value) if parser in (int, float, str) else value

    def __getitem__(self, key):
        return self.values[key]

    def replace(self, **overrides):
        vals = dict(self.values)
        for k, v in overrides.items():
            vals[k.replace("__", ".")] = v
        return RunConfig(vals)

    def with_updates(self, updates):
        vals = dict(self.values)
        vals.update(updates)
        return RunConfig(vals)

    def validate(self):
        v = self.values
        streams = v["model.streams"]
        if not streams or any(s not in ("rgb", "flow", "depth") for s in streams):
            raise ConfigError(f"model.streams must be a subset of rgb,flow,depth: {streams}")
        if len(set(streams)) != len(streams):
            raise ConfigError("model.streams lists a stream twice")
        if v["model.common"] not in ("rgb", "flow", "depth"):
            raise ConfigError("model.common must be rgb or flow (or depth)")
        if v["model.c"] % v["model.heads"]:
            raise ConfigError("model.c must be divisible by model.heads")
        if v["model.c"] % 2:
            raise ConfigError("model.c must be even")
        if not 0.0 <= v["model.dqa_lambda"] <= 1.0:
            raise ConfigError("model.dqa_lambda must lie in [0, 1]")
        if v["contrastive.tau"] <= 0:
            raise ConfigError("contrastive.tau must be positive")
        if v["train.dtype"] not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")
        if v["data.oov"] not in ("error", "unk"):
            raise ConfigError("data.oov must be error or unk")

    @property
    def common_stream(self):
        """The configured common stream if present, else the first of rgb/flow/depth present."""
        streams = self.values["model.streams"]
        if self.values["model.common"] in streams:
            return self.values["model.common"]
        for m in ("rgb", "flow", "depth"):
            if m in streams:
                return m
        raise ConfigError("no stream available")

    @property
    def output_dir(self):
        return os.environ.get(OUTPUT_ENV) or self.values["output_dir"]

    def synthetic(self):
        v = self.values
        return SyntheticConfig(
            num_videos=v["synth.num_videos"],
            num_test_videos=v["synth.num_test_videos"],
            T=v["synth.T"],
            d_in={"rgb": v["synth.d_rgb"], "flow": v["synth.d_flow"], "depth": v["synth.d_depth"]},
            num_categories=v["synth.categories"],
            group_assignment=tuple(v["synth.groups"]),
            strength=v["synth.strength"],
            noise=v["synth.noise"],
            weak_rgb=v["synth.weak_rgb"],
            seed=v["synth.seed"],
        )

    def dumps(self):
        lines = []
        for k in DEFAULTS:
            val = self.values[k]
            if isinstance(val, tuple):
                val = ",".join(val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{k}={val}")
        return "\n".join(lines) + "\n"


def parse_config_text(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    return values


def load_config(path=None, overrides=None):
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            values = parse_config_text(fh.read())
    values.update(overrides or {})
    return RunConfig(values)


# ablation variants and the stream-count variants, as flag overrides
ABLATIONS = {
    "full": {},
    "no_transformer": {"model.transformer": False},
    "flow_common": {"model.common": "flow"},
    "no_weight_sharing": {"model.share_common_block": False},
    "no_learnable_weights": {"model.learnable_weights": False},
    "no_contrastive": {"loss.contrastive": False},
    "baseline": {"model.transformer": False, "model.learnable_weights": False},
    "single_rgb": {"model.streams": ("rgb",)},
    "single_flow": {"model.streams": ("flow",)},
    "single_depth": {"model.streams": ("depth",)},
    "two_rgb_flow": {"model.streams": ("rgb", "flow")},
    "two_depth_rgb": {"model.streams": ("rgb", "depth")},
    "two_depth_flow": {"model.streams": ("flow", "depth")},
}

