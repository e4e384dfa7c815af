"""Annotations, binary feature files, tokenization and the synthetic corpus.

Annotation lines follow the Charades-STA layout ``video_id start end##sentence``.
Labels live in a sidecar ``video_id<TAB>category_id`` file and durations in a
``video_id<TAB>seconds`` file. Features are stored one file per
(modality, video) under ``<root>/<modality>/<video_id>.feat``.
"""

import hashlib
import os
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .contrastive import segment_range
from .encoders import MODALITIES, QueryTokens, RawSegmentFeatures, VocabularyError

FEATURE_MAGIC = b"DRFTFEAT"
FEATURE_VERSION = 1
MODALITY_CODES = {"rgb": 0, "flow": 1, "depth": 2}
MODALITY_BY_CODE = {v: k for k, v in MODALITY_CODES.items()}
GROUPS = ("appearance", "motion", "structure")
GROUP_MODALITY = {"appearance": "rgb", "motion": "flow", "structure": "depth"}
UNK = "<unk>"


class AnnotationParseError(ValueError):
    pass


class FeatureFormatError(ValueError):
    pass


class SyntheticConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


@dataclass
class AnnotationRecord:
    video_id: str
    start: float
    end: float
    duration: float
    sentence: str
    action_label: int = -1

    def __post_init__(self):
        if not self.sentence.strip():
            raise ValueError(f"{self.video_id}: empty sentence")
        if self.start > self.end:
            raise ValueError(f"{self.video_id}: start {self.start} > end {self.end}")
        if self.start < 0 or self.end > self.duration + 1e-9:
            raise ValueError(
                f"{self.video_id}: interval ({self.start}, {self.end}) outside [0, {self.duration}]"
            )

    @property
    def normalized(self):
        return (self.start / self.duration, min(self.end / self.duration, 1.0))


def _read_two_column(path, cast):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise AnnotationParseError(f"{path}:{lineno}: expected two tab-separated columns")
            out[parts[0]] = cast(parts[1])
    return out


def parse_annotations(path, labels_path=None, durations_path=None, verb_labels=None):
    """Parse ``video_id start end##sentence`` lines into AnnotationRecords.

    Labels come from ``labels_path`` when given, otherwise from the first
    sentence word found in ``verb_labels`` (word -> category id). Durations
    come from ``durations_path``; without it the annotation end time is used.
    """
    labels = _read_two_column(labels_path, int) if labels_path else {}
    durations = _read_two_column(durations_path, float) if durations_path else {}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "##" not in line:
                raise AnnotationParseError(f"{path}:{lineno}: missing '##' separator")
            head, sentence = line.split("##", 1)
            fields = head.split()
            if len(fields) != 3:
                raise AnnotationParseError(f"{path}:{lineno}: expected 'video_id start end'")
            vid = fields[0]
            try:
                start, end = float(fields[1]), float(fields[2])
            except ValueError as exc:
                raise AnnotationParseError(f"{path}:{lineno}: bad time value") from exc
            if start > end:
                raise ValueError(f"{path}:{lineno}: start {start} > end {end}")
            label = labels.get(vid, -1)
            if label == -1 and verb_labels:
                for word in sentence.lower().split():
                    if word in verb_labels:
                        label = verb_labels[word]
                        break
            duration = durations.get(vid, end)
            try:
                records.append(AnnotationRecord(vid, start, end, duration, sentence, label))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_annotations(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.video_id} {float(r.start)!r} {float(r.end)!r}##{r.sentence}\n")


def write_labels(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.video_id}\t{r.action_label}\n")


def write_durations(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.video_id}\t{float(r.duration)!r}\n")


# ---------------------------------------------------------------------------
# feature store
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<8sBBII")


def encode_features(modality, values):
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"features must be T x d_in, got {values.shape}")
    T, d = values.shape
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, MODALITY_CODES[modality], T, d)
    return header + np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_features(blob):
    if len(blob) < _HEADER.size:
        raise FeatureFormatError("feature file shorter than its header")
    magic, version, code, T, d = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError("bad feature file magic")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported feature file version {version}")
    if code not in MODALITY_BY_CODE:
        raise FeatureFormatError(f"unknown modality code {code}")
    expected = _HEADER.size + 4 * T * d
    if len(blob) != expected:
        raise FeatureFormatError(
            f"payload holds {len(blob) - _HEADER.size} bytes, header implies {4 * T * d}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(T, d).astype(np.float32)
    return RawSegmentFeatures(MODALITY_BY_CODE[code], values)


class FeatureStore:
    """Directory of per-(modality, video) feature files."""

    def __init__(self, root):
        self.root = root

    def path(self, video_id, modality):
        return os.path.join(self.root, modality, f"{video_id}.feat")

    def write(self, video_id, modality, values):
        os.makedirs(os.path.join(self.root, modality), exist_ok=True)
        with open(self.path(video_id, modality), "wb") as fh:
            fh.write(encode_features(modality, values))

    def read(self, video_id, modality):
        with open(self.path(video_id, modality), "rb") as fh:
            feats = decode_features(fh.read())
        if feats.modality != modality:
            raise FeatureFormatError(
                f"{self.path(video_id, modality)} holds {feats.modality} features"
            )
        return feats


def write_features(store, video_id, modality, values):
    store.write(video_id, modality, values)


def read_features(store, video_id, modality):
    return store.read(video_id, modality)


# ---------------------------------------------------------------------------
# vocabulary / tokenization
# ---------------------------------------------------------------------------


class Vocabulary:
    """Word <-> id map. Id 0 is reserved for the unknown token."""

    def __init__(self, words=(), oov="error"):
        if oov not in ("error", "unk"):
            raise ValueError(f"oov policy must be 'error' or 'unk', got {oov!r}")
        self.oov = oov
        self.itos = [UNK]
        self.stoi = {UNK: 0}
        for w in words:
            self.add(w)

    def add(self, word):
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    @classmethod
    def build(cls, sentences, oov="error"):
        words = sorted({w for s in sentences for w in split_words(s)})
        return cls(words, oov)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for w in self.itos[1:]:
                fh.write(w + "\n")

    @classmethod
    def load(cls, path, oov="error"):
        with open(path, encoding="utf-8") as fh:
            words = [line.rstrip("\n") for line in fh if line.strip()]
        return cls(words, oov)


def split_words(sentence):
    return sentence.lower().replace(".", " ").replace(",", " ").split()


def tokenize(sentence, vocabulary):
    words = split_words(sentence)
    if not words:
        raise ValueError("cannot tokenize an empty sentence")
    ids = []
    for w in words:
        if w in vocabulary.stoi:
            ids.append(vocabulary.stoi[w])
        elif vocabulary.oov == "unk":
            ids.append(0)
        else:
            raise VocabularyError(f"word {w!r} is not in the vocabulary")
    return QueryTokens(np.array(ids, dtype=np.int64), sentence)


def detokenize(tokens, vocabulary):
    return " ".join(vocabulary.itos[i] for i in tokens.token_ids)


# ---------------------------------------------------------------------------
# in-memory dataset
# ---------------------------------------------------------------------------


@dataclass
class GroundingDataset:
    """Records plus stacked features (num_videos, T, d_in) per modality."""

    records: list
    features: dict
    tokens: list
    vocabulary: Vocabulary
    category_names: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)  # category -> group name

    def __len__(self):
        return len(self.records)

    @property
    def T(self):
        return next(iter(self.features.values())).shape[1]

    @cached_property
    def labels(self):
        return np.array([r.action_label for r in self.records])

    @cached_property
    def intervals(self):
        return np.array([r.normalized for r in self.records], dtype=np.float64)

    def token_batch(self, idx):
        seqs = [self.tokens[i].token_ids for i in idx]
        N = max(len(s) for s in seqs)
        ids = np.zeros((len(seqs), N), dtype=np.int64)
        mask = np.zeros((len(seqs), N), dtype=bool)
        for row, s in enumerate(seqs):
            ids[row, : len(s)] = s
            mask[row, : len(s)] = True
        return ids, mask

    def batch(self, idx, dtype=np.float32):
        idx = np.asarray(idx)
        ids, mask = self.token_batch(idx)
        return {
            "index": idx,
            "features": {m: self.features[m][idx].astype(dtype) for m in self.features},
            "token_ids": ids,
            "token_mask": mask,
            "intervals": self.intervals[idx],
            "labels": self.labels[idx],
        }


def align_flow(values):
    """Pad flow computed on consecutive frame pairs (T-1 rows) to T rows by
    repeating its last row; other mismatches are left for the caller."""
    flow = values.get("flow")
    others = {v.shape[0] for m, v in values.items() if m != "flow"}
    if flow is None or len(others) != 1:
        return values
    (T,) = others
    if flow.shape[0] == T - 1 and T > 1:
        values = dict(values)
        values["flow"] = np.vstack([flow, flow[-1:]])
    return values


def load_dataset(root, split, vocabulary=None, modalities=MODALITIES, oov="error"):
    """Load ``<root>/<split>.txt`` with its sidecars and features."""
    labels = os.path.join(root, "labels.txt")
    durations = os.path.join(root, "durations.txt")
    records = parse_annotations(
        os.path.join(root, f"{split}.txt"),
        labels if os.path.exists(labels) else None,
        durations if os.path.exists(durations) else None,
    )
    if vocabulary is None:
        vocab_path = os.path.join(root, "vocab.txt")
        if os.path.exists(vocab_path):
            vocabulary = Vocabulary.load(vocab_path, oov)
        else:
            vocabulary = Vocabulary.build([r.sentence for r in records], oov)
    store = FeatureStore(root)
    feats = {m: [] for m in modalities}
    for r in records:
        values = {m: store.read(r.video_id, m).values for m in modalities}
        values = align_flow(values)
        Ts = set()
        for m in modalities:
            feats[m].append(values[m])
            Ts.add(values[m].shape[0])
        if len(Ts) != 1:
            raise FeatureFormatError(f"{r.video_id}: modalities disagree on T: {sorted(Ts)}")
    T_all = {v.shape[0] for m in modalities for v in feats[m]}
    if len(T_all) > 1:
        raise FeatureFormatError(f"videos in split {split!r} have different T: {sorted(T_all)}")
    stacked = {m: np.stack(feats[m]) for m in modalities}
    tokens = [tokenize(r.sentence, vocabulary) for r in records]
    names, groups = _read_categories(os.path.join(root, "categories.txt"))
    return GroundingDataset(records, stacked, tokens, vocabulary, names, groups)


def _read_categories(path):
    names, groups = {}, {}
    if not os.path.exists(path):
        return names, groups
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            cid, group, name = line.rstrip("\n").split("\t")
            names[int(cid)] = name
            groups[int(cid)] = group
    return names, groups


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

# (verb, object) templates; sentences read "person <verb> a <object>"
TEMPLATES = (
    ("smiles", "mirror"),
    ("holds", "phone"),
    ("closes", "door"),
    ("throws", "pillow"),
    ("sits", "bed"),
    ("works", "table"),
    ("opens", "window"),
    ("tosses", "bag"),
    ("leans", "chair"),
    ("watches", "television"),
    ("pours", "cup"),
    ("lies", "sofa"),
)


@dataclass
class SyntheticConfig:
    num_videos: int = 64
    num_test_videos: int = 64
    T: int = 16
    d_in: dict = field(default_factory=lambda: {"rgb": 16, "flow": 16, "depth": 16})
    num_categories: int = 9
    group_assignment: tuple = ()  # per category group name; empty -> round robin
    strength: float = 1.0
    noise: float = 0.5
    weak_rgb: float = 0.25
    min_cover: float = 0.2
    max_cover: float = 0.6
    seed: int = 0

    def groups(self):
        if self.group_assignment:
            assignment = tuple(self.group_assignment)
            if len(assignment) != self.num_categories:
                raise SyntheticConfigError(
                    f"group assignment lists {len(assignment)} categories, expected {self.num_categories}"
                )
            unknown = set(assignment) - set(GROUPS)
            if unknown:
                raise SyntheticConfigError(f"unknown group names {sorted(unknown)}")
            return assignment
        return tuple(GROUPS[i % len(GROUPS)] for i in range(self.num_categories))

    def validate(self):
        self.groups()
        if self.num_categories > len(TEMPLATES):
            raise SyntheticConfigError(f"at most {len(TEMPLATES)} categories are supported")
        if self.T < 2:
            raise SyntheticConfigError("T must be at least 2")
        if not 0 < self.min_cover <= self.max_cover <= 1:
            raise SyntheticConfigError("cover fractions must satisfy 0 < min <= max <= 1")


@dataclass
class SyntheticCorpus:
    splits: dict  # split -> list of (AnnotationRecord, {modality: T x d array})
    vocabulary: Vocabulary
    category_names: dict
    groups: dict
    signatures: dict  # (category, modality) -> unit vector


def _sentence(verb, obj):
    return f"person {verb} a {obj}"


def generate_synthetic(cfg):
    """Draw a tri-modal corpus with category signatures planted in one stream.

    Background rows are N(0, noise^2) in every modality. Inside the ground
    truth span, the category's unit signature times ``strength`` is added to
    the stream that codes its group, plus a ``weak_rgb`` copy in RGB for
    motion- and structure-coded categories.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    groups = cfg.groups()
    signatures = {}
    for k in range(cfg.num_categories):
        for m in MODALITIES:
            v = rng.normal(size=cfg.d_in[m])
            signatures[(k, m)] = v / np.linalg.norm(v)
    names = {k: _sentence(*TEMPLATES[k]) for k in range(cfg.num_categories)}
    vocabulary = Vocabulary.build(names.values())

    lo_len = max(1, int(np.ceil(cfg.min_cover * cfg.T)))
    hi_len = max(lo_len, int(np.floor(cfg.max_cover * cfg.T)))
    splits = {}
    for split, count in (("train", cfg.num_videos), ("test", cfg.num_test_videos)):
        items = []
        for i in range(count):
            k = int(rng.integers(cfg.num_categories)) if i >= cfg.num_categories else i
            group = groups[k]
            length = int(rng.integers(lo_len, hi_len + 1))
            start = int(rng.integers(0, cfg.T - length + 1))
            duration = float(np.round(rng.uniform(20.0, 40.0), 2))
            feats = {}
            for m in MODALITIES:
                x = rng.normal(0.0, cfg.noise, size=(cfg.T, cfg.d_in[m]))
                if GROUP_MODALITY[group] == m:
                    x[start : start + length] += cfg.strength * signatures[(k, m)]
                elif m == "rgb":
                    x[start : start + length] += cfg.weak_rgb * cfg.strength * signatures[(k, m)]
                feats[m] = x.astype(np.float32)
            t_s = start / cfg.T * duration
            t_e = (start + length) / cfg.T * duration
            rec = AnnotationRecord(f"{split}{i:05d}", t_s, t_e, duration, names[k], k)
            items.append((rec, feats))
        splits[split] = items
    return SyntheticCorpus(splits, vocabulary, names, dict(enumerate(groups)), signatures)


def write_corpus(corpus, root):
    """Write features, annotations and sidecars; returns the FeatureStore."""
    os.makedirs(root, exist_ok=True)
    store = FeatureStore(root)
    all_records = []
    for split, items in corpus.splits.items():
        records = [rec for rec, _ in items]
        for rec, feats in items:
            for m, x in feats.items():
                store.write(rec.video_id, m, x)
        write_annotations(os.path.join(root, f"{split}.txt"), records)
        all_records += records
    write_labels(os.path.join(root, "labels.txt"), all_records)
    write_durations(os.path.join(root, "durations.txt"), all_records)
    corpus.vocabulary.save(os.path.join(root, "vocab.txt"))
    with open(os.path.join(root, "categories.txt"), "w", encoding="utf-8", newline="\n") as fh:
        for k, name in corpus.category_names.items():
            fh.write(f"{k}\t{corpus.groups[k]}\t{name}\n")
    return store


def corpus_dataset(corpus, split):
    """Build a GroundingDataset straight from an in-memory corpus split."""
    items = corpus.splits[split]
    records = [rec for rec, _ in items]
    feats = {m: np.stack([f[m] for _, f in items]) for m in MODALITIES}
    tokens = [tokenize(r.sentence, corpus.vocabulary) for r in records]
    return GroundingDataset(records, feats, tokens, corpus.vocabulary, corpus.category_names,
                            corpus.groups)


def directory_digest(root):
    """SHA-256 over relative paths and contents of every file under ``root``."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            h.update(os.path.relpath(full, root).encode("utf-8"))
            with open(full, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# separability probe
# ---------------------------------------------------------------------------


def pooled_gt_features(dataset, modality):
    """(num_videos, d_in) mean of each video's ground-truth segment rows."""
    X = dataset.features[modality]
    T = X.shape[1]
    out = np.empty((len(dataset), X.shape[2]))
    for i, (s, e) in enumerate(dataset.intervals):
        lo, hi = segment_range(s, e, T)
        out[i] = X[i, lo : hi + 1].mean(axis=0)
    return out


def linear_probe_accuracy(X, y, folds=4, ridge=1.0, seed=0):
    """Cross-validated accuracy of a ridge-regression one-vs-rest classifier."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes = np.unique(y)
    order = np.random.default_rng(seed).permutation(len(y))
    correct = 0
    for f in range(folds):
        test = order[f::folds]
        train = np.setdiff1d(order, test)
        Xtr = np.hstack([X[train], np.ones((len(train), 1))])
        Y = (y[train][:, None] == classes[None, :]).astype(np.float64)
        W = np.linalg.solve(Xtr.T @ Xtr + ridge * np.eye(Xtr.shape[1]), Xtr.T @ Y)
        Xte = np.hstack([X[test], np.ones((len(test), 1))])
        pred = classes[np.argmax(Xte @ W, axis=1)]
        correct += int((pred == y[test]).sum())
    return correct / len(y)


@dataclass
class ProbeReport:
    accuracy: dict  # (group, modality) -> accuracy among that group's categories
    chance: dict  # group -> 1 / categories in group
    passed: bool
    failures: list

    def lines(self):
        out = []
        for (g, m), acc in sorted(self.accuracy.items()):
            out.append(f"{g:<10} {m:<6} acc={acc:.3f} (chance {self.chance[g]:.3f})")
        return out


def separability_probe(datasets, coded_min=0.9, uncoded_max_above_chance=0.3):
    """Check that each group's coding stream separates its categories and the
    other non-RGB stream does not.

    ``datasets`` is one dataset or a sequence of splits of the same corpus;
    their records are pooled. For every group, a linear probe classifies the
    group's records among the group's categories from pooled ground-truth
    features of each stream.
    """
    if isinstance(datasets, GroundingDataset):
        datasets = [datasets]
    groups = datasets[0].groups
    labels = np.concatenate([d.labels for d in datasets])
    streams = list(datasets[0].features)
    pooled = {m: np.concatenate([pooled_gt_features(d, m) for d in datasets]) for m in streams}
    accuracy, chance, failures = {}, {}, []
    for g in GROUPS:
        cats = [k for k, grp in groups.items() if grp == g]
        sel = np.isin(labels, cats)
        present = np.unique(labels[sel])
        if present.size < 2:
            continue
        chance[g] = 1.0 / present.size
        for m in streams:
            accuracy[(g, m)] = linear_probe_accuracy(pooled[m][sel], labels[sel])
        coding = GROUP_MODALITY[g]
        if accuracy[(g, coding)] <= coded_min:
            failures.append(f"{g}: {coding} probe accuracy {accuracy[(g, coding)]:.3f} <= {coded_min}")
        for m in ("flow", "depth"):
            if m == coding or (g, m) not in accuracy:
                continue
            if accuracy[(g, m)] > chance[g] + uncoded_max_above_chance:
                failures.append(
                    f"{g}: uncoded {m} probe accuracy {accuracy[(g, m)]:.3f} is far above chance"
                )
    return ProbeReport(accuracy, chance, not failures, failures)
