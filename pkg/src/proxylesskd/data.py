"""Synthetic vMF identity clusters, CSV ingestion, seeded splits and batching."""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArgumentError, ParseError
from .numcore import Rng

TRAIN, GALLERY, PROBE = "train", "gallery", "probe"


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int
    split: np.ndarray = None
    label_map: dict = field(default_factory=dict)
    means: np.ndarray = None  # class mean directions, synthetic data only

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.split is None:
            self.split = np.full(len(self.labels), TRAIN, dtype="<U7")

    @property
    def n(self):
        return len(self.labels)

    @property
    def d_in(self):
        return self.features.shape[1]

    def rows(self, tag):
        return np.flatnonzero(self.split == tag)

    def part(self, tag):
        idx = self.rows(tag)
        return self.features[idx], self.labels[idx]


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 64
    per_class: int = 20
    d_in: int = 32
    kappa: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ArgumentError(f"kappa must be positive, got {self.kappa}")
        if self.per_class < 2:
            raise ArgumentError("per_class must be >= 2")
        if self.classes < 1 or self.d_in < 2:
            raise ArgumentError("need classes >= 1 and d_in >= 2")


def _unit(v):
    return v / math.sqrt(float(np.dot(v, v)))


def uniform_direction(d, rng):
    return _unit(rng.gaussian(d))


def _wood_radial(kappa, d, rng):
    """Cosine to the mean direction for a vMF draw (Wood, 1994)."""
    d1 = d - 1.0
    root = math.sqrt(4.0 * kappa * kappa + d1 * d1)
    b = d1 / (2.0 * kappa + root)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + d1 * math.log(4.0 * b / (1.0 + b) ** 2)
    while True:
        z = rng.beta(d1 / 2.0, d1 / 2.0)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = 1.0 - rng.uniform()
        if kappa * w + d1 * math.log(1.0 - x0 * w) - c >= math.log(u):
            return w


def sample_vmf(mu, kappa, count, rng):
    """``count`` unit vectors from vMF(mu, kappa) via tangent-normal decomposition."""
    mu = _unit(np.asarray(mu, dtype=np.float64))
    d = mu.size
    out = np.empty((count, d))
    for i in range(count):
        w = _wood_radial(kappa, d, rng)
        v = rng.gaussian(d)
        v -= np.dot(v, mu) * mu
        v = _unit(v)
        out[i] = _unit(w * mu + math.sqrt(max(0.0, 1.0 - w * w)) * v)
    return out


def generate_synthetic(cfg):
    """Dataset of ``cfg.classes`` vMF clusters with uniformly random mean directions."""
    rng = Rng(cfg.seed)
    means = np.array([uniform_direction(cfg.d_in, rng) for _ in range(cfg.classes)])
    feats = np.vstack([sample_vmf(mu, cfg.kappa, cfg.per_class, rng) for mu in means])
    labels = np.repeat(np.arange(cfg.classes), cfg.per_class)
    return Dataset(feats, labels, cfg.classes, means=means)


def generate_distractors(identities, per_identity, d_in, kappa, seed):
    """Label-less gallery noise: fresh vMF identities unrelated to any dataset class."""
    cfg = SynthConfig(identities, max(per_identity, 2), d_in, kappa, seed)
    return generate_synthetic(cfg).features.reshape(identities, -1, d_in)[:, :per_identity].reshape(-1, d_in)


def load_csv(path):
    """Read ``label,f0,f1,...`` rows; labels are remapped densely in order of first appearance."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", 1)
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0] != "label":
        raise ParseError("header must be 'label,f0,f1,...'", 1)
    width = len(header)
    raw_labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} columns, found {len(row)}", lineno)
        try:
            label = int(row[0])
        except ValueError:
            raise ParseError(f"label {row[0]!r} is not an integer", lineno) from None
        if label < 0:
            raise ParseError(f"negative label {label}", lineno)
        try:
            values = [float(x) for x in row[1:]]
        except ValueError as exc:
            raise ParseError(f"non-numeric feature: {exc}", lineno) from None
        if not all(math.isfinite(x) for x in values):
            raise ParseError("non-finite feature value", lineno)
        raw_labels.append(label)
        feats.append(values)
    if not feats:
        raise ParseError("no data rows", 2)
    mapping = {}
    for label in raw_labels:
        mapping.setdefault(label, len(mapping))
    labels = np.array([mapping[x] for x in raw_labels])
    return Dataset(np.array(feats), labels, len(mapping), label_map=mapping)


def make_splits(ds, gallery_per_class, probe_per_class, seed):
    """Seeded per-class partition into gallery, probe and train (the remainder)."""
    if gallery_per_class < 0 or probe_per_class < 0:
        raise ArgumentError("split counts must be non-negative")
    rng = Rng(seed)
    split = np.full(ds.n, TRAIN, dtype="<U7")
    held = gallery_per_class + probe_per_class
    for k in range(ds.classes):
        idx = np.flatnonzero(ds.labels == k)
        if len(idx) <= held:
            raise ArgumentError(
                f"class {k} has {len(idx)} samples; needs more than {held} for gallery+probe+train"
            )
        idx = idx[rng.permutation(len(idx))]
        split[idx[:gallery_per_class]] = GALLERY
        split[idx[gallery_per_class:held]] = PROBE
    return replace(ds, split=split)


def batch_indices(ds, batch_size, epoch_seed):
    """Row indices of the shuffled train-split mini-batches; the last may be short."""
    if batch_size < 1:
        raise ArgumentError("batch_size must be >= 1")
    idx = ds.rows(TRAIN)
    if idx.size == 0:
        raise ArgumentError("train split is empty")
    idx = idx[Rng(epoch_seed).permutation(idx.size)]
    return [idx[i : i + batch_size] for i in range(0, idx.size, batch_size)]


def batches(ds, batch_size, epoch_seed):
    return [(ds.features[b], ds.labels[b]) for b in batch_indices(ds, batch_size, epoch_seed)]
