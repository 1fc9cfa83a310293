"""Training procedures: teacher / scratch training, multi-teacher fusion,
inherited-classifier distillation and the L2 embedding-matching baseline."""

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import TRAIN, Dataset, batch_indices
from .errors import ArgumentError, DegenerateEmbeddingError, DivergenceError, InvariantViolation
from .losses import LossConfig, as_loss
from .model import (
    Classifier,
    EncoderModel,
    classifier_backward,
    classifier_cosines,
    forward_cosines,
    model_backward,
)
from .numcore import Rng, derive_seed, sym_eig
from .optim import NAG, OptimConfig

log = logging.getLogger(__name__)

# seed-tree branches
_ENCODER, _CLASSIFIER, _EPOCH = 0, 1, 2


@dataclass(frozen=True)
class EncoderConfig:
    hidden: tuple = (64, 64)
    embed_dim: int = 16


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 16
    batch_size: int = 128


@dataclass
class TrainReport:
    losses: list
    seed: int
    config: dict
    wall_seconds: float = 0.0
    checkpoint: str = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _fit(params, batch_grad, ds, optim_cfg, settings, seed, frozen=()):
    """Run NAG over ``params`` for ``settings.epochs`` epochs of the train split.

    ``batch_grad(idx)`` returns ``(loss, grads)`` at the model's current
    (lookahead) weights for the rows ``idx``. Returns per-epoch mean losses.
    """
    for p in params:
        if any(p is q for q in frozen):
            raise InvariantViolation("a frozen array was handed to the optimizer")
    n_train = ds.rows(TRAIN).size
    steps = settings.epochs * math.ceil(n_train / settings.batch_size)
    opt = NAG(params, replace(optim_cfg, total_steps=max(steps, 1)))
    losses = []
    for epoch in range(settings.epochs):
        seen = []
        for idx in batch_indices(ds, settings.batch_size, derive_seed(seed, _EPOCH, epoch)):
            def grad_fn(idx=idx):
                value, grads = batch_grad(idx)
                if not math.isfinite(value):
                    raise DivergenceError("non-finite loss", opt.t)
                seen.append(value * len(idx))
                return grads
            opt.step(grad_fn)
        losses.append(math.fsum(seen) / n_train)
        log.debug("epoch %d loss %.6f", epoch, losses[-1])
    return losses


def _classification_grad(model, clf, loss, ds):
    def batch_grad(idx):
        cos, cache = forward_cosines(model, clf, ds.features[idx])
        labels = ds.labels[idx]
        value = loss.forward(cos, labels)
        enc_grads, w_grad = model_backward(model, clf, loss.backward(cos, labels), cache)
        return value, enc_grads if clf.frozen else enc_grads + [w_grad]
    return batch_grad


def _config_echo(**parts):
    out = {}
    for key, value in parts.items():
        if hasattr(value, "to_dict"):
            value = value.to_dict()
        elif hasattr(value, "__dataclass_fields__"):
            value = asdict(value)
        out[key] = value
    return out


def train_classifier_model(encoder_cfg, loss, ds, optim_cfg, seed, settings=TrainSettings()):
    """Jointly train a fresh encoder and classifier under a margin softmax."""
    start = time.perf_counter()
    model = EncoderModel.init(ds.d_in, encoder_cfg.hidden, encoder_cfg.embed_dim,
                              Rng(derive_seed(seed, _ENCODER)))
    clf = Classifier.init(ds.classes, encoder_cfg.embed_dim, Rng(derive_seed(seed, _CLASSIFIER)))
    handle = as_loss(loss)
    losses = _fit(model.params() + [clf.weights], _classification_grad(model, clf, handle, ds),
                  ds, optim_cfg, settings, seed)
    report = TrainReport(losses, seed, _config_echo(encoder=encoder_cfg, loss=loss, optim=optim_cfg,
                                                    settings=settings))
    report.wall_seconds = time.perf_counter() - start
    return model, clf, report


def train_teacher(encoder_cfg, loss, ds, optim_cfg, seed, settings=TrainSettings(epochs=8)):
    return train_classifier_model(encoder_cfg, loss, ds, optim_cfg, seed, settings)


def train_scratch(student_cfg, loss, ds, optim_cfg, seed, settings=TrainSettings()):
    """No-distillation control: the student with its own fresh classifier."""
    return train_classifier_model(student_cfg, loss, ds, optim_cfg, seed, settings)


def classifier_digest(clf):
    return hashlib.sha256(clf.tobytes()).hexdigest()


def distill_proxyless(student_cfg, teacher_classifier, loss, ds, optim_cfg, seed,
                      settings=TrainSettings()):
    """Train a student encoder against a frozen byte copy of the teacher's classifier."""
    if teacher_classifier.dim != student_cfg.embed_dim:
        raise ArgumentError(
            f"teacher classifier dim {teacher_classifier.dim} != student embed dim {student_cfg.embed_dim}"
        )
    if teacher_classifier.classes != ds.classes:
        raise ArgumentError(f"teacher classifier has {teacher_classifier.classes} classes, data has {ds.classes}")
    start = time.perf_counter()
    before = teacher_classifier.tobytes()
    clf = teacher_classifier.inherit()
    model = EncoderModel.init(ds.d_in, student_cfg.hidden, student_cfg.embed_dim,
                              Rng(derive_seed(seed, _ENCODER)))
    losses = _fit(model.params(), _classification_grad(model, clf, as_loss(loss), ds),
                  ds, optim_cfg, settings, seed, frozen=(clf.weights,))
    if clf.tobytes() != before or teacher_classifier.tobytes() != before:
        raise InvariantViolation("inherited classifier changed during distillation")
    report = TrainReport(losses, seed, _config_echo(student=student_cfg, loss=loss, optim=optim_cfg,
                                                    settings=settings))
    report.extra["classifier_sha256"] = classifier_digest(clf)
    report.wall_seconds = time.perf_counter() - start
    return model, report


def l2_loss(student_emb, teacher_emb):
    """Mean squared distance between matched unit embeddings, and its gradient."""
    diff = student_emb - teacher_emb
    n = diff.shape[0]
    return float(np.sum(diff * diff)) / n, 2.0 * diff / n


def distill_l2(student_cfg, teacher, ds, optim_cfg, seed, settings=TrainSettings(), init=None):
    """L2KD baseline: pull student embeddings onto the frozen teacher's embeddings.

    ``teacher`` is any extractor with ``embed``; its embeddings are computed
    once. ``init`` optionally supplies the starting student encoder.
    """
    start = time.perf_counter()
    teacher_emb = teacher.embed(ds.features)
    if teacher_emb.shape[1] != student_cfg.embed_dim:
        raise ArgumentError(f"teacher embed dim {teacher_emb.shape[1]} != student {student_cfg.embed_dim}")
    if init is not None:
        model = init.copy()
    else:
        model = EncoderModel.init(ds.d_in, student_cfg.hidden, student_cfg.embed_dim,
                                  Rng(derive_seed(seed, _ENCODER)))

    def batch_grad(idx):
        emb, cache = model.forward(ds.features[idx])
        value, g = l2_loss(emb, teacher_emb[idx])
        return value, model.backward(g, cache)

    losses = _fit(model.params(), batch_grad, ds, optim_cfg, settings, seed)
    report = TrainReport(losses, seed, _config_echo(student=student_cfg, optim=optim_cfg, settings=settings))
    report.wall_seconds = time.perf_counter() - start
    return model, report


# -- multi-teacher fusion ------------------------------------------------------


@dataclass
class FusionMap:
    method: str  # "pca" or "linear"
    projection: np.ndarray  # d_target x sum(d_i)
    mean: np.ndarray
    bias: np.ndarray
    classifier: Classifier = None
    explained_variance: list = None
    warnings: list = field(default_factory=list)
    report: TrainReport = None

    def apply(self, concatenated):
        z = concatenated @ self.projection.T + self.bias
        norms = np.sqrt(np.sum(z * z, axis=1))
        if np.any(norms < 1e-12):
            raise DegenerateEmbeddingError("fused embedding with zero norm")
        return z / norms[:, None]


class FusedTeacher:
    """Teacher ensemble seen as one extractor: concatenate, project, renormalize."""

    def __init__(self, teachers, fusion):
        self.teachers = list(teachers)
        self.fusion = fusion

    @property
    def embed_dim(self):
        return self.fusion.projection.shape[0]

    def embed(self, x):
        return self.fusion.apply(concatenate_embeddings(self.teachers, x))


def concatenate_embeddings(teachers, x):
    return np.hstack([t.embed(x) for t in teachers])


def pca_basis(z, d_target):
    """Top ``d_target`` principal directions of the rows of ``z``.

    Returns ``(projection, mean, explained_variance_ratios, rank)``.
    """
    mean = z.mean(axis=0)
    centered = z - mean
    cov = centered.T @ centered / z.shape[0]
    vals, vecs = sym_eig(cov)
    vals = np.clip(vals, 0.0, None)
    total = float(np.sum(vals))
    ratios = vals / total if total > 0 else np.zeros_like(vals)
    rank = int(np.sum(vals > 1e-10 * max(total, 1e-300)))
    return np.ascontiguousarray(vecs[:, :d_target].T), mean, ratios, rank


def fuse_teachers(teachers, ds, method, d_target, loss, optim_cfg, seed, settings=TrainSettings()):
    """Fit the reduction map over concatenated teacher embeddings, then train a new classifier.

    PCA fits the basis on the centred train-split covariance and projects the
    raw concatenation (no centring at apply time, so duplicated teachers keep
    their cosine geometry). "linear" trains a reduction layer jointly with
    the classifier.
    """
    if len(teachers) < 2:
        raise ArgumentError(f"fusion needs at least two teachers, got {len(teachers)}")
    z = concatenate_embeddings(teachers, ds.features)
    if d_target > z.shape[1]:
        raise ArgumentError(f"d_target {d_target} exceeds concatenated dim {z.shape[1]}")
    handle = as_loss(loss)
    fused_ds = Dataset(z, ds.labels, ds.classes, split=ds.split)
    start = time.perf_counter()
    if method == "pca":
        projection, mean, ratios, rank = pca_basis(z[ds.rows(TRAIN)], d_target)
        fmap = FusionMap("pca", projection, mean, np.zeros(d_target), explained_variance=ratios.tolist())
        if rank < d_target:
            fmap.warnings.append(f"covariance rank {rank} < d_target {d_target}; trailing components carry no variance")
        fused = Dataset(fmap.apply(z), ds.labels, ds.classes, split=ds.split)
        clf = Classifier.init(ds.classes, d_target, Rng(derive_seed(seed, _CLASSIFIER)))

        def batch_grad(idx):
            emb = fused.features[idx]
            cos = classifier_cosines(clf, emb)
            value = handle.forward(cos, fused.labels[idx])
            _, w_grad = classifier_backward(clf, handle.backward(cos, fused.labels[idx]), emb)
            return value, [w_grad]

        losses = _fit([clf.weights], batch_grad, fused, optim_cfg, settings, seed)
    elif method == "linear":
        layer_rng = Rng(derive_seed(seed, _ENCODER))
        reducer = EncoderModel.init(z.shape[1], (), d_target, layer_rng)
        clf = Classifier.init(ds.classes, d_target, Rng(derive_seed(seed, _CLASSIFIER)))
        losses = _fit(reducer.params() + [clf.weights], _classification_grad(reducer, clf, handle, fused_ds),
                      fused_ds, optim_cfg, settings, seed)
        layer = reducer.layers[0]
        fmap = FusionMap("linear", layer.weight, np.zeros(z.shape[1]), layer.bias)
    else:
        raise ArgumentError(f"unknown fusion method {method!r}")
    fmap.classifier = clf
    fmap.report = TrainReport(losses, seed, _config_echo(method=method, d_target=d_target, loss=loss,
                                                         optim=optim_cfg, settings=settings))
    fmap.report.wall_seconds = time.perf_counter() - start
    return fmap
