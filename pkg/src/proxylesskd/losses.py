"""Margin-based softmax losses over classifier cosines.

All losses here take a matrix of cosines ``cos[i, k]`` between embedding
``i`` and the normalized prototype of class ``k`` and return the batch-mean
loss together with its gradient with respect to those cosines. Anything with
matching ``forward``/``backward`` methods can be plugged into training.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ArgumentError, ConfigurationError
from .numcore import logsumexp_rows

CLAMP = 1e-7


class Variant(str, Enum):
    SOFTMAX = "softmax"
    ASOFTMAX = "asoftmax"
    COSFACE = "cosface"
    ARCFACE = "arcface"


@dataclass(frozen=True)
class LossConfig:
    variant: Variant = Variant.ARCFACE
    m: float = 0.5
    s: float = 64.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError:
            raise ArgumentError(f"unknown loss variant {self.variant!r}") from None
        if not self.s > 0:
            raise ArgumentError(f"scale s must be positive, got {self.s}")
        if not self.m >= 0:
            raise ArgumentError(f"margin m must be non-negative, got {self.m}")
        if self.variant is Variant.ASOFTMAX and (self.m < 1 or self.m != int(self.m)):
            raise ArgumentError(f"A-Softmax needs an integer margin >= 1, got {self.m}")

    def to_dict(self):
        return {"variant": self.variant.value, "m": self.m, "s": self.s}


def _chebyshev(m, c):
    """T_m(c) and its derivative m * U_{m-1}(c)."""
    if m == 1:
        return c.copy(), np.ones_like(c)
    t_prev, t = np.ones_like(c), c
    u_prev, u = np.ones_like(c), 2.0 * c
    for _ in range(m - 1):
        t_prev, t = t, 2.0 * c * t - t_prev
    for _ in range(m - 2):
        u_prev, u = u, 2.0 * c * u - u_prev
    return t, m * u


def target_logit(config, c):
    """Margin function f(m, theta) evaluated from cos(theta), with d f / d cos."""
    c = np.asarray(c, dtype=np.float64)
    v, m = config.variant, config.m
    if v is Variant.SOFTMAX or (m == 0 and v is not Variant.ASOFTMAX):
        return c, np.ones_like(c)
    if v is Variant.COSFACE:
        return c - m, np.ones_like(c)
    if v is Variant.ASOFTMAX:
        return _chebyshev(int(m), c)
    # ArcFace: exact branch while theta + m < pi, linear fallback beyond it
    # the clamp only guards the 1/sin(theta) in the derivative
    c = np.clip(c, -1.0, 1.0)
    cc = np.clip(c, -1.0 + CLAMP, 1.0 - CLAMP)
    cos_m, sin_m = math.cos(m), math.sin(m)
    exact = c > math.cos(math.pi - m)
    f = np.where(exact, c * cos_m - np.sqrt(1.0 - c * c) * sin_m, c - m * sin_m)
    df = np.where(exact, cos_m + sin_m * cc / np.sqrt(1.0 - cc * cc), 1.0)
    return f, df


def margin_fn(config, cos_theta):
    if not -1.0 - 1e-9 <= cos_theta <= 1.0 + 1e-9:
        raise ArgumentError(f"cosine {cos_theta} outside [-1, 1]")
    c = min(1.0, max(-1.0, float(cos_theta)))
    return float(target_logit(config, np.array([c]))[0][0])


def _check(cosines, labels):
    cosines = np.asarray(cosines, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if cosines.ndim != 2 or cosines.shape[1] < 2:
        raise ArgumentError(f"need an N x K cosine matrix with K >= 2, got {cosines.shape}")
    if labels.shape != (cosines.shape[0],):
        raise ArgumentError("one label per cosine row required")
    if labels.size and (labels.min() < 0 or labels.max() >= cosines.shape[1]):
        raise ArgumentError(f"label out of range [0, {cosines.shape[1]})")
    return cosines, labels


def _logits(config, cosines, labels):
    rows = np.arange(cosines.shape[0])
    f, df = target_logit(config, cosines[rows, labels])
    logits = config.s * cosines
    logits[rows, labels] = config.s * f
    return logits, df


def batch_forward(config, cosines, labels):
    """Mean margin-softmax loss over the rows of ``cosines``."""
    cosines, labels = _check(cosines, labels)
    logits, _ = _logits(config, cosines, labels)
    rows = np.arange(cosines.shape[0])
    shifted = logits - logits[rows, labels][:, None]
    return float(np.mean(logsumexp_rows(shifted)))


def batch_backward(config, cosines, labels):
    """Gradient of :func:`batch_forward` with respect to every cosine."""
    cosines, labels = _check(cosines, labels)
    logits, df = _logits(config, cosines, labels)
    rows = np.arange(cosines.shape[0])
    dlogits = np.exp(logits - logsumexp_rows(logits)[:, None])
    # p_y - 1 as minus the other classes' mass: no cancellation when p_y ~ 1
    dlogits[rows, labels] = 0.0
    dlogits[rows, labels] = -np.sum(dlogits, axis=1)
    grad = config.s * dlogits
    grad[rows, labels] *= df
    return grad / cosines.shape[0]


def loss_forward(config, cosines, label):
    return batch_forward(config, np.asarray(cosines, dtype=np.float64)[None, :], [label])


def loss_backward(config, cosines, label):
    return batch_backward(config, np.asarray(cosines, dtype=np.float64)[None, :], [label])[0]


class MarginSoftmaxLoss:
    """Built-in loss handle wrapping a :class:`LossConfig`."""

    def __init__(self, config):
        self.config = config

    def forward(self, cosines, labels):
        return batch_forward(self.config, cosines, labels)

    def backward(self, cosines, labels):
        return batch_backward(self.config, cosines, labels)

    def __repr__(self):
        return f"MarginSoftmaxLoss({self.config})"


def as_loss(handle):
    """Resolve a LossConfig or a custom handle into something trainable."""
    if isinstance(handle, LossConfig):
        return MarginSoftmaxLoss(handle)
    for name in ("forward", "backward"):
        if not callable(getattr(handle, name, None)):
            raise ConfigurationError(f"loss handle {handle!r} has no {name} callback")
    return handle


def loss_plugin(handle, classifier, embeddings, labels):
    """Loss of ``handle`` on the cosines between ``embeddings`` and ``classifier``."""
    from .model import classifier_cosines

    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.atleast_1d(labels)
    return as_loss(handle).forward(classifier_cosines(classifier, embeddings), labels)
