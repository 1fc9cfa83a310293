"""MLP encoder producing unit-norm embeddings, cosine classifier head and the
PXKD checkpoint format."""

import copy
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptCheckpointError,
    DegenerateClassifierError,
    DegenerateEmbeddingError,
    ShapeError,
    UnsupportedVersionError,
)
from .numcore import as_matrix

NORM_EPS = 1e-12
MAGIC = b"PXKD"
VERSION = 1


@dataclass
class Layer:
    weight: np.ndarray  # d_out x d_in
    bias: np.ndarray
    activation: str = "relu"  # "relu" or "none"

    @property
    def d_in(self):
        return self.weight.shape[1]

    @property
    def d_out(self):
        return self.weight.shape[0]


class EncoderModel:
    """Feedforward encoder; the last layer is linear and its output is L2-normalized."""

    def __init__(self, layers):
        if not layers:
            raise ShapeError("an encoder needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ShapeError(f"layer widths do not chain: {prev.d_out} -> {nxt.d_in}")
        self.layers = layers

    @classmethod
    def init(cls, d_in, hidden, embed_dim, rng):
        """Kaiming-uniform weights (bound sqrt(6 / fan_in)) drawn from ``rng``, zero biases."""
        widths = [d_in, *hidden, embed_dim]
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            bound = np.sqrt(6.0 / fan_in)
            w = (2.0 * rng.uniform(fan_out * fan_in) - 1.0) * bound
            act = "none" if i == len(widths) - 2 else "relu"
            layers.append(Layer(w.reshape(fan_out, fan_in), np.zeros(fan_out), act))
        return cls(layers)

    @property
    def d_in(self):
        return self.layers[0].d_in

    @property
    def embed_dim(self):
        return self.layers[-1].d_out

    @property
    def hidden(self):
        return [layer.d_out for layer in self.layers[:-1]]

    def params(self):
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self):
        return copy.deepcopy(self)

    def forward(self, x):
        x = as_matrix(x, "batch")
        if x.shape[0] == 0:
            raise ShapeError("empty batch")
        if x.shape[1] != self.d_in:
            raise ShapeError(f"batch width {x.shape[1]} != encoder input {self.d_in}")
        inputs, pre = [], []
        h = x
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight.T + layer.bias
            pre.append(z)
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        norms = np.sqrt(np.sum(h * h, axis=1))
        if np.any(norms < NORM_EPS):
            raise DegenerateEmbeddingError(
                f"{int(np.sum(norms < NORM_EPS))} embeddings have (near) zero norm before normalization"
            )
        emb = h / norms[:, None]
        return emb, {"inputs": inputs, "pre": pre, "norms": norms, "emb": emb}

    def embed(self, x):
        return self.forward(x)[0]

    def backward(self, grad_emb, cache):
        """Gradients of a scalar loss w.r.t. ``params()`` given d loss / d embedding."""
        emb, norms = cache["emb"], cache["norms"]
        if grad_emb.shape != emb.shape:
            raise ShapeError(f"gradient shape {grad_emb.shape} != embedding shape {emb.shape}")
        # d(h/|h|) = (g - e <e, g>) / |h|
        g = (grad_emb - emb * np.sum(emb * grad_emb, axis=1, keepdims=True)) / norms[:, None]
        grads = []
        for layer, h_in, z in zip(reversed(self.layers), reversed(cache["inputs"]), reversed(cache["pre"])):
            if layer.activation == "relu":
                g = g * (z > 0)
            grads.append(g.sum(axis=0))
            grads.append(g.T @ h_in)
            g = g @ layer.weight
        grads.reverse()
        return grads


class Classifier:
    """K x D class prototypes; rows are normalized on every use, never in place."""

    def __init__(self, weights, frozen=False):
        self.weights = as_matrix(weights, "classifier")
        self.frozen = bool(frozen)

    @classmethod
    def init(cls, classes, dim, rng):
        """Gaussian directions scaled to unit-norm rows."""
        w = rng.gaussian(classes * dim).reshape(classes, dim)
        return cls(w / np.sqrt(np.sum(w * w, axis=1, keepdims=True)))

    @property
    def classes(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]

    def inherit(self):
        """Byte copy of this classifier marked frozen."""
        return Classifier(self.weights.copy(), frozen=True)

    def tobytes(self):
        return self.weights.astype("<f8").tobytes()


def _normalized_prototypes(clf):
    norms = np.sqrt(np.sum(clf.weights * clf.weights, axis=1))
    if np.any(norms < NORM_EPS):
        raise DegenerateClassifierError("classifier has a zero-norm prototype row")
    return clf.weights / norms[:, None], norms


def classifier_cosines(clf, embeddings):
    embeddings = as_matrix(embeddings, "embeddings")
    if embeddings.shape[1] != clf.dim:
        raise ShapeError(f"embedding dim {embeddings.shape[1]} != classifier dim {clf.dim}")
    w_hat, _ = _normalized_prototypes(clf)
    return embeddings @ w_hat.T


def forward_cosines(model, clf, x):
    emb, cache = model.forward(x)
    w_hat, w_norms = _normalized_prototypes(clf)
    if emb.shape[1] != clf.dim:
        raise ShapeError(f"embedding dim {emb.shape[1]} != classifier dim {clf.dim}")
    cache = dict(cache, w_hat=w_hat, w_norms=w_norms)
    return emb @ w_hat.T, cache


def classifier_backward(clf, grad_cos, emb, w_hat=None, w_norms=None):
    """Gradients w.r.t. embeddings and (unless frozen) raw prototype weights."""
    if w_hat is None:
        w_hat, w_norms = _normalized_prototypes(clf)
    grad_emb = grad_cos @ w_hat
    if clf.frozen:
        return grad_emb, None
    g_hat = grad_cos.T @ emb
    grad_w = (g_hat - w_hat * np.sum(w_hat * g_hat, axis=1, keepdims=True)) / w_norms[:, None]
    return grad_emb, grad_w


def model_backward(model, clf, grad_cos, cache):
    """Chain rule from cosine gradients to encoder and classifier parameters.

    Returns ``(encoder_grads, classifier_grad)``; the latter is None for a
    frozen classifier.
    """
    emb = cache["emb"]
    if grad_cos.shape != (emb.shape[0], clf.classes):
        raise ShapeError(f"grad_cos shape {grad_cos.shape} does not match cache {(emb.shape[0], clf.classes)}")
    grad_emb, grad_w = classifier_backward(clf, grad_cos, emb, cache["w_hat"], cache["w_norms"])
    return model.backward(grad_emb, cache), grad_w


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model, clf=None, loss_config=None, seed=None):
    """Write ``PXKD`` | u32 version | u32 len + JSON metadata | little-endian f64 payload."""
    meta = {
        "embed_dim": model.embed_dim,
        "layers": [{"d_out": l.d_out, "d_in": l.d_in, "activation": l.activation} for l in model.layers],
        "classifier": None if clf is None else {"classes": clf.classes, "dim": clf.dim, "frozen": clf.frozen},
        "loss": None if loss_config is None else loss_config.to_dict(),
        "seed": seed,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    for layer in model.layers:
        parts.append(layer.weight.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    if clf is not None:
        parts.append(clf.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, classifier_or_None, metadata)``."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise CorruptCheckpointError("header", f"file is {len(data)} bytes, too short for a header")
    if data[:4] != MAGIC:
        raise CorruptCheckpointError("header", f"bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(version)
    (meta_len,) = struct.unpack_from("<I", data, 8)
    if 12 + meta_len > len(data):
        raise CorruptCheckpointError("metadata", "truncated metadata block")
    try:
        meta = json.loads(data[12 : 12 + meta_len].decode("utf-8"))
        shapes = [(int(s["d_out"]), int(s["d_in"]), str(s["activation"])) for s in meta["layers"]]
        head = meta["classifier"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError("metadata", str(exc)) from None

    offset = 12 + meta_len

    def take(count, what):
        nonlocal offset
        end = offset + 8 * count
        if end > len(data):
            raise CorruptCheckpointError("payload", f"truncated while reading {what}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset = end
        return arr

    layers = []
    for i, (d_out, d_in, act) in enumerate(shapes):
        w = take(d_out * d_in, f"layer {i} weight").reshape(d_out, d_in)
        b = take(d_out, f"layer {i} bias")
        layers.append(Layer(w, b, act))
    clf = None
    if head is not None:
        w = take(head["classes"] * head["dim"], "classifier").reshape(head["classes"], head["dim"])
        clf = Classifier(w, frozen=head["frozen"])
    if offset != len(data):
        raise CorruptCheckpointError("payload", f"{len(data) - offset} trailing bytes")
    return EncoderModel(layers), clf, meta
