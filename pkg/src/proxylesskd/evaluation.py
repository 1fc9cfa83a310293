"""Cross-model evaluation: direction-averaged verification, TAR@FAR, rank-1
identification and intra/inter-class embedding statistics.

"Models" here are anything with an ``embed(features) -> unit rows`` method,
so a fused teacher pipeline evaluates the same way as a single encoder.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import GALLERY, PROBE
from .errors import ArgumentError, MissingGalleryError
from .numcore import Rng

HIST_BINS = 50
THRESHOLD_PROTOCOL = "single best-accuracy threshold over the full pair set"


@dataclass(frozen=True)
class PairSet:
    pairs: np.ndarray  # P x 2 row indices into the dataset
    genuine: np.ndarray  # P booleans

    def __len__(self):
        return len(self.genuine)


@dataclass
class EvalReport:
    mode: str
    verification: float
    tar: dict
    rank1: float
    intra_mean: float
    inter_mean: float
    histograms: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    threshold_protocol: str = THRESHOLD_PROTOCOL

    def to_dict(self):
        return asdict(self)


# -- pairs -------------------------------------------------------------------


def make_pairs(ds, genuine_per_class, impostor_count, seed, rows=None):
    """Seeded genuine/impostor pairs drawn without replacement from ``rows``.

    Genuine pairs come ``genuine_per_class`` per class; impostor pairs are
    rejection-sampled uniformly over all different-label pairs.
    """
    rows = np.arange(ds.n) if rows is None else np.asarray(rows)
    labels = ds.labels[rows]
    rng = Rng(seed)
    out, genuine = [], []
    for k in np.unique(labels):
        members = rows[labels == k]
        cand = [(int(a), int(b)) for i, a in enumerate(members) for b in members[i + 1 :]]
        if len(cand) < genuine_per_class:
            raise ArgumentError(f"class {k} offers {len(cand)} genuine pairs, {genuine_per_class} requested")
        for j in rng.permutation(len(cand))[:genuine_per_class]:
            out.append(cand[j])
            genuine.append(True)
    counts = np.bincount(labels)
    available = (len(rows) ** 2 - int(np.sum(counts ** 2))) // 2
    if impostor_count > available:
        raise ArgumentError(f"only {available} impostor pairs exist, {impostor_count} requested")
    seen = set()
    while len(seen) < impostor_count:
        i, j = rng.below(len(rows)), rng.below(len(rows))
        if labels[i] == labels[j]:
            continue
        key = (int(min(rows[i], rows[j])), int(max(rows[i], rows[j])))
        if key in seen:
            continue
        seen.add(key)
        out.append(key)
        genuine.append(False)
    return PairSet(np.array(out, dtype=np.int64).reshape(-1, 2), np.array(genuine, dtype=bool))


# -- verification ------------------------------------------------------------


def pair_scores(emb_first, emb_second, pairs):
    """Cosine of ``emb_first[i]`` with ``emb_second[j]`` for each pair (i, j)."""
    return np.sum(emb_first[pairs.pairs[:, 0]] * emb_second[pairs.pairs[:, 1]], axis=1)


def best_threshold_accuracy(scores, genuine):
    """Highest accuracy of the rule ``score >= t`` over t in observed scores and +inf.

    Returns ``(accuracy_fraction, threshold)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    genuine = np.asarray(genuine, dtype=bool)
    gen = np.sort(scores[genuine])
    imp = np.sort(scores[~genuine])
    if gen.size == 0 or imp.size == 0:
        raise ArgumentError("need at least one genuine and one impostor pair")
    cand = np.append(np.unique(scores), np.inf)
    accepted_gen = gen.size - np.searchsorted(gen, cand, side="left")
    rejected_imp = np.searchsorted(imp, cand, side="left")
    correct = accepted_gen + rejected_imp
    best = int(np.argmax(correct))
    return int(correct[best]) / scores.size, float(cand[best])


def _embed_rows(model, ds, rows):
    return model.embed(ds.features[rows])


def _pair_embeddings(model_a, model_b, ds, pairs):
    used = np.unique(pairs.pairs)
    remap = np.full(ds.n, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    local = PairSet(remap[pairs.pairs], pairs.genuine)
    emb_a = _embed_rows(model_a, ds, used)
    emb_b = emb_a if model_b is model_a else _embed_rows(model_b, ds, used)
    return emb_a, emb_b, local


def directional_scores(model_a, model_b, ds, pairs):
    """Scores for (a on first, b on second) and (b on first, a on second)."""
    emb_a, emb_b, local = _pair_embeddings(model_a, model_b, ds, pairs)
    return pair_scores(emb_a, emb_b, local), pair_scores(emb_b, emb_a, local)


def verification_accuracy(model_a, model_b, pairs, ds):
    """Mean of the two directional best-threshold accuracies, in percent."""
    forward, backward = directional_scores(model_a, model_b, ds, pairs)
    acc_fwd, _ = best_threshold_accuracy(forward, pairs.genuine)
    acc_bwd, _ = best_threshold_accuracy(backward, pairs.genuine)
    return 100.0 * (acc_fwd + acc_bwd) / 2.0


def tar_at_far(genuine_scores, impostor_scores, far_target):
    """True-accept rate at the smallest observed threshold whose false-accept rate <= target."""
    gen = np.sort(np.asarray(genuine_scores, dtype=np.float64))
    imp = np.sort(np.asarray(impostor_scores, dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise ArgumentError("score lists must be non-empty")
    if not 0.0 <= far_target <= 1.0:
        raise ArgumentError(f"far_target {far_target} outside [0, 1]")
    cand = np.append(np.unique(np.concatenate([gen, imp])), np.inf)
    false_acc = imp.size - np.searchsorted(imp, cand, side="left")
    ok = np.flatnonzero(false_acc <= far_target * imp.size)
    tau = cand[ok[0]]
    return int(gen.size - np.searchsorted(gen, tau, side="left")) / gen.size


# -- identification ------------------------------------------------------------


def rank1_identification(gallery_model, probe_model, ds, distractors=None):
    """Percent of probes whose most similar gallery entry has the same label.

    ``distractors`` are extra label-less gallery features embedded by the
    gallery model; ties go to the lowest gallery index.
    """
    g_rows, p_rows = ds.rows(GALLERY), ds.rows(PROBE)
    if g_rows.size == 0:
        raise MissingGalleryError("dataset has no gallery split")
    if p_rows.size == 0:
        raise ArgumentError("dataset has no probe split")
    gallery = _embed_rows(gallery_model, ds, g_rows)
    g_labels = ds.labels[g_rows]
    if distractors is not None and len(distractors):
        gallery = np.vstack([gallery, gallery_model.embed(distractors)])
        g_labels = np.concatenate([g_labels, np.full(len(distractors), -1)])
    probes = _embed_rows(probe_model, ds, p_rows)
    return rank1_from_embeddings(gallery, g_labels, probes, ds.labels[p_rows])


def rank1_from_embeddings(gallery, gallery_labels, probes, probe_labels):
    nearest = np.argmax(probes @ gallery.T, axis=1)
    hits = int(np.count_nonzero(gallery_labels[nearest] == probe_labels))
    return 100.0 * hits / len(probe_labels)


# -- embedding statistics ------------------------------------------------------


def histogram(values, bins=HIST_BINS):
    counts, edges = np.histogram(np.clip(values, -1.0, 1.0), bins=bins, range=(-1.0, 1.0))
    return counts, edges


def stats_from_embeddings(emb_a, emb_b, labels):
    """Intra/inter-class mean of cos(e_a(x), e_b(x')) over ordered pairs x != x'."""
    labels = np.asarray(labels)
    sims = emb_a @ emb_b.T
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    intra = sims[same & off_diag]
    inter = sims[~same]
    if intra.size == 0:
        raise ArgumentError("need a class with at least two samples")
    return {
        "intra_mean": float(np.mean(intra)),
        "inter_mean": float(np.mean(inter)) if inter.size else None,
        "intra_hist": histogram(intra)[0].tolist(),
        "inter_hist": histogram(inter)[0].tolist(),
    }


def embedding_stats(model_a, model_b, ds, rows=None):
    rows = np.arange(ds.n) if rows is None else np.asarray(rows)
    emb_a = _embed_rows(model_a, ds, rows)
    emb_b = emb_a if model_b is model_a else _embed_rows(model_b, ds, rows)
    return stats_from_embeddings(emb_a, emb_b, ds.labels[rows])


def evaluate(gallery_model, probe_model, ds, pairs, far_targets=(1e-2, 1e-3), mode="multiple",
             distractors=None, stat_rows=None):
    """Full report; single mode passes the same model as gallery and probe extractor."""
    forward, backward = directional_scores(gallery_model, probe_model, ds, pairs)
    acc_fwd, _ = best_threshold_accuracy(forward, pairs.genuine)
    acc_bwd, _ = best_threshold_accuracy(backward, pairs.genuine)
    tar = {}
    for far in far_targets:
        t = [tar_at_far(s[pairs.genuine], s[~pairs.genuine], far) for s in (forward, backward)]
        tar[f"{far:g}"] = 100.0 * (t[0] + t[1]) / 2.0
    rank1 = rank1_identification(gallery_model, probe_model, ds, distractors)
    stats = embedding_stats(gallery_model, probe_model, ds, stat_rows)
    flags = []
    if stats["inter_mean"] is not None and stats["intra_mean"] < stats["inter_mean"]:
        flags.append("intra-class mean cosine below inter-class mean cosine")
    return EvalReport(
        mode=mode,
        verification=100.0 * (acc_fwd + acc_bwd) / 2.0,
        tar=tar,
        rank1=rank1,
        intra_mean=stats["intra_mean"],
        inter_mean=stats["inter_mean"],
        histograms={"intra": stats["intra_hist"], "inter": stats["inter_hist"]},
        flags=flags,
    )
