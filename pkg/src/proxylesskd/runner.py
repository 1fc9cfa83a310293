"""Config-driven experiment pipeline: data, teacher(s), optional fusion,
distillation methods, two-mode evaluation, metrics document and plot data."""

import contextlib
import csv
import json
import logging
import math
import os
import time

import numpy as np

from . import __version__
from .config import config_to_dict, config_to_text
from .data import GALLERY, PROBE, TRAIN, SynthConfig, generate_distractors, generate_synthetic, load_csv, make_splits
from .distill import (
    EncoderConfig,
    FusedTeacher,
    TrainSettings,
    distill_l2,
    distill_proxyless,
    fuse_teachers,
    train_scratch,
    train_teacher,
)
from .errors import InvariantViolation
from .evaluation import HIST_BINS, THRESHOLD_PROTOCOL, evaluate, make_pairs
from .losses import LossConfig
from .model import EncoderModel, Layer, save_checkpoint
from .numcore import derive_seed
from .optim import OptimConfig

log = logging.getLogger(__name__)

FORMAT = "proxylesskd-metrics"
FORMAT_VERSION = 1
METRICS_FILE = "metrics.json"

# seed-tree branches under each run seed
_DATA, _SPLIT, _PAIRS, _TEACHER, _FUSION, _SCRATCH, _PROXYLESS, _L2KD, _DISTRACTORS = range(9)


@contextlib.contextmanager
def stage(name, timings=None):
    """Tag any exception escaping the block with the pipeline stage it came from."""
    start = time.perf_counter()
    try:
        yield
    except Exception as exc:
        if not hasattr(exc, "stage"):
            exc.stage = name
        raise
    if timings is not None:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


def build_dataset(cfg, seed):
    """Dataset with splits, the verification pairs and the distractor features for one seed."""
    d = cfg["data"]
    if d["source"] == "csv":
        ds = load_csv(cfg.data_path())
    else:
        ds = generate_synthetic(SynthConfig(d["classes"], d["per_class"], d["d_in"], d["kappa"],
                                            derive_seed(seed, _DATA)))
    ds = make_splits(ds, d["gallery_per_class"], d["probe_per_class"], derive_seed(seed, _SPLIT))
    held = np.concatenate([ds.rows(GALLERY), ds.rows(PROBE)])
    pairs = make_pairs(ds, d["genuine_per_class"], d["impostor_pairs"], derive_seed(seed, _PAIRS), rows=held)
    distractors = None
    if d["distractors"]:
        distractors = generate_distractors(d["distractors"], 1, ds.d_in, d["distractor_kappa"],
                                           derive_seed(seed, _DISTRACTORS))
    return ds, pairs, held, distractors


def _optim(sec, lr0=None):
    return OptimConfig(lr0=sec["lr0"] if lr0 is None else lr0, momentum=sec["momentum"],
                       weight_decay=sec["weight_decay"])


def _loss(sec, m=None):
    return LossConfig(sec["loss"], sec["m"] if m is None else m, sec["s"])


def _train_dict(report):
    """TrainReport without its wall-clock field (timing lives elsewhere)."""
    out = report.to_dict()
    out.pop("wall_seconds", None)
    return out


class _Outputs:
    """Tracks every file written so the manifest is complete and failures can clean up."""

    def __init__(self, root):
        self.root = root
        self.files = []
        self.dirs = []

    def path(self, rel):
        full = os.path.join(self.root, rel)
        parent = os.path.dirname(full)
        missing = []
        while parent and not os.path.isdir(parent):
            missing.append(parent)
            parent = os.path.dirname(parent)
        for p in reversed(missing):
            os.mkdir(p)
            self.dirs.append(p)
        self.files.append(rel)
        return full

    def remove_all(self):
        for rel in self.files:
            with contextlib.suppress(OSError):
                os.remove(os.path.join(self.root, rel))
        for d in reversed(self.dirs):
            with contextlib.suppress(OSError):
                os.rmdir(d)


def _run_seed(cfg, seed, out, timings):
    t_sec, f_sec, s_sec, k_sec = cfg["teacher"], cfg["fusion"], cfg["student"], cfg["distill"]
    far = cfg["eval"]["far"]
    modes = cfg["eval"]["modes"]
    save = cfg["run"]["checkpoints"]
    result = {"seed": seed}

    with stage("data", timings):
        ds, pairs, held, distractors = build_dataset(cfg, seed)
    result["dataset"] = {
        "train": int(ds.rows(TRAIN).size), "gallery": int(ds.rows(GALLERY).size),
        "probe": int(ds.rows(PROBE).size), "classes": int(ds.classes), "d_in": int(ds.d_in),
        "genuine_pairs": int(pairs.genuine.sum()), "impostor_pairs": int((~pairs.genuine).sum()),
        "distractors": 0 if distractors is None else int(len(distractors)),
    }

    def report(gallery, probe, mode):
        return evaluate(gallery, probe, ds, pairs, far, mode, distractors, held).to_dict()

    t_enc = EncoderConfig(tuple(t_sec["hidden"]), t_sec["embed_dim"])
    t_settings = TrainSettings(t_sec["epochs"], t_sec["batch_size"])
    teachers, t_reports = [], []
    with stage("teacher", timings):
        for i in range(t_sec["count"]):
            model, clf, rep = train_teacher(t_enc, _loss(t_sec), ds, _optim(t_sec),
                                            derive_seed(seed, _TEACHER, i), t_settings)
            if save:
                rel = f"checkpoints/teacher{i}_seed{seed}.pxkd"
                save_checkpoint(out.path(rel), model, clf, _loss(t_sec), rep.seed)
                rep.checkpoint = rel
            teachers.append((model, clf))
            t_reports.append(_train_dict(rep))
    result["teacher"] = {"train": t_reports}

    if len(teachers) > 1:
        with stage("fusion", timings):
            fmap = fuse_teachers([t for t, _ in teachers], ds, f_sec["method"], t_sec["embed_dim"], _loss(t_sec),
                                 OptimConfig(lr0=f_sec["lr0"], momentum=t_sec["momentum"],
                                             weight_decay=t_sec["weight_decay"]),
                                 derive_seed(seed, _FUSION), TrainSettings(f_sec["epochs"], f_sec["batch_size"]))
            extractor, t_clf = FusedTeacher([t for t, _ in teachers], fmap), fmap.classifier
            rep = fmap.report
            if save:
                rel = f"checkpoints/fusion_seed{seed}.pxkd"
                reducer = EncoderModel([Layer(fmap.projection, fmap.bias, "none")])
                save_checkpoint(out.path(rel), reducer, t_clf, _loss(t_sec), rep.seed)
                rep.checkpoint = rel
            result["fusion"] = {"method": fmap.method, "explained_variance": fmap.explained_variance,
                                "warnings": list(fmap.warnings), "train": _train_dict(rep)}
    else:
        extractor, t_clf = teachers[0]
        result["fusion"] = None

    with stage("eval", timings):
        result["teacher"]["self"] = report(extractor, extractor, "single")

    s_enc = EncoderConfig(tuple(s_sec["hidden"]), t_sec["embed_dim"])
    s_settings = TrainSettings(s_sec["epochs"], s_sec["batch_size"])
    methods = {}
    for name in k_sec["methods"]:
        with stage(name, timings):
            clf = None
            if name == "scratch":
                model, clf, rep = train_scratch(s_enc, _loss(s_sec), ds, _optim(s_sec),
                                                derive_seed(seed, _SCRATCH), s_settings)
                loss = _loss(s_sec)
            elif name == "proxyless":
                model, rep = distill_proxyless(s_enc, t_clf, _loss(k_sec), ds, _optim(s_sec, k_sec["lr0"]),
                                               derive_seed(seed, _PROXYLESS), s_settings)
                clf, loss = t_clf.inherit(), _loss(k_sec)
            else:
                model, rep = distill_l2(s_enc, extractor, ds, _optim(s_sec, k_sec["l2_lr0"]),
                                        derive_seed(seed, _L2KD), s_settings)
                loss = None
            if save:
                rel = f"checkpoints/{name}_seed{seed}.pxkd"
                save_checkpoint(out.path(rel), model, clf, loss, rep.seed)
                rep.checkpoint = rel
        with stage("eval", timings):
            entry = {"train": _train_dict(rep)}
            if "single" in modes:
                entry["single"] = report(model, model, "single")
            if "multiple" in modes:
                entry["multiple"] = report(extractor, model, "multiple")
            methods[name] = entry
    result["methods"] = methods

    sweep = []
    for m in k_sec["margins"]:
        with stage("sweep", timings):
            model, rep = distill_proxyless(s_enc, t_clf, _loss(k_sec, m), ds, _optim(s_sec, k_sec["lr0"]),
                                           derive_seed(seed, _PROXYLESS), s_settings)
            sweep.append({"m": m, "train": _train_dict(rep), "single": report(model, model, "single"),
                          "multiple": report(extractor, model, "multiple")})
    result["sweep"] = sweep
    return result


def _summary(runs):
    out = {}
    names = list(runs[0]["methods"]) if runs else []
    for name in names:
        out[name] = {}
        for mode in ("single", "multiple"):
            if mode not in runs[0]["methods"][name]:
                continue
            reps = [r["methods"][name][mode] for r in runs]
            out[name][mode] = {
                "verification_mean": math.fsum(r["verification"] for r in reps) / len(reps),
                "rank1_mean": math.fsum(r["rank1"] for r in reps) / len(reps),
            }
    if runs:
        reps = [r["teacher"]["self"] for r in runs]
        out["teacher"] = {"single": {
            "verification_mean": math.fsum(r["verification"] for r in reps) / len(reps),
            "rank1_mean": math.fsum(r["rank1"] for r in reps) / len(reps),
        }}
    return out


def _check_finite(node, where="document"):
    if isinstance(node, float) and not math.isfinite(node):
        raise InvariantViolation(f"non-finite number at {where}")
    if isinstance(node, dict):
        for k, v in node.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(node, (list, tuple)):
        for i, v in enumerate(node):
            _check_finite(v, f"{where}[{i}]")


def dumps(doc):
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def run_experiment(cfg, out_dir):
    """Run every seed of ``cfg``, write ``metrics.json`` plus plot CSVs and checkpoints into ``out_dir``.

    Returns the metrics document. On any error the files written so far are
    removed and the exception propagates with a ``stage`` attribute.
    """
    start = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    out = _Outputs(out_dir)
    per_seed = []
    try:
        runs = []
        for seed in cfg["run"]["seeds"]:
            timings = {}
            log.info("seed %d", seed)
            runs.append(_run_seed(cfg, seed, out, timings))
            per_seed.append({"seed": seed, "stages": timings})
        doc = {
            "format": FORMAT,
            "format_version": FORMAT_VERSION,
            "library_version": __version__,
            "config": config_to_dict(cfg),
            "config_text": config_to_text(cfg),
            "defaulted": sorted(f"{sec}.{key}" for sec, key in cfg.defaulted),
            "threshold_protocol": THRESHOLD_PROTOCOL,
            "histogram_bins": HIST_BINS,
            "runs": runs,
            "summary": _summary(runs),
            "manifest": [],
        }
        if cfg["run"]["plots"]:
            with stage("plots"):
                emit_plot_data(doc, out_dir, _outputs=out)
        out.path(METRICS_FILE)
        doc["manifest"] = sorted(out.files)
        doc["timing"] = {"total_seconds": time.perf_counter() - start, "per_seed": per_seed}
        _check_finite({k: v for k, v in doc.items() if k != "timing"})
        with stage("write"):
            with open(os.path.join(out_dir, METRICS_FILE), "w") as fh:
                fh.write(dumps(doc))
    except BaseException:
        out.remove_all()
        raise
    return doc


def without_timing(doc):
    """The deterministic part of a metrics document."""
    return {k: v for k, v in doc.items() if k != "timing"}


# -- plot data -------------------------------------------------------------------


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _hist_rows(counts):
    edges = np.linspace(-1.0, 1.0, len(counts) + 1)
    return [(repr(float(edges[i])), repr(float(edges[i + 1])), int(c)) for i, c in enumerate(counts)]


def plot_file_names(doc):
    """The documented CSV set for ``doc``, in writing order."""
    names = []
    for run in doc["runs"]:
        s = run["seed"]
        for kind in ("intra", "inter"):
            names.append(f"plots/hist_teacher_single_{kind}_seed{s}.csv")
        for method, entry in run["methods"].items():
            for mode in ("single", "multiple"):
                if mode in entry:
                    for kind in ("intra", "inter"):
                        names.append(f"plots/hist_{method}_{mode}_{kind}_seed{s}.csv")
    names += ["plots/margin_sweep.csv", "plots/margin_sweep_losses.csv"]
    return names


def emit_plot_data(doc, out_dir, _outputs=None):
    """Write intra/inter histogram CSVs (bin_left, bin_right, count) and the margin-sweep CSVs.

    Returns the written paths relative to ``out_dir``.
    """
    out = _outputs or _Outputs(out_dir)
    written = []

    def hist(rel, report, kind):
        _write_csv(out.path(rel), ("bin_left", "bin_right", "count"), _hist_rows(report["histograms"][kind]))
        written.append(rel)

    for run in doc["runs"]:
        s = run["seed"]
        for kind in ("intra", "inter"):
            hist(f"plots/hist_teacher_single_{kind}_seed{s}.csv", run["teacher"]["self"], kind)
        for method, entry in run["methods"].items():
            for mode in ("single", "multiple"):
                if mode in entry:
                    for kind in ("intra", "inter"):
                        hist(f"plots/hist_{method}_{mode}_{kind}_seed{s}.csv", entry[mode], kind)

    rows, loss_rows = [], []
    for run in doc["runs"]:
        for point in run["sweep"]:
            rows.append((repr(point["m"]), run["seed"], repr(point["train"]["losses"][-1]),
                         repr(point["single"]["verification"]), repr(point["multiple"]["verification"]),
                         repr(point["multiple"]["rank1"])))
            for epoch, value in enumerate(point["train"]["losses"], start=1):
                loss_rows.append((repr(point["m"]), run["seed"], epoch, repr(value)))
    rel = "plots/margin_sweep.csv"
    _write_csv(out.path(rel), ("m", "seed", "final_loss", "verification_single", "verification_multiple",
                               "rank1_multiple"), rows)
    written.append(rel)
    rel = "plots/margin_sweep_losses.csv"
    _write_csv(out.path(rel), ("m", "seed", "epoch", "loss"), loss_rows)
    written.append(rel)
    return written
