"""Sectioned ``key = value`` experiment configuration.

Grammar: ``[section]`` headers, ``key = value`` lines, ``#`` comments
(whole-line or trailing), no nesting. Every key is typed; unknown keys,
type mismatches and missing required keys raise :class:`ParseError`
carrying the offending line number.
"""

import math
import os
from dataclasses import dataclass, field

from .errors import ParseError

REQUIRED = object()

VARIANTS = ("softmax", "asoftmax", "cosface", "arcface")
METHODS = ("proxyless", "l2kd", "scratch")


def _int(text):
    return int(text)


def _float(text):
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("not finite")
    return value


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(text)


def _list(item):
    def parse(text):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(item(p) for p in parts)
    return parse


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _subset(*options):
    def parse(text):
        items = _list(str)(text)
        bad = [x for x in items if x not in options]
        if bad:
            raise ValueError(f"unknown entries {bad}; allowed {', '.join(options)}")
        return items
    return parse


def _text(text):
    return text


# section -> key -> (parser, default). REQUIRED marks keys without a default.
SCHEMA = {
    "data": {
        "source": (_choice("synthetic", "csv"), REQUIRED),
        "path": (_text, ""),
        "classes": (_int, 64),
        "per_class": (_int, 150),
        "d_in": (_int, 32),
        "kappa": (_float, 30.0),
        "gallery_per_class": (_int, 2),
        "probe_per_class": (_int, 8),
        "genuine_per_class": (_int, 20),
        "impostor_pairs": (_int, 1280),
        "distractors": (_int, 0),
        "distractor_kappa": (_float, 30.0),
    },
    "teacher": {
        "count": (_int, 1),
        "hidden": (_list(_int), (512, 512, 512, 512)),
        "embed_dim": (_int, 16),
        "epochs": (_int, 8),
        "batch_size": (_int, 32),
        "loss": (_choice(*VARIANTS), "arcface"),
        "m": (_float, 0.5),
        "s": (_float, 64.0),
        "lr0": (_float, 0.004),
        "momentum": (_float, 0.9),
        "weight_decay": (_float, 4e-5),
    },
    "fusion": {
        "method": (_choice("none", "pca", "linear"), "none"),
        "epochs": (_int, 8),
        "batch_size": (_int, 32),
        "lr0": (_float, 0.01),
    },
    "student": {
        "hidden": (_list(_int), (64, 64)),
        "epochs": (_int, 16),
        "batch_size": (_int, 32),
        "loss": (_choice(*VARIANTS), "arcface"),
        "m": (_float, 0.5),
        "s": (_float, 64.0),
        "lr0": (_float, 0.01),
        "momentum": (_float, 0.9),
        "weight_decay": (_float, 4e-5),
    },
    "distill": {
        "methods": (_subset(*METHODS), METHODS),
        "loss": (_choice(*VARIANTS), "arcface"),
        "m": (_float, 0.5),
        "s": (_float, 64.0),
        "lr0": (_float, 0.01),
        "l2_lr0": (_float, 0.05),
        "margins": (_list(_float), ()),
    },
    "eval": {
        "far": (_list(_float), (1e-2, 1e-3)),
        "modes": (_subset("single", "multiple"), ("single", "multiple")),
    },
    "run": {
        "seeds": (_list(_int), REQUIRED),
        "checkpoints": (_bool, True),
        "plots": (_bool, True),
    },
}

ALIASES = {"margin": "m", "scale": "s"}


@dataclass
class ExperimentConfig:
    values: dict
    defaulted: set = field(default_factory=set)
    base_dir: str = "."

    def __getitem__(self, section):
        return self.values[section]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values

    def with_overrides(self, seeds=None, methods=None):
        values = {sec: dict(keys) for sec, keys in self.values.items()}
        defaulted = set(self.defaulted)
        if seeds is not None:
            values["run"]["seeds"] = tuple(seeds)
            defaulted.discard(("run", "seeds"))
        if methods is not None:
            values["distill"]["methods"] = _subset(*METHODS)(",".join(methods))
            defaulted.discard(("distill", "methods"))
        return ExperimentConfig(values, defaulted, self.base_dir)

    def data_path(self):
        path = self.values["data"]["path"]
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


def _check_ranges(values, lines):
    def fail(sec, key, msg):
        raise ParseError(f"[{sec}] {key}: {msg}", lines.get((sec, key), 0))

    positive = [
        ("data", "classes"), ("data", "per_class"), ("data", "d_in"), ("data", "kappa"),
        ("data", "genuine_per_class"), ("data", "distractor_kappa"),
        ("teacher", "count"), ("teacher", "embed_dim"), ("teacher", "batch_size"), ("teacher", "s"),
        ("fusion", "batch_size"), ("student", "batch_size"), ("student", "s"), ("distill", "s"),
    ]
    for sec, key in positive:
        if not values[sec][key] > 0:
            fail(sec, key, "must be positive")
    non_negative = [
        ("data", "gallery_per_class"), ("data", "probe_per_class"), ("data", "impostor_pairs"),
        ("data", "distractors"), ("teacher", "epochs"), ("fusion", "epochs"), ("student", "epochs"),
        ("teacher", "lr0"), ("fusion", "lr0"), ("student", "lr0"), ("distill", "lr0"), ("distill", "l2_lr0"),
        ("teacher", "weight_decay"), ("student", "weight_decay"),
    ]
    for sec, key in non_negative:
        if values[sec][key] < 0:
            fail(sec, key, "must be non-negative")
    for sec in ("teacher", "student"):
        if not 0.0 <= values[sec]["momentum"] < 1.0:
            fail(sec, "momentum", "must lie in [0, 1)")
    for far in values["eval"]["far"]:
        if not 0.0 <= far <= 1.0:
            fail("eval", "far", f"{far} outside [0, 1]")
    if not values["run"]["seeds"]:
        fail("run", "seeds", "at least one seed required")
    if values["fusion"]["method"] != "none" and values["teacher"]["count"] < 2:
        fail("fusion", "method", "fusion needs [teacher] count >= 2")
    if values["fusion"]["method"] == "none" and values["teacher"]["count"] > 1:
        fail("teacher", "count", "several teachers need a [fusion] method")
    if values["data"]["source"] == "csv" and not values["data"]["path"]:
        fail("data", "path", "required when source = csv")


def parse_config_text(text, base_dir=".", name="<config>"):
    values = {sec: {} for sec in SCHEMA}
    lines = {}
    section_lines = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ParseError(f"unknown section [{section}]", lineno)
            if section in section_lines:
                raise ParseError(f"section [{section}] repeated", lineno)
            section_lines[section] = lineno
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ParseError("key outside of any section", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        key = ALIASES.get(key, key)
        if key not in SCHEMA[section]:
            raise ParseError(f"unknown key {key!r} in [{section}]", lineno)
        if (section, key) in lines:
            raise ParseError(f"key {key!r} repeated in [{section}]", lineno)
        parser = SCHEMA[section][key][0]
        try:
            values[section][key] = parser(value)
        except ValueError as exc:
            raise ParseError(f"bad value {value!r} for [{section}] {key}: {exc}", lineno) from None
        lines[(section, key)] = lineno
    defaulted = set()
    for sec, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            if key in values[sec]:
                continue
            if default is REQUIRED:
                where = section_lines.get(sec, len(text.splitlines()))
                raise ParseError(f"{name}: missing required key [{sec}] {key}", where)
            values[sec][key] = default
            defaulted.add((sec, key))
    _check_ranges(values, lines)
    cfg = ExperimentConfig(values, defaulted, base_dir)
    if values["data"]["source"] == "csv" and not os.path.isfile(cfg.data_path()):
        raise ParseError(f"data path {cfg.data_path()!r} not found", lines[("data", "path")])
    return cfg


def parse_config(path):
    """Read and validate an experiment config file; defaults are filled and recorded."""
    with open(path) as fh:
        text = fh.read()
    return parse_config_text(text, os.path.dirname(os.path.abspath(path)), str(path))


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg):
    """Effective config as text that parses back to an equal config."""
    out = []
    for sec, keys in SCHEMA.items():
        out.append(f"[{sec}]")
        for key in keys:
            value = cfg.values[sec][key]
            note = "  # default" if (sec, key) in cfg.defaulted else ""
            out.append(f"{key} = {_format(value)}{note}")
        out.append("")
    return "\n".join(out)


def config_to_dict(cfg):
    return {sec: {k: list(v) if isinstance(v, tuple) else v for k, v in keys.items()}
            for sec, keys in cfg.values.items()}
