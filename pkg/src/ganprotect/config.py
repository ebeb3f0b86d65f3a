"""Experiment configuration files.

One setting per line::

    # comment
    pipeline = train-classifier, protect, train-transform
    seed = 0
    cyclegan.lr = 0.0002              # trailing comments need a space before '#'
    classify.lr_drop_epochs = [60, 120, 160]
    data.train = "shapes?n=500&size=32&classes=2&seed=10"

Keys are dotted ``section.name`` (a few top-level keys have no section).
Values are JSON literals (numbers, ``true``/``false``, ``null``, quoted
strings, lists); anything else is read as a bare string. The full key list
lives in ``docs/config.md``.
"""
from __future__ import annotations

import json
import os
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path
from typing import Any
from urllib.parse import parse_qs

from .attacks import GaConfig, PairedConfig
from .classify import ClassifyConfig
from .imagedata import LOADERS, AugmentSpec
from .losses import LossWeights
from .models import KINDS, config_hash
from .protect import PerturbationSpec
from .transform_trainer import CycleGanConfig

PIPELINES = ("train-classifier", "protect", "train-transform", "transform", "attack", "classify", "metrics")
BUILTIN_SCHEMES = ("identity", "block_shuffle", "negpos")

# value kinds understood by the checker
INT, FLOAT, BOOL, STR, PATH, DATASET, INTS = "int", "float", "bool", "str", "path", "dataset", "int list"


def _kind_of(default) -> str:
    if isinstance(default, bool):
        return BOOL
    if isinstance(default, int):
        return INT
    if isinstance(default, float):
        return FLOAT
    if isinstance(default, tuple):
        return INTS
    return STR


def _dataclass_keys(cls, skip=()) -> dict[str, str]:
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not MISSING else None
        out[f.name] = _kind_of(default) if default is not None else STR
    return out


_CLASSIFIER_KEYS = {
    **_dataclass_keys(ClassifyConfig, skip=("augment",)),
    "crop_padding": INT, "horizontal_flip": BOOL,
    "dataset": DATASET, "test_dataset": DATASET,
}

SCHEMA: dict[str, dict[str, str]] = {
    "": {"pipeline": STR, "seed": INT, "out": STR},
    "data": {"root": PATH, "train": DATASET, "test": DATASET},
    "h_theta": dict(_CLASSIFIER_KEYS),
    "protect": {**_dataclass_keys(PerturbationSpec), "model": PATH, "dataset": DATASET,
                "batch": INT, "dtype": STR},
    "cyclegan": {**_dataclass_keys(CycleGanConfig, skip=("weights",)),
                 **_dataclass_keys(LossWeights),
                 "plain": DATASET, "protected": DATASET, "h_theta": PATH, "phi_weights": PATH,
                 "phi_random_init": BOOL, "resume": PATH, "log_every": INT},
    "transform": {"checkpoint": PATH, "dataset": DATASET},
    "attack": {**_dataclass_keys(GaConfig), **_dataclass_keys(PairedConfig),
               "kind": STR, "scheme": STR, "scheme_seed": INT, "dataset": DATASET,
               "test_dataset": DATASET, "results": STR, "run_id": STR},
    "classify": {**_CLASSIFIER_KEYS, "mode": STR, "transform": STR, "model": PATH,
                 "results": STR, "run_id": STR},
    "metrics": {"ref": DATASET, "test": DATASET, "luminance_only": BOOL, "report": STR,
                "results": STR, "run_id": STR},
}

ENUMS = {
    "classify.mode": ("train", "eval"),
    "attack.kind": ("ga", "paired"),
    "protect.dtype": ("float64", "float32"),
    "h_theta.normalize": ("dataset", "fixed", "none"),
    "classify.normalize": ("dataset", "fixed", "none"),
    "h_theta.arch": ("resnet18", "vgg13_bn", "toy_classifier"),
    "classify.arch": ("resnet18", "vgg13_bn", "toy_classifier"),
    "cyclegan.generator_arch": tuple(k for k, v in KINDS.items() if v == "generator"),
    "attack.generator": tuple(k for k, v in KINDS.items() if v == "generator"),
    "cyclegan.reconstruction_reduction": ("mean", "sum"),
}

# inputs a stage can take from an earlier stage of the same chain
PROVIDES = {
    "train-classifier": "h_theta_model",
    "protect": "protected",
    "train-transform": "transform_checkpoint",
    "transform": "transformed",
    "classify": "classifier",
}


class ConfigError(ValueError):
    def __init__(self, issues: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(issues))
        self.issues = issues


@dataclass
class ExperimentConfig:
    """Parsed settings: flat dotted keys plus the line each came from."""

    values: dict[str, Any] = field(default_factory=dict)
    lines: dict[str, int] = field(default_factory=dict)
    source: str = "<memory>"

    @property
    def pipeline(self) -> tuple[str, ...]:
        raw = self.values.get("pipeline", "")
        items = raw if isinstance(raw, list) else str(raw).split(",")
        return tuple(p.strip() for p in items if str(p).strip())

    @property
    def seed(self) -> int:
        return int(self.values.get("seed", 0))

    @property
    def out(self) -> Path:
        return Path(self.values.get("out", "runs/latest"))

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        vals = dict(self.values)
        vals.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig(vals, dict(self.lines), self.source)

    def hashable(self) -> dict[str, Any]:
        """Settings that define the experiment; the output location is excluded."""
        return {k: v for k, v in sorted(self.values.items()) if k != "out"}

    def hash(self) -> str:
        return config_hash(self.hashable())

    def to_text(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(self.values.items()))


# --- parsing -------------------------------------------------------------------

def _strip_comment(line: str) -> str:
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"' and (i == 0 or line[i - 1] != "\\"):
            in_str = not in_str
        elif ch == "#" and not in_str and (i == 0 or line[i - 1].isspace()):
            return line[:i]
    return line


def _literal(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_text(text: str, source: str = "<memory>") -> tuple[ExperimentConfig, list[str]]:
    """Parse config text; returns the config and syntax/schema issues (never raises)."""
    cfg = ExperimentConfig(source=source)
    issues = []
    seen: dict[str, int] = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            issues.append(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            issues.append(f"{source}:{no}: missing key")
            continue
        if key in seen:
            issues.append(f"{source}:{no}: duplicate key '{key}' (first set on line {seen[key]})")
            continue
        seen[key] = no
        section, _, name = key.rpartition(".")
        if section not in SCHEMA or name not in SCHEMA[section]:
            issues.append(f"{source}:{no}: unknown key '{key}'")
            continue
        val = _literal(value)
        problem = _type_problem(SCHEMA[section][name], val)
        if problem:
            issues.append(f"{source}:{no}: '{key}' {problem}")
            continue
        cfg.values[key] = val
        cfg.lines[key] = no
    return cfg, issues


def _type_problem(kind: str, val) -> str | None:
    if kind == INT and not (isinstance(val, int) and not isinstance(val, bool)):
        return f"must be an integer, got {val!r}"
    if kind == FLOAT and not (isinstance(val, (int, float)) and not isinstance(val, bool)):
        return f"must be a number, got {val!r}"
    if kind == BOOL and not isinstance(val, bool):
        return f"must be true or false, got {val!r}"
    if kind in (STR, PATH, DATASET) and not isinstance(val, str):
        return f"must be a string, got {val!r}"
    if kind == INTS and not (isinstance(val, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in val)):
        return f"must be a list of integers, got {val!r}"
    return None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    cfg, issues = parse_text(path.read_text(), str(path))
    if issues:
        raise ConfigError(issues)
    return cfg


# --- dataset references -----------------------------------------------------------

@dataclass(frozen=True)
class DatasetRef:
    """``cifar10[:split][?classes=0,1&limit=500]``, ``shapes?n=..&size=..`` or a directory."""

    kind: str  # named | shapes | dir
    name: str
    split: str = "train"
    options: tuple[tuple[str, str], ...] = ()

    @property
    def opts(self) -> dict[str, str]:
        return dict(self.options)


def parse_dataset_ref(ref: str, default_split: str = "train") -> DatasetRef:
    base, _, query = ref.partition("?")
    opts = tuple(sorted((k, v[-1]) for k, v in parse_qs(query, keep_blank_values=True).items()))
    head, _, split = base.partition(":")
    if head in LOADERS:
        return DatasetRef("named", head, split or default_split, opts)
    if head == "shapes":
        return DatasetRef("shapes", "shapes", split or default_split, opts)
    return DatasetRef("dir", ref, default_split, ())


def data_root(cfg: ExperimentConfig) -> str | None:
    return cfg.get("data.root") or os.environ.get("GANPROTECT_DATA")


def dataset_ref_problem(ref: str, cfg: ExperimentConfig) -> str | None:
    r = parse_dataset_ref(ref)
    if r.kind == "named":
        root = data_root(cfg)
        if not root:
            return f"dataset '{ref}' needs data.root or GANPROTECT_DATA"
        if not (Path(root) / r.name).is_dir():
            return f"dataset directory {Path(root) / r.name} does not exist"
        if r.split not in ("train", "test"):
            return f"unknown split '{r.split}'"
        unknown = set(r.opts) - {"classes", "limit"}
        if unknown:
            return f"unknown dataset options {sorted(unknown)}"
        return None
    if r.kind == "shapes":
        unknown = set(r.opts) - {"n", "size", "classes", "seed", "noise"}
        if unknown:
            return f"unknown shapes options {sorted(unknown)}"
        try:
            {k: float(v) for k, v in r.opts.items()}
        except ValueError:
            return f"non-numeric shapes option in '{ref}'"
        return None
    if not (Path(ref) / "dataset.json").is_file():
        return f"dataset directory '{ref}' not found (expected {Path(ref) / 'dataset.json'})"
    return None


# --- builders from sections ---------------------------------------------------------

def _pick(section: dict, cls, **extra):
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in section.items() if k in names}
    for k, v in kw.items():
        if isinstance(v, list):
            kw[k] = tuple(v)
    kw.update(extra)
    return cls(**kw)


def classify_config(section: dict, seed: int) -> ClassifyConfig:
    aug = AugmentSpec(crop_padding=section.get("crop_padding", 4),
                      horizontal_flip=section.get("horizontal_flip", True))
    return _pick(section, ClassifyConfig, augment=aug, seed=section.get("seed", seed))


def perturbation_spec(section: dict) -> PerturbationSpec:
    if "alpha" not in section and "epsilon" in section:
        rest = {k: v for k, v in section.items() if k in ("iterations", "clamp_lo", "clamp_hi")}
        return PerturbationSpec.with_epsilon(section["epsilon"], **rest)
    return _pick(section, PerturbationSpec)


def cyclegan_config(section: dict, seed: int) -> CycleGanConfig:
    weights = _pick(section, LossWeights)
    return _pick(section, CycleGanConfig, weights=weights, seed=section.get("seed", seed))


def attack_config(section: dict, seed: int):
    cls = GaConfig if section.get("kind", "ga") == "ga" else PairedConfig
    return _pick(section, cls, seed=section.get("seed", seed))


# --- validation ---------------------------------------------------------------------

def _required_inputs(stage: str, cfg: ExperimentConfig) -> list[tuple[str, str | None]]:
    """``(key, upstream output that can stand in for it)`` pairs a stage needs."""
    s = {
        "train-classifier": [("h_theta.dataset", "data.train")],
        "protect": [("protect.model", "h_theta_model"), ("protect.dataset", "data.train")],
        "train-transform": [("cyclegan.plain", "data.train"), ("cyclegan.protected", "protected"),
                            ("cyclegan.h_theta", "h_theta_model")],
        "transform": [("transform.checkpoint", "transform_checkpoint"), ("transform.dataset", "data.test")],
        "attack": [("attack.scheme", "transform_checkpoint"), ("attack.dataset", "data.train"),
                   ("attack.test_dataset", "data.test")],
        "classify": [("classify.dataset", "data.train")],
        "metrics": [("metrics.ref", "data.test"), ("metrics.test", "transformed")],
    }[stage]
    if stage == "classify" and cfg.get("classify.mode", "train") == "eval":
        s = [("classify.model", "classifier"), ("classify.test_dataset", "data.test")]
    if stage == "protect" and cfg.get("protect.model") is None and cfg.get("cyclegan.h_theta"):
        s[0] = ("protect.model", "cyclegan.h_theta")
    return s


def check_config(cfg: ExperimentConfig, check_paths: bool = True) -> list[str]:
    """Semantic checks over a parsed config; all problems are reported together."""
    src = cfg.source
    issues = []

    def where(key):
        return f"{src}:{cfg.lines[key]}" if key in cfg.lines else src

    if not cfg.values:
        return [f"{src}: no settings; 'pipeline' is required"]
    stages = cfg.pipeline
    if not stages:
        issues.append(f"{src}: 'pipeline' is required")
    for st in stages:
        if st not in PIPELINES:
            issues.append(f"{where('pipeline')}: 'pipeline' names unknown stage '{st}' (expected one of {', '.join(PIPELINES)})")
    for key, allowed in ENUMS.items():
        if key in cfg.values and cfg.values[key] not in allowed:
            issues.append(f"{where(key)}: '{key}' must be one of {', '.join(allowed)}, got {cfg.values[key]!r}")

    available: set[str] = set()
    for st in (s for s in stages if s in PIPELINES):
        for key, fallback in _required_inputs(st, cfg):
            if key in cfg.values:
                continue
            if fallback and (fallback in available or fallback in cfg.values):
                continue
            hint = f" (or run a stage producing it earlier in the pipeline)" if fallback and "." not in fallback else \
                (f" (or set {fallback})" if fallback else "")
            issues.append(f"{src}: '{key}' is required for stage '{st}'{hint}")
        if st == "train-transform" and not (cfg.get("cyclegan.phi_weights") or cfg.get("cyclegan.phi_random_init")):
            issues.append(f"{src}: stage 'train-transform' needs cyclegan.phi_weights "
                          "(pretrained VGG16 weights) or cyclegan.phi_random_init = true")
        if st in PROVIDES:
            available.add(PROVIDES[st])

    if check_paths:
        for key, val in cfg.values.items():
            section, _, name = key.rpartition(".")
            kind = SCHEMA.get(section, {}).get(name)
            if kind == PATH and not Path(val).exists():
                issues.append(f"{where(key)}: '{key}' path does not exist: {val}")
            elif kind == DATASET:
                problem = dataset_ref_problem(val, cfg)
                if problem:
                    issues.append(f"{where(key)}: '{key}': {problem}")
        for key in ("attack.scheme", "classify.transform"):
            val = cfg.values.get(key)
            if val and val not in BUILTIN_SCHEMES + ("none",) and not Path(val).is_file():
                issues.append(f"{where(key)}: '{key}' is neither a built-in name nor an existing checkpoint: {val}")

    builders = {
        "h_theta": lambda s: classify_config(s, cfg.seed),
        "classify": lambda s: classify_config(s, cfg.seed),
        "protect": perturbation_spec,
        "cyclegan": lambda s: cyclegan_config(s, cfg.seed),
        "attack": lambda s: attack_config(s, cfg.seed),
    }
    for name, build in builders.items():
        sec = cfg.section(name)
        if not sec:
            continue
        try:
            build(sec)
        except (ValueError, TypeError) as exc:
            issues.append(f"{src}: section '{name}': {exc}")
    return issues


def validate(path) -> list[str]:
    """All problems with the config file at ``path``; an empty list means valid."""
    path = Path(path)
    if not path.is_file():
        return [f"{path}: no such file"]
    cfg, issues = parse_text(path.read_text(), str(path))
    return issues + check_config(cfg)
