"""Command-line entry point and pipeline runner.

``run(cfg)`` executes the stages named in ``cfg.pipeline`` in order. Each
stage writes into ``<out>/<stage>/``, and a later stage picks up an earlier
stage's output for any input it was not given explicitly. Every run leaves
``<out>/manifest.json`` behind, including failed ones.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy
import torch

from . import __version__
from .attacks import evaluate_attack, scheme_by_name, train_ga, train_paired_attack
from .classify import evaluate_accuracy, train_classifier
from .config import (
    ConfigError, ExperimentConfig, attack_config, check_config, classify_config,
    cyclegan_config, data_root, load_config, parse_dataset_ref, parse_text, perturbation_spec,
)
from .imagedata import LabeledDataset, load_dataset_dir, load_named, save_dataset_dir, select_classes
from .metrics import SsimParams, report, ssim_batch
from .models import NetworkSpec, build, load_checkpoint, save_checkpoint
from .protect import mean_cross_entropy, protect_dataset
from .synthetic import make_shapes
from .transform_trainer import Transform, TrainingError, load_transform, stream_seed, train_cyclegan, transform

log = logging.getLogger("ganprotect")

EXIT_OK, EXIT_FAILED, EXIT_INVALID = 0, 1, 2


# --- manifest ------------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def checksums(paths: dict[str, Path], root: Path) -> dict[str, str]:
    """sha256 of every file under the given outputs, keyed by path relative to ``root``."""
    out = {}
    for p in paths.values():
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f.relative_to(root))] = sha256_file(f)
    return out


@dataclass
class StageRecord:
    name: str
    status: str = "pending"
    wall_time: float = 0.0
    outputs: dict[str, str] = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    error: str | None = None
    last_checkpoint: str | None = None


@dataclass
class RunManifest:
    config_hash: str
    config: dict
    seed: int
    pipeline: list[str]
    versions: dict[str, str]
    stages: list[StageRecord] = field(default_factory=list)
    status: str = "running"
    wall_time: float = 0.0

    def stage(self, name: str) -> StageRecord:
        return next(s for s in self.stages if s.name == name)

    @property
    def output_checksums(self) -> dict[str, str]:
        out = {}
        for s in self.stages:
            out.update(s.checksums)
        return out

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        d["stages"] = [StageRecord(**s) for s in d["stages"]]
        return cls(**d)


def versions() -> dict[str, str]:
    return {"ganprotect": __version__, "python": platform.python_version(),
            "torch": torch.__version__, "numpy": np.__version__, "scipy": scipy.__version__}


# --- run context -------------------------------------------------------------

class RunContext:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.produced: dict[str, str] = {}
        self.last_checkpoint: str | None = None
        self._datasets: dict[tuple[str, str], LabeledDataset] = {}

    def first(self, *keys):
        """First configured value or upstream output among ``keys``."""
        for k in keys:
            if k in self.cfg.values:
                return self.cfg.values[k]
            if k in self.produced:
                return self.produced[k]
        return None

    def dataset(self, ref: str | None, default_split: str = "train") -> LabeledDataset:
        if ref is None:
            raise ValueError("no dataset configured")
        key = (ref, default_split)
        if key not in self._datasets:
            self._datasets[key] = load_dataset_ref(ref, default_split, data_root(self.cfg))
        return self._datasets[key]

    def results_path(self, section: str) -> Path:
        return Path(self.cfg.get(f"{section}.results", self.out / "results.csv"))

    def run_id(self, section: str) -> str:
        return self.cfg.get(f"{section}.run_id", f"{self.cfg.hash()[:8]}-{section}")


def load_dataset_ref(ref: str, default_split: str = "train", root=None) -> LabeledDataset:
    r = parse_dataset_ref(ref, default_split)
    opts = r.opts
    if r.kind == "named":
        d = load_named(r.name, r.split, root)
        if "classes" in opts or "limit" in opts:
            classes = [int(c) for c in opts["classes"].split(",")] if "classes" in opts else range(d.num_classes)
            d = select_classes(d, classes, int(opts["limit"]) if "limit" in opts else None)
        return d
    if r.kind == "shapes":
        return make_shapes(int(opts.get("n", 500)), int(opts.get("size", 32)), int(opts.get("classes", 2)),
                           seed=int(opts.get("seed", 0)), noise=float(opts.get("noise", 0.02)), name=ref)
    return load_dataset_dir(ref)


def _load_model(path: str, prefer=("h_theta", "classifier")):
    handles, meta = load_checkpoint(path)
    for name in prefer:
        if name in handles:
            return handles[name].eval(), meta
    if len(handles) == 1:
        return next(iter(handles.values())).eval(), meta
    raise ValueError(f"{path}: cannot tell which model to use among {sorted(handles)}")


def _ssim_ok(d: LabeledDataset) -> bool:
    return len(d) > 0 and min(d.image_shape[1:]) >= SsimParams().window


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# --- stages -------------------------------------------------------------------

def stage_train_classifier(ctx: RunContext, d: Path) -> dict[str, Path]:
    sec = ctx.cfg.section("h_theta")
    cfg = classify_config(sec, ctx.cfg.seed)
    train = ctx.dataset(ctx.first("h_theta.dataset", "data.train"))
    test_ref = ctx.first("h_theta.test_dataset", "data.test")
    test = ctx.dataset(test_ref, "test") if test_ref else None
    model, history = train_classifier(train, None, cfg, test)
    ckpt = save_checkpoint(d / "h_theta.pt", {"h_theta": model}, asdict(cfg), cfg.epochs)
    hist = _write_json(d / "history.json", history)
    ctx.produced["h_theta_model"] = str(ckpt)
    return {"model": ckpt, "history": hist}


def stage_protect(ctx: RunContext, d: Path) -> dict[str, Path]:
    sec = ctx.cfg.section("protect")
    spec = perturbation_spec(sec)
    h, _ = _load_model(ctx.first("protect.model", "cyclegan.h_theta", "h_theta_model"))
    X = ctx.dataset(ctx.first("protect.dataset", "data.train"))
    dtype = torch.float32 if sec.get("dtype") == "float32" else torch.float64
    P = protect_dataset(X, h, spec, batch=sec.get("batch", 64), dtype=dtype)
    out = save_dataset_dir(d / "protected", P)
    stats = {
        "spec": asdict(spec), "n": len(P),
        "mean_ce_plain": mean_cross_entropy(h, X.images, X.labels),
        "mean_ce_protected": mean_cross_entropy(h, P.images, P.labels),
        "mean_ssim_to_plain": float(ssim_batch(X.images, P.images).mean()) if _ssim_ok(P) else None,
    }
    rep = _write_json(d / "protect_report.json", stats)
    ctx.produced["protected"] = str(out)
    return {"protected": out, "report": rep}


def stage_train_transform(ctx: RunContext, d: Path) -> dict[str, Path]:
    sec = ctx.cfg.section("cyclegan")
    cfg = cyclegan_config(sec, ctx.cfg.seed)
    X = ctx.dataset(ctx.first("cyclegan.plain", "protect.dataset", "data.train"))
    P = ctx.dataset(ctx.first("cyclegan.protected", "protected"))
    h, _ = _load_model(ctx.first("cyclegan.h_theta", "protect.model", "h_theta_model"))
    if sec.get("phi_weights"):
        phi = build(NetworkSpec("vgg16_features", weights_path=sec["phi_weights"]))
    else:
        phi = build(NetworkSpec("vgg16_features", allow_random_init=True))
    ckdir = d / "checkpoints"
    try:
        res = train_cyclegan(X, P, h, phi, cfg, out_dir=ckdir, resume_from=sec.get("resume"),
                             log_every=sec.get("log_every", 0))
    except TrainingError as exc:
        ctx.last_checkpoint = exc.last_checkpoint
        raise
    ctx.last_checkpoint = res.trainer.last_checkpoint
    ctx.produced["transform_checkpoint"] = str(ckdir / "latest.pt")
    return {"checkpoints": ckdir}


def stage_transform(ctx: RunContext, d: Path) -> dict[str, Path]:
    G = load_transform(ctx.first("transform.checkpoint", "transform_checkpoint"))
    D = ctx.dataset(ctx.first("transform.dataset", "data.test"), "test")
    T = D.with_images(transform(G, D.images), name=f"{D.name}/transformed")
    out = save_dataset_dir(d / "transformed", T)
    rep = _write_json(d / "transform_report.json",
                      {"n": len(T), "mean_ssim_to_source":
                       float(ssim_batch(D.images, T.images).mean()) if _ssim_ok(T) else None})
    ctx.produced["transformed"] = str(out)
    return {"transformed": out, "report": rep}


def stage_attack(ctx: RunContext, d: Path) -> dict[str, Path]:
    sec = ctx.cfg.section("attack")
    cfg = attack_config(sec, ctx.cfg.seed)
    kind = sec.get("kind", "ga")
    scheme = scheme_by_name(ctx.first("attack.scheme", "transform_checkpoint"),
                            sec.get("scheme_seed", ctx.cfg.seed))
    T = ctx.dataset(ctx.first("attack.dataset", "data.train"))
    test = ctx.dataset(ctx.first("attack.test_dataset", "data.test"), "test")
    if kind == "ga":
        G = train_ga(scheme, T, cfg).G_att
    else:
        # the attacker is given plain/protected pairs of its own images
        G = train_paired_attack(scheme, pairs=(T.images, scheme.apply(T.images)), cfg=cfg).G_att
    rep = evaluate_attack(G, scheme, test, attack=kind)
    jp, cp = rep.write(d)
    ckpt = save_checkpoint(d / "attacker.pt", {"G_att": G}, asdict(cfg), cfg.epochs)
    results = ctx.results_path("attack")
    report([{"run_id": ctx.run_id("attack"), "scheme": rep.scheme, "attack": kind, "ssim": rep.mean_ssim,
             "dataset": test.name, "accuracy": None}], results)
    return {"report": jp, "per_image": cp, "attacker": ckpt}


def _classify_transform(ctx: RunContext, sec: dict, model_path: str | None = None, meta_extra: dict | None = None):
    """Transform for a classify stage: explicit setting, else the one recorded with the model, else upstream."""
    path = sec.get("transform")
    if path is None and meta_extra and meta_extra.get("transform"):
        path = str(Path(model_path).parent / meta_extra["transform"])
    if path is None:
        path = ctx.produced.get("transform_checkpoint")
    if path in (None, "none"):
        return None, None
    return Transform(load_transform(path)), str(path)


def stage_classify(ctx: RunContext, d: Path) -> dict[str, Path]:
    sec = ctx.cfg.section("classify")
    test_ref = ctx.first("classify.test_dataset", "data.test")
    outputs = {}
    if sec.get("mode", "train") == "train":
        cfg = classify_config(sec, ctx.cfg.seed)
        train = ctx.dataset(ctx.first("classify.dataset", "data.train"))
        fn, tpath = _classify_transform(ctx, sec)
        test = ctx.dataset(test_ref, "test") if test_ref else None
        model, history = train_classifier(train, fn, cfg, test)
        # stored relative to the checkpoint so runs in different directories hash the same
        rel = os.path.relpath(tpath, d) if tpath else None
        ckpt = save_checkpoint(d / "classifier.pt", {"classifier": model}, asdict(cfg), cfg.epochs,
                               {"transform": rel})
        outputs = {"model": ckpt, "history": _write_json(d / "history.json", history)}
        ctx.produced["classifier"] = str(ckpt)
    else:
        model_path = ctx.first("classify.model", "classifier")
        model, meta = _load_model(model_path, prefer=("classifier", "h_theta"))
        fn, tpath = _classify_transform(ctx, sec, model_path, meta["extra"])
        test = ctx.dataset(test_ref, "test")
    summary = {"transform": os.path.relpath(tpath, ctx.out) if tpath else None, "accuracy": None}
    if test is not None:
        acc = evaluate_accuracy(model, test, fn)
        summary.update(accuracy=acc, n=len(test), dataset=test.name)
        report([{"run_id": ctx.run_id("classify"), "scheme": "proposed" if fn else "plain", "attack": "none",
                 "ssim": None, "dataset": test.name, "accuracy": acc}], ctx.results_path("classify"))
    outputs["report"] = _write_json(d / "classify_report.json", summary)
    return outputs


def stage_metrics(ctx: RunContext, d: Path) -> dict[str, Path]:
    sec = ctx.cfg.section("metrics")
    ref = ctx.dataset(ctx.first("metrics.ref", "data.test"), "test")
    test = ctx.dataset(ctx.first("metrics.test", "transformed"), "test")
    if len(ref) != len(test):
        raise ValueError(f"metrics: {len(ref)} reference images but {len(test)} test images")
    per = ssim_batch(ref.images, test.images, SsimParams(luminance_only=sec.get("luminance_only", False)))
    mean = float(per.mean()) if len(per) else float("nan")
    name = sec.get("report", "metrics_report.json")
    rep = _write_json(d / name, {"mean_ssim": mean, "n": len(per), "per_image": per.tolist(),
                                 "luminance_only": sec.get("luminance_only", False)})
    report([{"run_id": ctx.run_id("metrics"), "scheme": "transform", "attack": "none", "ssim": mean,
             "dataset": ref.name, "accuracy": None}], ctx.results_path("metrics"))
    return {"report": rep}


STAGES = {
    "train-classifier": stage_train_classifier,
    "protect": stage_protect,
    "train-transform": stage_train_transform,
    "transform": stage_transform,
    "attack": stage_attack,
    "classify": stage_classify,
    "metrics": stage_metrics,
}


def run(cfg: ExperimentConfig, out=None) -> RunManifest:
    """Execute ``cfg.pipeline`` and write ``<out>/manifest.json``.

    The config must already be valid (see :func:`ganprotect.config.check_config`).
    A failing stage stops the run; its record carries the error and the last
    checkpoint written, and the manifest status is ``failed``.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    manifest = RunManifest(cfg.hash(), cfg.hashable(), cfg.seed, list(cfg.pipeline), versions(),
                           [StageRecord(s) for s in cfg.pipeline])
    ctx = RunContext(cfg, out)
    start = time.perf_counter()
    manifest.status = "ok"
    for rec in manifest.stages:
        d = out / rec.name
        d.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(stream_seed(cfg.seed, rec.name))
        log.info("stage %s", rec.name)
        t0 = time.perf_counter()
        try:
            outputs = STAGES[rec.name](ctx, d)
        except Exception as exc:  # recorded in the manifest, then re-surfaced through the status
            rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
            rec.last_checkpoint = ctx.last_checkpoint
            rec.wall_time = time.perf_counter() - t0
            manifest.status = "failed"
            log.error("stage %s failed: %s", rec.name, rec.error)
            break
        rec.status = "ok"
        rec.wall_time = time.perf_counter() - t0
        rec.outputs = {k: str(Path(v).relative_to(out)) if Path(v).is_relative_to(out) else str(v)
                       for k, v in outputs.items()}
        rec.checksums = checksums(outputs, out)
        rec.last_checkpoint = ctx.last_checkpoint
        if "report" in outputs:
            rec.details = {k: v for k, v in json.loads(Path(outputs["report"]).read_text()).items()
                           if k != "per_image"}
    for rec in manifest.stages:
        if rec.status == "pending":
            rec.status = "skipped"
    manifest.wall_time = time.perf_counter() - start
    manifest.write(out / "manifest.json")
    return manifest


# --- argument parsing -----------------------------------------------------------

# subcommand flag -> config key
FLAGS = {
    "train-classifier": {"data": "h_theta.dataset", "test_data": "h_theta.test_dataset",
                         "epochs": "h_theta.epochs", "arch": "h_theta.arch"},
    "protect": {"model": "protect.model", "data": "protect.dataset", "epsilon": "protect.epsilon",
                "alpha": "protect.alpha", "iterations": "protect.iterations"},
    "train-transform": {"plain": "cyclegan.plain", "protected": "cyclegan.protected",
                        "h_theta": "cyclegan.h_theta", "epochs": "cyclegan.epochs",
                        "resume": "cyclegan.resume", "phi_weights": "cyclegan.phi_weights"},
    "transform": {"checkpoint": "transform.checkpoint", "data": "transform.dataset"},
    "attack": {"scheme": "attack.scheme", "data": "attack.dataset", "test_data": "attack.test_dataset",
               "epochs": "attack.epochs", "results": "attack.results"},
    "classify": {"data": "classify.dataset", "test_data": "classify.test_dataset",
                 "transform": "classify.transform", "model": "classify.model", "epochs": "classify.epochs",
                 "results": "classify.results"},
    "metrics": {"ref": "metrics.ref", "test": "metrics.test", "results": "metrics.results"},
}

FLAG_TYPES = {"epochs": int, "iterations": int, "epsilon": float, "alpha": float}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ganprotect", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a config file and list every problem")
    v.add_argument("path", nargs="?", help="config file (or use --config)")
    v.add_argument("--config")

    sub.add_parser("run", parents=[common], help="run the pipeline named in the config")

    def stage(name, help_text, **extra_choices):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        for pos, choices in extra_choices.items():
            sp.add_argument(pos, choices=choices)
        for flag in FLAGS[name]:
            sp.add_argument("--" + flag.replace("_", "-"), dest=flag, type=FLAG_TYPES.get(flag, str))
        return sp

    stage("train-classifier", "train the classifier used to protect images")
    stage("protect", "apply loss-minimizing perturbations to a dataset")
    stage("train-transform", "train the transformation network")
    stage("transform", "apply a trained transformation network to a dataset")
    stage("attack", "run a reconstruction attack and report SSIM", kind=("ga", "paired"))
    stage("classify", "train or evaluate a classifier (optionally on transformed images)", mode=("train", "eval"))
    m = stage("metrics", "SSIM between two aligned datasets", measure=("ssim",))
    m.add_argument("--luminance-only", action="store_true", default=None)
    return p


def _parse_assignment(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise SystemExit(f"--set expects KEY=VALUE, got {text!r}")
    cfg, issues = parse_text(text, "--set")
    if issues:
        raise ConfigError(issues)
    return next(iter(cfg.values.items()))


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig(source="<command line>")
    overrides: dict = {}
    for item in args.set:
        k, v = _parse_assignment(item)
        overrides[k] = v
    if args.command != "run":
        overrides["pipeline"] = args.command
        for flag, key in FLAGS[args.command].items():
            if getattr(args, flag, None) is not None:
                overrides[key] = getattr(args, flag)
        if args.command == "attack":
            overrides["attack.kind"] = args.kind
        if args.command == "classify":
            overrides["classify.mode"] = args.mode
        if args.command == "metrics" and args.luminance_only:
            overrides["metrics.luminance_only"] = True
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    return cfg.with_overrides(overrides)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.command == "validate":
        from .config import validate
        path = args.path or args.config
        if not path:
            print("validate: a config file is required", file=sys.stderr)
            return EXIT_INVALID
        issues = validate(path)
        for issue in issues:
            print(issue)
        if not issues:
            print(f"{path}: ok")
        return EXIT_INVALID if issues else EXIT_OK
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print("\n".join(exc.issues), file=sys.stderr)
        return EXIT_INVALID
    issues = check_config(cfg)
    if issues:
        print("\n".join(issues), file=sys.stderr)
        return EXIT_INVALID
    manifest = run(cfg)
    print(f"{manifest.status}: manifest at {Path(cfg.out) / 'manifest.json'}")
    for rec in manifest.stages:
        print(f"  {rec.name:<17} {rec.status:<8} {rec.wall_time:8.1f}s" + (f"  {rec.error}" if rec.error else ""))
    return EXIT_OK if manifest.status == "ok" else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
