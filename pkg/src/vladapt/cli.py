"""Command-line pipeline runner.

Every subcommand takes a JSON run config and writes into one run directory::

    config.json   the normalized config actually used (reloadable)
    result.json   deterministic results, no timestamps or absolute paths
    run.json      metadata: seed, config hash, timestamps, warnings
    curves.csv    training curve, when the command trains something

Exit codes: 0 success, 1 invalid config or inputs, 2 failure while running.
``VLADAPT_OUTPUT_ROOT`` overrides the directory that relative ``output_dir``
values are resolved against.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import __version__
from .adaptations import (
    FINETUNED_FEATURES, NO_VISUAL_FINETUNED, AdaptationSpec, Resources, finetune_text_only,
    resolve_adaptation, tune_visual_features,
)
from .backbone import Backbone, TextImaginer, align_imaginer
from .checkpoint import load_features, load_model, save_features, save_model
from .data import build_vocab, corpus_stats, generate_synthetic_world, load_corpus, load_visual_dataset
from .errors import ConfigError, ResolutionError, TrainingDivergence, VLAdaptError
from .glue import BINARY_KIND, REFERENCE_SCORES, load_task, run_glue_pipeline
from .model import ModelConfig, VLEncoder, tokenize
from .training import PRESETS, CurvePoint, TrainResult, preset, train_mlm, write_curve_csv
from .vpn import REFERENCE_VPN, evaluate_vpn, load_property_norms, load_templates

log = logging.getLogger("vladapt")

OUTPUT_ROOT_ENV = "VLADAPT_OUTPUT_ROOT"
COMMANDS = ("synth", "pretrain", "finetune-text", "tune-features", "eval-vpn", "eval-glue", "report")
EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
NOT_REPRODUCIBLE = "reference numbers from full-scale models; not reproducible at this scale"

_RESOURCE_TABLES = ("corpora", "backbones", "imaginers", "models", "features")


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    output_dir: str
    seed: int = 0
    preset: str = "desk"
    model: Optional[dict] = None
    checkpoint: Optional[str] = None
    vocab_size: int = 1000
    adaptation: Optional[dict] = None
    tasks: str = "vpn"
    data: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    runs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _absolute(value: str, base: Path) -> str:
    p = Path(value).expanduser()
    return str(p if p.is_absolute() else (base / p).resolve())


def _need(path: str, where: str) -> None:
    if not Path(path).exists():
        raise ConfigError(f"{where}: path does not exist: {path}")


def _normalize_paths(cfg: RunConfig, base: Path) -> None:
    """Make every input path absolute (relative to the config file) and check it exists."""
    if cfg.checkpoint:
        cfg.checkpoint = _absolute(cfg.checkpoint, base)
        _need(cfg.checkpoint, "checkpoint")
    data = cfg.data
    for table in _RESOURCE_TABLES:
        entries = data.get(table, {})
        if not isinstance(entries, dict):
            raise ConfigError(f"data.{table} must map names to paths")
        for name, value in entries.items():
            entries[name] = _absolute(value, base)
            _need(entries[name], f"data.{table}.{name}")
    for name, entry in data.get("visual_datasets", {}).items():
        for key in ("records", "features"):
            if key not in entry:
                raise ConfigError(f"data.visual_datasets.{name} needs {key!r}")
            entry[key] = _absolute(entry[key], base)
            _need(entry[key], f"data.visual_datasets.{name}.{key}")
    for key in ("norms", "templates"):
        if data.get(key):
            data[key] = _absolute(data[key], base)
            _need(data[key], f"data.{key}")
    for i, task in enumerate(data.get("glue_tasks", [])):
        for key in ("train", "dev"):
            if key not in task:
                raise ConfigError(f"data.glue_tasks[{i}] needs {key!r}")
            task[key] = _absolute(task[key], base)
            _need(task[key], f"data.glue_tasks[{i}].{key}")
    cfg.runs = [_absolute(r, base) for r in cfg.runs]
    for r in cfg.runs:
        _need(str(Path(r) / "result.json"), "runs")


def _train_config(cfg: RunConfig, purpose: str):
    overrides = dict(cfg.train.get(purpose, {}))
    overrides.setdefault("seed", cfg.seed)
    try:
        return preset(purpose, cfg.preset, **overrides)
    except TypeError as exc:
        raise ConfigError(f"train.{purpose}: {exc}") from None


def validate_config(raw: dict, command: str, base: Path = Path(".")) -> RunConfig:
    """Field-level validation; raises ConfigError naming the offending field or path."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    if "output_dir" not in raw:
        raise ConfigError("output_dir: required")
    cfg = RunConfig(**json.loads(json.dumps(raw)))
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed: must be an integer")
    if cfg.preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {cfg.preset!r}")
    if cfg.tasks not in ("vpn", "glue", "both"):
        raise ConfigError(f"tasks: expected vpn, glue or both, got {cfg.tasks!r}")
    if cfg.model is not None:
        try:
            ModelConfig.from_dict(cfg.model)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None
        except ConfigError as exc:
            raise ConfigError(f"model: {exc}") from None
    if isinstance(cfg.adaptation, list):
        raise ConfigError("adaptation: exactly one adaptation per run")
    if cfg.adaptation is not None and not isinstance(cfg.adaptation, dict):
        raise ConfigError("adaptation: must be an object with a 'kind'")
    if cfg.adaptation is not None:
        try:
            _spec(cfg)
        except TypeError as exc:
            raise ConfigError(f"adaptation: {exc}") from None
        except ConfigError as exc:
            raise ConfigError(f"adaptation: {exc}") from None
    for purpose, overrides in cfg.train.items():
        if purpose not in PRESETS[cfg.preset]:
            raise ConfigError(f"train: unknown purpose {purpose!r}")
        _train_config(cfg, purpose)

    needs_checkpoint = command in ("finetune-text", "tune-features", "eval-vpn", "eval-glue")
    if needs_checkpoint and not cfg.checkpoint:
        raise ConfigError("checkpoint: required for " + command)
    if command == "pretrain" and not (cfg.checkpoint or cfg.model):
        raise ConfigError("model: pretrain needs a model config or a checkpoint")
    if command in ("eval-vpn", "eval-glue", "finetune-text", "tune-features") and cfg.adaptation is None:
        raise ConfigError("adaptation: required for " + command)
    if command == "finetune-text" and cfg.adaptation["kind"] != NO_VISUAL_FINETUNED:
        raise ConfigError(f"adaptation.kind: finetune-text needs {NO_VISUAL_FINETUNED!r}")
    if command == "tune-features" and cfg.adaptation["kind"] != FINETUNED_FEATURES:
        raise ConfigError(f"adaptation.kind: tune-features needs {FINETUNED_FEATURES!r}")
    if command == "eval-vpn" and not cfg.data.get("norms"):
        raise ConfigError("data.norms: required for eval-vpn")
    if command == "eval-glue" and not cfg.data.get("glue_tasks"):
        raise ConfigError("data.glue_tasks: required for eval-glue")
    if command == "report" and not cfg.runs:
        raise ConfigError("runs: report needs at least one run directory")
    if command == "pretrain":
        src = cfg.pretrain
        if not (src.get("corpus") or src.get("visual_dataset")):
            raise ConfigError("pretrain: set 'corpus' or 'visual_dataset'")
        if src.get("visual_dataset") and src.get("corpus"):
            raise ConfigError("pretrain: 'corpus' and 'visual_dataset' are mutually exclusive")
    _normalize_paths(cfg, base)
    for key, table in (("corpus", "corpora"), ("dev_corpus", "corpora"),
                       ("visual_dataset", "visual_datasets"), ("dev_visual_dataset", "visual_datasets")):
        name = cfg.pretrain.get(key)
        if command == "pretrain" and name and name not in cfg.data.get(table, {}):
            raise ConfigError(f"pretrain.{key}: {name!r} not listed in data.{table}")
    return cfg


def read_config(path, command: str) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return validate_config(raw, command, path.resolve().parent)


def output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir).expanduser()
    if out.is_absolute():
        return out
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return (Path(root) if root else Path.cwd()) / out


# ---------------------------------------------------------------------------
# Run directory helpers
# ---------------------------------------------------------------------------


@contextmanager
def run_lock(run_dir: Path):
    """Advisory lock: a second writer on the same run directory fails fast."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"run directory {run_dir} is locked by another process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class RunLocked(VLAdaptError):
    pass


def _clean(obj):
    """JSON-safe copy: NaN/inf become None, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _curve_dict(result: Optional[TrainResult]) -> Optional[dict]:
    if result is None:
        return None
    return {"best_step": result.best_step, "best_dev": result.best_dev, "stopped_early": result.stopped_early,
            "steps_run": result.steps_run,
            "curve": [[p.step, p.split, p.value] for p in result.curve]}


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


# ---------------------------------------------------------------------------
# Input loading
# ---------------------------------------------------------------------------


def load_resources(cfg: RunConfig) -> Resources:
    data = cfg.data
    res = Resources()
    for name, path in data.get("corpora", {}).items():
        res.corpora[name] = load_corpus(path, split="dev" if "dev" in name else "train").samples
    for name, path in data.get("backbones", {}).items():
        res.backbones[name] = Backbone.load(path)
    for name, path in data.get("imaginers", {}).items():
        res.imaginers[name] = TextImaginer.load(path)
    for name, entry in data.get("visual_datasets", {}).items():
        res.visual_datasets[name] = load_visual_dataset(entry["records"], entry["features"])
    for name, path in data.get("models", {}).items():
        res.models[name] = load_model(path)[0]
    for name, path in data.get("features", {}).items():
        res.features[name] = load_features(path)
    return res


def _spec(cfg: RunConfig) -> AdaptationSpec:
    """The run's adaptation; tuned kinds without their own ``train`` take the preset for their purpose."""
    data = dict(cfg.adaptation)
    if "train" not in data and data.get("pretuned") is None:
        purpose = {NO_VISUAL_FINETUNED: "finetune-text", FINETUNED_FEATURES: "tune-features"}.get(data.get("kind"))
        if purpose:
            data["train"] = _train_config(cfg, purpose)
    return AdaptationSpec.from_dict(data)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@dataclass
class Outcome:
    result: dict
    warnings: list = field(default_factory=list)
    curve: Optional[list] = None


def cmd_synth(cfg: RunConfig, run_dir: Path) -> Outcome:
    kwargs = dict(cfg.synth)
    kwargs.setdefault("seed", cfg.seed)
    if "image_size" in kwargs:
        kwargs["image_size"] = tuple(kwargs["image_size"])
    try:
        world = generate_synthetic_world(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"synth: {exc}") from None
    paths = world.write(run_dir / "data")
    stats = {split: corpus_stats(world.caption_texts(split)).to_dict() for split in ("train", "dev")}
    wiki = {split: corpus_stats(world.wiki[split]).to_dict() for split in ("train", "dev")}
    return Outcome({
        "command": "synth",
        "files": {k: str(Path(p).relative_to(run_dir)) for k, p in paths.items()},
        "captions": stats,
        "wiki": wiki,
        "concepts": {c: [f"{p.relation}:{p.word}" for p in ps] for c, ps in world.concepts.items()},
        "norms": len(world.norms),
    })


def cmd_pretrain(cfg: RunConfig, run_dir: Path) -> Outcome:
    res = load_resources(cfg)
    src = cfg.pretrain
    if src.get("visual_dataset"):
        train_ds = res.visual_datasets[src["visual_dataset"]]
        texts, visual = train_ds.texts, train_ds.visuals
    else:
        texts, visual = res.corpora[src["corpus"]], None
    dev_texts = dev_visual = None
    if src.get("dev_visual_dataset"):
        dev_ds = res.visual_datasets[src["dev_visual_dataset"]]
        dev_texts, dev_visual = dev_ds.texts, dev_ds.visuals
    elif src.get("dev_corpus"):
        dev_texts = res.corpora[src["dev_corpus"]]

    if cfg.checkpoint:
        model, vocab = load_model(cfg.checkpoint)
    else:
        every = [list(c) for c in res.corpora.values()] + [ds.texts for ds in res.visual_datasets.values()]
        vocab = build_vocab(every, cfg.vocab_size)
        mcfg = dict(cfg.model)
        mcfg["vocab_size"] = len(vocab)
        mcfg.setdefault("seed", cfg.seed)
        model = VLEncoder(ModelConfig.from_dict(mcfg))
    if visual is None and model.cfg.dual:
        log.info("text-only pretraining of a dual-stream model runs with the cross-modality ablated")

    train = _train_config(cfg, "pretrain")
    trained, result = train_mlm(model, vocab, texts, train, dev=dev_texts, visual=visual, dev_visual=dev_visual,
                                from_scratch=bool(src.get("from_scratch", False)))
    save_model(run_dir / "model.json", trained, vocab)
    out = {"command": "pretrain", "vocab_size": len(vocab), "model": trained.cfg.to_dict(),
           "train": train.to_dict(), "training": _curve_dict(result), "files": {"model": "model.json"}}

    steps = int(src.get("imaginer_steps", 0))
    if steps:
        if not src.get("visual_dataset"):
            raise ConfigError("pretrain.imaginer_steps: needs a paired visual_dataset")
        imaginer = TextImaginer(len(vocab), model.cfg.visual_dim, model.cfg.detections, seed=cfg.seed)
        seqs = [tokenize(t, vocab, model.cfg.max_len) for t in texts]
        targets = np.stack([v.features.mean(axis=0) for v in visual])
        losses = align_imaginer(imaginer, seqs, targets, steps=steps, seed=cfg.seed)
        imaginer.save(run_dir / "imaginer.json")
        out["files"]["imaginer"] = "imaginer.json"
        out["imaginer_loss"] = {"first": losses[0], "last": losses[-1]}
    return Outcome(out, curve=result.curve)


def cmd_finetune_text(cfg: RunConfig, run_dir: Path) -> Outcome:
    res = load_resources(cfg)
    spec = _spec(cfg)
    model, vocab = load_model(cfg.checkpoint)
    corpus = _corpus(res, spec.corpus, spec.kind)
    dev = _corpus(res, spec.dev_corpus, spec.kind) if spec.dev_corpus else None
    tuned, result = finetune_text_only(model, vocab, corpus, spec.train, dev)
    save_model(run_dir / "model.json", tuned, vocab)
    return Outcome({"command": "finetune-text", "adaptation": spec.name, "train": spec.train.to_dict(),
                    "training": _curve_dict(result), "files": {"model": "model.json"}}, curve=result.curve)


def cmd_tune_features(cfg: RunConfig, run_dir: Path) -> Outcome:
    res = load_resources(cfg)
    spec = _spec(cfg)
    model, vocab = load_model(cfg.checkpoint)
    corpus = _corpus(res, spec.corpus, spec.kind)
    dev = _corpus(res, spec.dev_corpus, spec.kind) if spec.dev_corpus else None
    visual, result = tune_visual_features(model, vocab, corpus, spec.train, dev=dev)
    save_features(run_dir / "features.json", visual)
    return Outcome({"command": "tune-features", "adaptation": spec.name, "train": spec.train.to_dict(),
                    "training": _curve_dict(result), "files": {"features": "features.json"}}, curve=result.curve)


def _corpus(res: Resources, name, kind):
    if name not in res.corpora:
        raise ResolutionError(kind, f"corpus {name!r}")
    return res.corpora[name]


def _adapted(cfg: RunConfig):
    res = load_resources(cfg)
    model, vocab = load_model(cfg.checkpoint)
    spec = _spec(cfg)
    return spec, resolve_adaptation(spec, model, vocab, res)


def _vpn_result(cfg: RunConfig, adapted) -> tuple[dict, list]:
    data = cfg.data
    queries = load_property_norms(data["norms"], int(data.get("pf_threshold", 10)), adapted.vocab,
                                  data.get("candidate_mode", "closed"))
    report = evaluate_vpn(adapted, queries, load_templates(data.get("templates")))
    warnings = list(report.warnings)
    if report.skipped_multi_token:
        warnings.append(f"{report.skipped_multi_token} multi-token features dropped")
    return report.to_dict(), warnings


def _glue_result(cfg: RunConfig, adapted) -> dict:
    tasks = [load_task(t.get("name", Path(t["train"]).stem), t["train"], t["dev"],
                       t.get("kind", BINARY_KIND), int(t.get("num_classes", 2)), t.get("metric"))
             for t in cfg.data["glue_tasks"]]
    train = _train_config(cfg, "glue")
    report = run_glue_pipeline(adapted, tasks, train)
    curves = {name: [dataclasses.asdict(r) for r in recs] for name, recs in report.curves.items()}
    return {**report.to_dict(), "train": train.to_dict(), "curves": curves}


def cmd_eval(cfg: RunConfig, run_dir: Path, command: str) -> Outcome:
    spec, adapted = _adapted(cfg)
    out = {"command": command, "adaptation": spec.name, "kind": spec.kind,
           "visual": adapted.provider.describe(), "training": _curve_dict(adapted.training)}
    warnings = []
    if command == "eval-vpn" or cfg.tasks == "both":
        if cfg.data.get("norms"):
            out["vpn"], warnings = _vpn_result(cfg, adapted)
    if command == "eval-glue" or cfg.tasks == "both":
        if cfg.data.get("glue_tasks"):
            out["glue"] = _glue_result(cfg, adapted)
    curve = adapted.training.curve if adapted.training else None
    return Outcome(out, warnings, curve)


def cmd_report(cfg: RunConfig, run_dir: Path) -> Outcome:
    """Merge eval runs: one VPN row (median, std x100) and one GLUE row per adaptation."""
    vpn_rows, glue_rows, boxes = [], [], {}
    for rd in cfg.runs:
        result = json.loads((Path(rd) / "result.json").read_text(encoding="utf-8"))
        name = result.get("adaptation", Path(rd).name)
        if "vpn" in result:
            v = result["vpn"]
            vpn_rows.append({"adaptation": name, "median": 100 * v["median"], "std": 100 * v["std"]})
            boxes[name] = {"per_template_map": v["per_template_map"], **v["box"]}
        if "glue" in result:
            g = result["glue"]
            glue_rows.append({"adaptation": name, "macro": 100 * g["macro"],
                              **{t: 100 * s["score"] for t, s in g["per_task"].items()}})
    if not vpn_rows and not glue_rows:
        raise ConfigError("runs: none of the run directories holds VPN or GLUE results")
    files = {}
    if vpn_rows:
        _write_rows(run_dir / "vpn.csv", ["adaptation", "median", "std"], vpn_rows)
        files["vpn"] = "vpn.csv"
        write_json(run_dir / "boxplot.json", {"adaptations": boxes,
                                              "reference": {"note": NOT_REPRODUCIBLE, "values": REFERENCE_VPN}})
        files["boxplot"] = "boxplot.json"
    if glue_rows:
        tasks = sorted({k for row in glue_rows for k in row} - {"adaptation", "macro"})
        _write_rows(run_dir / "glue.csv", ["adaptation", *tasks, "macro"], glue_rows)
        files["glue"] = "glue.csv"
    return Outcome({"command": "report", "vpn": vpn_rows, "glue": glue_rows, "files": files,
                    "reference": {"note": NOT_REPRODUCIBLE, "glue": REFERENCE_SCORES, "vpn": REFERENCE_VPN}})


def _write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def _fmt(value):
    return f"{value:.4f}" if isinstance(value, float) else value


_DISPATCH: dict[str, Callable[[RunConfig, Path], Outcome]] = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune-text": cmd_finetune_text,
    "tune-features": cmd_tune_features,
    "eval-vpn": lambda cfg, d: cmd_eval(cfg, d, "eval-vpn"),
    "eval-glue": lambda cfg, d: cmd_eval(cfg, d, "eval-glue"),
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    run_dir: Path
    result: dict
    metadata: dict


def run_pipeline(command: str, cfg: RunConfig) -> RunReport:
    """Execute one subcommand for a validated config, writing all outputs under its run directory."""
    if command not in _DISPATCH:
        raise ConfigError(f"unknown command {command!r}")
    run_dir = output_dir(cfg)
    config = cfg.to_dict()
    with run_lock(run_dir):
        write_json(run_dir / "config.json", config)
        started = datetime.now(timezone.utc).isoformat()
        t0 = time.perf_counter()
        _seed_everything(cfg.seed)
        try:
            outcome = _DISPATCH[command](cfg, run_dir)
        except TrainingDivergence as exc:
            write_curve_csv(run_dir / "curves.csv", _as_points(exc.curve))
            raise
        if outcome.curve:
            write_curve_csv(run_dir / "curves.csv", _as_points(outcome.curve))
        write_json(run_dir / "result.json", outcome.result)
        metadata = {
            "command": command,
            "seed": cfg.seed,
            "config_hash": config_hash(config),
            "started": started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "seconds": round(time.perf_counter() - t0, 3),
            "version": __version__,
            "warnings": outcome.warnings,
        }
        write_json(run_dir / "run.json", metadata)
    return RunReport(run_dir, outcome.result, metadata)


def _as_points(curve) -> list[CurvePoint]:
    points = []
    for p in curve:
        if isinstance(p, CurvePoint):
            points.append(p)
        else:  # per-epoch fine-tuning records
            points.append(CurvePoint(p.epoch, "dev", p.dev_score))
    return points


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vladapt", description="Adapt VL encoders to text-only input and evaluate them.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a synthetic concept world",
        "pretrain": "MLM-train a model (paired visual data or text only)",
        "finetune-text": "fine-tune a model on text only",
        "tune-features": "learn one constant visual input against a frozen model",
        "eval-vpn": "zero-shot property-norm probing of one adaptation",
        "eval-glue": "fine-tune and score classification tasks for one adaptation",
        "report": "merge evaluation runs into CSV tables and box-plot statistics",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("config", help="path to the JSON run config")
        p.add_argument("--output-dir", help="override output_dir from the config")
        p.add_argument("--seed", type=int, help="override seed from the config")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(args.config, args.command)
        if args.output_dir:
            cfg.output_dir = args.output_dir
        if args.seed is not None:
            cfg.seed = args.seed
    except VLAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        report = run_pipeline(args.command, cfg)
    except (ConfigError, ResolutionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        for p in _as_points(exc.curve):
            print(f"  step {p.step} {p.split} {p.value!r}", file=sys.stderr)
        return EXIT_FAILED
    except (VLAdaptError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print(report.run_dir)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
