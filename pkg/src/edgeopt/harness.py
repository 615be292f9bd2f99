"""Experiment configuration and the end-to-end technique pipelines.

One experiment = one backbone, one dataset triple (train / calib / eval) and
one technique.  Evaluation always runs at batch size 1.  Every non-timing
output is a pure function of the config (including its seed).
"""

from __future__ import annotations

import json
import math
import os
import resource
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import yaml

from . import exits, metrics
from .data import Dataset, load_dataset
from .engine import count_macs, forward_array
from .errors import ConfigError, EdgeOptError, StageError
from .exits import output_probs
from .graph import Graph
from .modelio import load_model, save_model
from .models import ARCHITECTURES
from .prune import PruneConfig, prune_structured
from .quant import apply_dq, apply_ptq, calibrate, covered_weight_bytes, dq_plan, resolve_kinds

CONFIG_SCHEMA_VERSION = 1
TECHNIQUES = ("base", "prune", "ptq", "dq", "ee", "ptq-ee", "dq-ee")
ENV_OUTPUT_DIR = "EDGEOPT_OUTPUT_DIR"
ENV_THREADS = "EDGEOPT_THREADS"


def env_threads(default=1) -> int:
    raw = os.environ.get(ENV_THREADS)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{ENV_THREADS} must be >= 1")
    return n


@dataclass
class ExperimentConfig:
    """Versioned experiment description (YAML or JSON on disk).

    ``model`` is a model file path or ``{"arch": name, ...builder kwargs}``;
    built backbones have random conv weights and a classifier fitted on the
    train set.  ``data`` maps ``train``/``calib``/``eval`` to dataset refs
    (descriptor path or synthetic spec), or gives one ``source`` plus a
    ``split`` of three counts.
    """

    name: str
    model: object
    data: dict
    technique: str = "base"
    seed: int = 0
    output_dir: str = "runs"
    threads: int = 1
    prune: dict = field(default_factory=dict)
    quant: dict = field(default_factory=dict)
    exits: dict = field(default_factory=dict)
    schema_version: int = CONFIG_SCHEMA_VERSION
    base_dir: str = ""

    PRUNE_DEFAULTS = {"pr": 0.0, "cg": 1, "protect_residual_io": True}
    QUANT_DEFAULTS = {"kinds": "full-graph", "calib_samples": None}
    EXIT_DEFAULTS = {"attach_points": None, "preset": "simple", "block_channels": None,
                     "grid": {"num": 50}, "budget": None, "epochs": 20, "lr": 0.1, "batch_size": 32,
                     "operating_point": "inf_opt"}

    @classmethod
    def from_dict(cls, d: dict, base_dir="") -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        version = d.get("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        known = {"name", "model", "data", "technique", "seed", "output_dir", "threads", "prune", "quant",
                 "exits", "schema_version"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("name", "model", "data"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        cfg = cls(**{k: v for k, v in d.items() if k in known}, base_dir=base_dir)
        cfg.prune = {**cls.PRUNE_DEFAULTS, **(cfg.prune or {})}
        cfg.quant = {**cls.QUANT_DEFAULTS, **(cfg.quant or {})}
        cfg.exits = {**cls.EXIT_DEFAULTS, **(cfg.exits or {})}
        if os.environ.get(ENV_OUTPUT_DIR):
            cfg.output_dir = os.environ[ENV_OUTPUT_DIR]
        if "threads" not in d:
            cfg.threads = env_threads(cfg.threads)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def resolve_path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def validate(self):
        if self.technique not in TECHNIQUES:
            raise ConfigError(f"technique must be one of {TECHNIQUES}, got {self.technique!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        if not isinstance(self.threads, int) or self.threads < 1:
            raise ConfigError("threads must be a positive integer")
        if isinstance(self.model, str):
            if not os.path.exists(self.resolve_path(self.model)):
                raise ConfigError(f"model file not found: {self.model}")
        elif isinstance(self.model, dict):
            if self.model.get("arch") not in ARCHITECTURES:
                raise ConfigError(f"model.arch must be one of {sorted(ARCHITECTURES)}")
        else:
            raise ConfigError("model must be a path or an {arch: ...} mapping")
        self._validate_data()
        t = self.technique
        if t == "prune":
            try:
                PruneConfig(float(self.prune["pr"]), int(self.prune["cg"]), bool(self.prune["protect_residual_io"]))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"prune: {e}") from None
        if t in ("ptq", "dq", "ptq-ee", "dq-ee"):
            try:
                resolve_kinds(self.quant["kinds"])
            except ValueError as e:
                raise ConfigError(f"quant.kinds: {e}") from None
        if t.endswith("ee"):
            e = self.exits
            if not e.get("attach_points"):
                raise ConfigError(f"technique {t} needs exits.attach_points")
            if e["preset"] not in exits.HEAD_PRESETS:
                raise ConfigError(f"exits.preset must be one of {exits.HEAD_PRESETS}")
            if e["operating_point"] not in ("acc_opt", "inf_opt"):
                raise ConfigError("exits.operating_point must be acc_opt or inf_opt")
            grid = e["grid"]
            if not (isinstance(grid, list) or (isinstance(grid, dict) and int(grid.get("num", 0)) >= 1)):
                raise ConfigError("exits.grid must be a list of thresholds or {num: N}")

    def _validate_data(self):
        d = self.data
        if not isinstance(d, dict):
            raise ConfigError("data must be a mapping")
        if "source" in d:
            split = d.get("split")
            if not (isinstance(split, list) and len(split) == 3 and all(int(s) >= 1 for s in split)):
                raise ConfigError("data.split must list three positive counts (train, calib, eval)")
            refs = [d["source"]]
        else:
            missing = [k for k in ("train", "eval") if k not in d]
            if missing:
                raise ConfigError(f"data is missing {missing}")
            refs = [d[k] for k in ("train", "calib", "eval") if k in d]
        for ref in refs:
            if isinstance(ref, str):
                if not os.path.exists(self.resolve_path(ref)):
                    raise ConfigError(f"dataset descriptor not found: {ref}")
            elif not (isinstance(ref, dict) and "format" in ref):
                raise ConfigError("dataset refs are descriptor paths or {format: ...} mappings")


def load_config(path) -> ExperimentConfig:
    """Parse a YAML or JSON config file; relative paths resolve against its directory."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from None
    return ExperimentConfig.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


# --------------------------------------------------------------------------- pipeline pieces

class _Stages:
    """Run steps under a stage name; failures become StageError(stage)."""

    def __init__(self):
        self.order: List[str] = []

    def __call__(self, stage, fn, *args, **kwargs):
        self.order.append(stage)
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except (EdgeOptError, ValueError, KeyError, OSError) as e:
            raise StageError(stage, e) from e


def load_data(cfg: ExperimentConfig):
    """(train, calib, eval) datasets."""
    def ref(r):
        return load_dataset(cfg.resolve_path(r)) if isinstance(r, str) else load_dataset(r)

    d = cfg.data
    if "source" in d:
        src = ref(d["source"])
        a, b, c = (int(s) for s in d["split"])
        if a + b + c > len(src):
            raise ConfigError(f"split {d['split']} needs {a + b + c} samples, source has {len(src)}")
        return tuple(src.split(a, b, c))
    train, evals = ref(d["train"]), ref(d["eval"])
    calib = ref(d["calib"]) if "calib" in d else train
    return train, calib, evals


def build_backbone(cfg: ExperimentConfig, train: Dataset) -> Graph:
    if isinstance(cfg.model, str):
        return load_model(cfg.resolve_path(cfg.model))
    spec = dict(cfg.model)
    arch = ARCHITECTURES[spec.pop("arch")]
    fit_epochs = int(spec.pop("fit_epochs", 30))
    spec.setdefault("input_shape", train.sample_shape)
    spec.setdefault("num_classes", train.num_classes)
    spec.setdefault("seed", cfg.seed)
    graph = arch(**spec)
    if fit_epochs:
        graph = exits.fit_classifier(graph, train, epochs=fit_epochs, seed=cfg.seed)
    return graph


def evaluate_graph(graph: Graph, dataset: Dataset) -> List[metrics.EvalRecord]:
    """Batch-1 evaluation; one record per sample with wall-clock latency."""
    macs = count_macs(graph).total_macs
    recs = []
    for i in range(len(dataset)):
        x = dataset.images[i:i + 1]
        t0 = time.perf_counter()
        probs = output_probs(graph, forward_array(graph, x))[0]
        dt = time.perf_counter() - t0
        recs.append(metrics.EvalRecord(int(dataset.labels[i]), probs, 0, 0, dt, macs))
    return recs


def threshold_grid(spec, num_classes: int) -> List[float]:
    if isinstance(spec, dict):
        return [float(t) for t in np.linspace(0.0, math.log(num_classes), int(spec["num"]))]
    return [float(t) for t in spec]


def peak_rss_kb() -> int:
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)


@dataclass
class ExperimentResult:
    summary: metrics.MetricsSummary
    rows: List[metrics.MetricsSummary]
    artifacts: Dict[str, str]
    output_dir: str
    stages: List[str]
    sweep: Optional[exits.SweepReport] = None
    extras: dict = field(default_factory=dict)


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)
    return path


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run the configured technique end to end and write every artifact.

    Early-exit pipelines follow attach -> train heads -> partition ->
    quantize per segment -> sweep, so quantization always sees the already
    partitioned cascade.
    """
    stage = _Stages()
    out = os.path.join(cfg.output_dir, cfg.name)
    stage("setup", os.makedirs, out, exist_ok=True)
    artifacts: Dict[str, str] = {}
    extras: dict = {}

    train, calib, evals = stage("data", load_data, cfg)
    if cfg.quant.get("calib_samples"):
        calib = calib.subset(slice(0, int(cfg.quant["calib_samples"])))
    base = stage("model", build_backbone, cfg, train)
    artifacts["base_model"] = os.path.join(out, "base.eom")
    base_bytes = stage("model", save_model, base, artifacts["base_model"])

    base_recs = stage("baseline", evaluate_graph, base, evals)
    base_total = sum(r.latency for r in base_recs)
    base_row = metrics.summarize("base", base_recs, base_recs, base_bytes, base_bytes, base_total)
    rows = [base_row]
    summary = base_row
    sweep = None
    t = cfg.technique

    if t == "prune":
        pc = PruneConfig(float(cfg.prune["pr"]), int(cfg.prune["cg"]), bool(cfg.prune["protect_residual_io"]))
        pruned, report = stage("prune", prune_structured, base, pc)
        artifacts["model"] = os.path.join(out, "pruned.eom")
        size = stage("prune", save_model, pruned, artifacts["model"])
        artifacts["prune_report"] = _write(os.path.join(out, "prune_report.json"), report.to_json())
        recs = stage("evaluate", evaluate_graph, pruned, evals)
        summary = metrics.summarize("prune", recs, base_recs, base_bytes, size, base_total)
        rows.append(summary)
        extras["param_compression"] = report.compression_rate

    elif t in ("ptq", "dq"):
        kinds = resolve_kinds(cfg.quant["kinds"])
        if t == "ptq":
            plan = stage("calibrate", calibrate, base, [calib.images[i:i + 1] for i in range(len(calib))], kinds)
            qgraph = stage("quantize", apply_ptq, base, plan)
        else:
            plan = stage("quantize", dq_plan, base, kinds)
            qgraph = stage("quantize", apply_dq, base, kinds)
        artifacts["quant_plan"] = os.path.join(out, "quant_plan.json")
        plan.save(artifacts["quant_plan"])
        artifacts["model"] = os.path.join(out, f"{t}.eom")
        size = stage("quantize", save_model, qgraph, artifacts["model"])
        covered = [layer.name for layer in qgraph.layers if layer.quant is not None and layer.weights]
        before = covered_weight_bytes(base, covered)
        after = covered_weight_bytes(qgraph, covered)
        extras["covered_weight_bytes"] = {"float": before, "quantized": after,
                                          "ratio": before / after if after else None}
        recs = stage("evaluate", evaluate_graph, qgraph, evals)
        summary = metrics.summarize(t, recs, base_recs, base_bytes, size, base_total)
        rows.append(summary)

    elif t.endswith("ee"):
        e = cfg.exits
        cascade = stage("attach", exits.attach_exits, base, list(e["attach_points"]), e["preset"], cfg.seed,
                        None, e["block_channels"])
        cascade = stage("train-exits", exits.train_exit_heads, cascade, train, int(e["epochs"]), float(e["lr"]),
                        cfg.seed, int(e["batch_size"]))
        if t != "ee":
            mode = t.split("-")[0]
            stage("partition", _check_partition, cascade, base)
            cascade = stage("quantize", exits.quantize_cascade, cascade, mode, cfg.quant["kinds"],
                            calib if mode == "ptq" else None)
        grid = threshold_grid(e["grid"], base.num_classes)
        budget = math.inf if e["budget"] is None else float(e["budget"])
        traces = stage("sweep", exits.trace_dataset, cascade, evals.images, cfg.threads)
        sweep = stage("sweep", exits.sweep_thresholds, cascade, evals, grid, budget, cfg.threads, traces)
        artifacts["sweep_json"] = _write(os.path.join(out, "sweep.json"), sweep.to_json())
        artifacts["sweep_csv"] = _write(os.path.join(out, "sweep.csv"), sweep.to_csv())
        artifacts["plot_data"] = _write(os.path.join(out, "sweep.dat"), sweep.plot_data())
        size = cascade.serialized_bytes
        seg_macs, head_macs = cascade.segment_macs(), cascade.head_macs()
        for point_name, idx in (("acc_opt", sweep.acc_opt), ("inf_opt", sweep.inf_opt)):
            thr = sweep.grid[idx].threshold
            recs = exits.records_for(traces, evals.labels, [thr] * len(cascade.heads), seg_macs, head_macs)
            row = metrics.summarize(f"{t}@{point_name}", recs, base_recs, base_bytes, size, base_total,
                                    cascade=True, threshold=thr)
            rows.append(row)
            if point_name == e["operating_point"]:
                summary = row
                chosen = thr
        cascade = cascade.with_thresholds([chosen] * len(cascade.heads))
        artifacts["cascade"] = os.path.join(out, "cascade")
        stage("report", exits.save_cascade, cascade, artifacts["cascade"])

    summary.peak_rss_kb = peak_rss_kb()
    artifacts["summary_json"] = _write(os.path.join(out, "summary.json"), metrics.summaries_to_json(rows))
    artifacts["summary_csv"] = _write(os.path.join(out, "summary.csv"), metrics.summaries_to_csv(rows))
    manifest = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "technique": t,
        "stages": _dedupe(stage.order),
        "artifacts": {k: os.path.relpath(v, out) for k, v in sorted(artifacts.items())},
        "extras": extras,
        "data": {"train": len(train), "calib": len(calib), "eval": len(evals)},
    }
    artifacts["experiment"] = _write(os.path.join(out, "experiment.json"), json.dumps(manifest, indent=2))
    return ExperimentResult(summary, rows, artifacts, out, manifest["stages"], sweep, extras)


def _check_partition(cascade: exits.CascadeModel, base: Graph):
    """The segments must tile the backbone exactly before anything is quantized."""
    layers = [layer for seg in cascade.segments for layer in seg.layers]
    if len(layers) != len(base.layers) or any(a != b for a, b in zip(layers, base.layers)):
        raise ValueError("cascade segments do not tile the backbone")


def _dedupe(seq):
    out = []
    for s in seq:
        if not out or out[-1] != s:
            out.append(s)
    return out
