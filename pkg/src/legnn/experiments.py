"""Seeded experiment orchestration: single runs, synthetic sweeps, ablations
and result emission (JSON / CSV / plot series)."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbones import KINDS, METHODS, BackboneConfig, init_params
from .errors import LegnnError, UsageError
from .graph import Graph, compute_homophily, generate_synthetic, label_features, load_dataset
from .metrics import class_label_differences, evaluate
from .training import TrainConfig, infer_output, train

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "LEGNN_OUTPUT_ROOT"
HISTORY_FIELDS = ("seed", "epoch", "lr", "loss", "train_acc", "val_acc", "num_pseudo", "tc", "pseudo_acc")

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
_BACKBONE_FIELDS = {f.name for f in dataclasses.fields(BackboneConfig)} - {"kind", "method"}


@dataclass
class ExperimentConfig:
    dataset: str
    method: str = "legnn"
    backbone: str = "gcn"
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/experiment"
    synthetic_seed: int = 0
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    model: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"method: expected one of {METHODS}, got {self.method!r}")
        if self.backbone not in KINDS:
            raise UsageError(f"backbone: expected one of {KINDS}, got {self.backbone!r}")
        if not self.seeds:
            raise UsageError("seeds: need at least one seed")
        if self.workers < 1:
            raise UsageError("workers: must be >= 1")
        if self.model.kind != self.backbone or self.model.method != self.method:
            self.model = dataclasses.replace(self.model, kind=self.backbone, method=self.method)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        """Validate a flat config mapping; unknown keys and bad types raise UsageError."""
        if not isinstance(raw, dict):
            raise UsageError("config: top level must be a JSON object")
        top = {"dataset", "method", "backbone", "seeds", "output_dir", "synthetic_seed", "workers"}
        unknown = set(raw) - top - _TRAIN_FIELDS - _BACKBONE_FIELDS
        if unknown:
            raise UsageError(f"{sorted(unknown)[0]}: unknown config field")
        if "dataset" not in raw:
            raise UsageError("dataset: required field missing")
        kinds = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
        kinds.update({f.name: f.type for f in dataclasses.fields(BackboneConfig)})
        for key, value in raw.items():
            _check_type(key, value, kinds.get(key))
        method = raw.get("method", "legnn")
        backbone = raw.get("backbone", "gcn")
        if method not in METHODS:
            raise UsageError(f"method: expected one of {METHODS}, got {method!r}")
        if backbone not in KINDS:
            raise UsageError(f"backbone: expected one of {KINDS}, got {backbone!r}")
        try:
            train_cfg = TrainConfig(**{k: v for k, v in raw.items() if k in _TRAIN_FIELDS})
            model_cfg = BackboneConfig(
                kind=backbone, method=method,
                **{k: v for k, v in raw.items() if k in _BACKBONE_FIELDS},
            )
        except TypeError as exc:
            raise UsageError(f"config: {exc}") from None
        return cls(
            dataset=raw["dataset"],
            method=method,
            backbone=backbone,
            seeds=[int(s) for s in raw.get("seeds", [0])],
            output_dir=raw.get("output_dir", "runs/experiment"),
            synthetic_seed=int(raw.get("synthetic_seed", 0)),
            workers=int(raw.get("workers", 1)),
            train=train_cfg,
            model=model_cfg,
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        """Flat mapping with every default spelled out."""
        out = {
            "dataset": self.dataset,
            "method": self.method,
            "backbone": self.backbone,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "synthetic_seed": self.synthetic_seed,
            "workers": self.workers,
        }
        train_d = dataclasses.asdict(self.train)
        train_d.pop("seed")
        out.update(train_d)
        model_d = dataclasses.asdict(self.model)
        model_d.pop("kind")
        model_d.pop("method")
        out.update(model_d)
        return out

    def with_overrides(self, **changes) -> "ExperimentConfig":
        raw = self.to_dict()
        raw.update(changes)
        return ExperimentConfig.from_dict(raw)

    def resolved_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        if root and not out.is_absolute():
            return Path(root) / out
        return out


def _check_type(key, value, annotation):
    expected = {
        "dataset": str, "method": str, "backbone": str, "output_dir": str,
        "synthetic_seed": int, "workers": int, "seeds": list,
    }.get(key)
    if expected is None and annotation is not None:
        text = str(annotation)
        if "list" in text:
            expected = (list, type(None)) if "None" in text else list
        elif text.startswith("bool"):
            expected = bool
        elif text.startswith("int"):
            expected = int
        elif text.startswith("float"):
            expected = (int, float)
        elif text.startswith("str"):
            expected = (str, type(None)) if "None" in text else str
    if expected is None:
        return
    if isinstance(value, bool) and expected in (int, (int, float)):
        raise UsageError(f"{key}: expected a number, got a boolean")
    if not isinstance(value, expected):
        raise UsageError(f"{key}: wrong type {type(value).__name__}")
    if key == "seeds" and not all(isinstance(s, int) and not isinstance(s, bool) for s in value):
        raise UsageError("seeds: must be a list of integers")


@dataclass
class RunResult:
    config: dict
    per_seed: list[dict]
    aggregate: dict
    histories: dict[int, list[dict]]
    wall_clock: dict[int, float]

    def to_dict(self) -> dict:
        return {"config": self.config, "per_seed": self.per_seed, "aggregate": self.aggregate}


def _split_metrics(g: Graph, out, nodes) -> dict:
    pred = out.probs.data[nodes].argmax(axis=1)
    rep = evaluate(pred, g.labels[nodes], g.num_classes)
    return {"accuracy": rep.accuracy, "macro_f1": rep.macro_f1}


def _graph_difference(Z, labels, nodes, C) -> float | None:
    lds = class_label_differences(Z[nodes], labels[nodes], C)
    return float(np.mean(list(lds.values()))) if lds else None


def run_seed(g: Graph, config: ExperimentConfig, seed: int) -> dict:
    """Train and evaluate one seed; returns metrics, history and timing."""
    start = time.perf_counter()
    E = label_features(g.num_classes)
    train_cfg = dataclasses.replace(config.train, seed=seed)
    params = init_params(config.model, g.num_features, g.num_classes, E.shape[1], seed=seed)
    result = train(g, E, params, config.model, train_cfg)
    out = infer_output(g, E, result.params, config.model)
    Z = out.Z_N.data
    entry = {
        "seed": seed,
        "status": "ok",
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "train": _split_metrics(g, out, g.train),
        "valid": _split_metrics(g, out, g.valid),
        "test": _split_metrics(g, out, g.test),
        "gd_test": _graph_difference(Z, g.labels, g.test, g.num_classes),
        "gd_all": _graph_difference(Z, g.labels, g.labeled, g.num_classes),
    }
    return {"entry": entry, "history": result.history, "wall_clock": time.perf_counter() - start}


def _run_seed_safe(args):
    g, config, seed = args
    try:
        return run_seed(g, config, seed)
    except LegnnError as exc:
        log.warning("seed %d failed: %s", seed, exc)
        return {
            "entry": {"seed": seed, "status": "failed", "error": exc.code, "message": str(exc)},
            "history": [],
            "wall_clock": 0.0,
        }


def _aggregate(entries: list[dict]) -> dict:
    ok = [e for e in entries if e["status"] == "ok"]
    agg = {"seeds": [e["seed"] for e in ok], "failed": [e["seed"] for e in entries if e["status"] != "ok"]}
    if not ok:
        return agg
    paths = [(s, m) for s in ("train", "valid", "test") for m in ("accuracy", "macro_f1")]
    for split, metric in paths:
        vals = np.array([e[split][metric] for e in ok])
        agg[f"{split}_{metric}_mean"] = float(vals.mean())
        agg[f"{split}_{metric}_std"] = float(vals.std())
    for key in ("gd_test", "gd_all"):
        vals = np.array([e[key] for e in ok if e[key] is not None])
        if len(vals):
            agg[f"{key}_mean"] = float(vals.mean())
            agg[f"{key}_std"] = float(vals.std())
    return agg


def run_experiment(config: ExperimentConfig, graph: Graph | None = None, write: bool = True) -> RunResult:
    """Train every seed, evaluate on the test split, optionally write outputs."""
    g = graph if graph is not None else load_dataset(config.dataset)
    jobs = [(g, config, s) for s in config.seeds]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outs = list(pool.map(_run_seed_safe, jobs))
    else:
        outs = [_run_seed_safe(j) for j in jobs]
    entries = [o["entry"] for o in outs]
    result = RunResult(
        config=config.to_dict(),
        per_seed=entries,
        aggregate=_aggregate(entries),
        histories={s: o["history"] for s, o in zip(config.seeds, outs)},
        wall_clock={s: o["wall_clock"] for s, o in zip(config.seeds, outs)},
    )
    if write:
        out_dir = config.resolved_output_dir()
        emit_results(result, "json", out_dir)
        emit_results(result, "csv", out_dir)
        emit_results(result, "plotdata", out_dir)
    return result


@dataclass
class SweepResult:
    config: dict
    methods: list[str]
    rows: list[dict]  # one per S value


def run_synthetic_sweep(
    config: ExperimentConfig,
    s_values,
    methods=("vanilla", "legnn"),
    graph: Graph | None = None,
    write: bool = True,
) -> SweepResult:
    """Train each method on the base graph plus ``S`` random cross-label edges.

    Every S uses the same generator seed, so smaller edge sets are prefixes of
    larger ones.
    """
    base = graph if graph is not None else load_dataset(config.dataset)
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"methods: unknown method {m!r}")
    rows = []
    for S in s_values:
        row = {"S": int(S)}
        try:
            g = generate_synthetic(base, int(S), config.synthetic_seed)
        except LegnnError as exc:
            row.update({"status": "failed", "error": exc.code, "message": str(exc)})
            rows.append(row)
            continue
        row["homophily"] = compute_homophily(g)
        row["status"] = "ok"
        for m in methods:
            res = run_experiment(config.with_overrides(method=m), graph=g, write=False)
            agg = res.aggregate
            row[f"{m}_test_accuracy_mean"] = agg.get("test_accuracy_mean")
            row[f"{m}_test_accuracy_std"] = agg.get("test_accuracy_std")
            row[f"{m}_gd_test_mean"] = agg.get("gd_test_mean")
        rows.append(row)
    result = SweepResult(config.to_dict(), list(methods), rows)
    if write:
        out_dir = config.resolved_output_dir()
        emit_results(result, "json", out_dir)
        emit_results(result, "csv", out_dir)
        emit_results(result, "plotdata", out_dir)
    return result


ABLATIONS = ("tns", "tc", "ec", "both")


@dataclass
class AblationResult:
    config: dict
    kind: str
    rows: list[dict]  # one per variant


def _variant_row(name: str, res: RunResult) -> dict:
    agg = res.aggregate
    row = {"variant": name}
    for split in ("train", "valid", "test"):
        for metric in ("accuracy", "macro_f1"):
            row[f"{split}_{metric}"] = agg.get(f"{split}_{metric}_mean")
    row["gd_test"] = agg.get("gd_test_mean")
    return row


def run_ablation(config: ExperimentConfig, kind: str, graph: Graph | None = None, write: bool = True) -> AblationResult:
    """Compare the configured model against a variant with one mechanism removed.

    ``tns`` connects every training node to its label and predicts all of
    them; ``tc`` / ``ec`` / ``both`` drop the training and/or evaluating
    confidence from pseudo-label gating and weighting.
    """
    if kind not in ABLATIONS:
        raise UsageError(f"kind: expected one of {ABLATIONS}, got {kind!r}")
    if kind == "tns" and config.method == "vanilla":
        raise UsageError("kind: the tns ablation needs a label-using method, not vanilla")
    if kind != "tns" and not config.train.self_training:
        raise UsageError(f"kind: the {kind} ablation needs self_training enabled")
    g = graph if graph is not None else load_dataset(config.dataset)
    if kind == "tns":
        variants = [("w_tns", {}), ("wo_tns", {"use_tns": False})]
    else:
        off = {"tc": {"use_tc": False}, "ec": {"use_ec": False},
               "both": {"use_tc": False, "use_ec": False}}[kind]
        variants = [("full", {}), (f"wo_{kind}", off), ("no_self_training", {"self_training": False})]
    rows = []
    for name, changes in variants:
        res = run_experiment(config.with_overrides(**changes), graph=g, write=False)
        rows.append(_variant_row(name, res))
    result = AblationResult(config.to_dict(), kind, rows)
    if write:
        out_dir = config.resolved_output_dir()
        emit_results(result, "json", out_dir)
        emit_results(result, "csv", out_dir)
    return result


# -- emission --------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_results(results, fmt: str, out_dir) -> list[Path]:
    """Write ``results`` as ``json`` (result.json), ``csv`` (history.csv or the
    sweep/ablation table) or ``plotdata`` (two-column TSV series)."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc.strerror}") from None
    written = []
    if fmt == "json":
        if isinstance(results, RunResult):
            payload = results.to_dict()
            timing = {str(k): v for k, v in results.wall_clock.items()}
            p = out_dir / "timing.json"
            p.write_text(json.dumps({"wall_clock_s": timing}, indent=2) + "\n", encoding="utf-8")
            written.append(p)
        else:
            payload = dataclasses.asdict(results)
        p = out_dir / "result.json"
        p.write_text(json.dumps(_jsonable(payload), indent=2) + "\n", encoding="utf-8")
        written.append(p)
    elif fmt == "csv":
        if isinstance(results, RunResult):
            p = out_dir / "history.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(HISTORY_FIELDS)
                for seed, hist in results.histories.items():
                    for rec in hist:
                        w.writerow([_fmt(seed)] + [_fmt(rec.get(k)) for k in HISTORY_FIELDS[1:]])
        else:
            name = "sweep.csv" if isinstance(results, SweepResult) else "ablation.csv"
            p = out_dir / name
            columns: list[str] = []
            for row in results.rows:
                columns += [k for k in row if k not in columns]
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(columns)
                for row in results.rows:
                    w.writerow([_fmt(row.get(c)) for c in columns])
        written.append(p)
    elif fmt == "plotdata":
        pdir = out_dir / "plotdata"
        pdir.mkdir(exist_ok=True)
        series: dict[str, list[tuple]] = {}
        if isinstance(results, RunResult):
            for seed, hist in results.histories.items():
                for key in ("train_acc", "val_acc", "loss", "num_pseudo"):
                    series[f"{key}_seed{seed}"] = [(r["epoch"], r[key]) for r in hist]
        elif isinstance(results, SweepResult):
            ok = [r for r in results.rows if r.get("status") == "ok"]
            series["homophily"] = [(r["S"], r["homophily"]) for r in ok]
            for m in results.methods:
                series[f"accuracy_{m}"] = [(r["S"], r[f"{m}_test_accuracy_mean"]) for r in ok]
        else:
            raise UsageError("plotdata: only run and sweep results have series")
        for name, pts in series.items():
            p = pdir / f"{name}.tsv"
            with open(p, "w", encoding="utf-8") as fh:
                fh.write("x\ty\n")
                for x, y in pts:
                    fh.write(f"{_fmt(x)}\t{_fmt(y)}\n")
            written.append(p)
    else:
        raise UsageError(f"format: expected json, csv or plotdata, got {fmt!r}")
    return written
