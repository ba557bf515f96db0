"""Run an experiment grid: one directory per cell, one CSV + JSON per seed.

Layout under the output root::

    <name>/spec.json                      resolved spec and its hash
    <name>/<cell_id>/seed<k>.csv          one row per round
    <name>/<cell_id>/seed<k>.json         run summary (resolved config embedded)
    <name>/<cell_id>/seed<k>.ckpt         final model checkpoint
    <name>/<cell_id>/summary.json         mean/std of final accuracy over seeds

``cell_id`` ends with a prefix of the cell's config hash, so a rerun of an
unchanged cell finds its finished files and skips the work unless forced.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_params
from .config import Cell, ExperimentSpec
from .data import Dataset, load_cifar_binary, load_idx_gzip, partition_by_classes, synth_classification
from .engine import run_training
from .privacy import calibrate_sigma
from .tensor import Rng

log = logging.getLogger(__name__)

ROUND_COLUMNS = ("round", "mean_train_loss", "mean_accuracy", "epsilon_so_far", "cohort_size",
                 "mean_update_norm_pre_clip", "clip_fraction")
PLOT_METRICS = ("mean_train_loss", "mean_accuracy", "epsilon_so_far")


@dataclass
class MetricsRecord:
    """Outcome of one grid cell over all its seeds."""

    experiment_id: str
    config_hash: str
    label: str
    axes: dict
    config: dict
    seeds: list
    series: dict = field(default_factory=dict)  # seed -> list of per-round dicts
    final_accuracy: dict = field(default_factory=dict)  # seed -> float
    privacy: dict = field(default_factory=dict)
    failed: dict = field(default_factory=dict)  # seed -> error text
    path: str = ""

    @property
    def status(self) -> str:
        return "failed" if self.failed else "ok"

    @property
    def accuracy_mean(self) -> float:
        vals = list(self.final_accuracy.values())
        return float(np.mean(vals)) if vals else math.nan

    @property
    def accuracy_std(self) -> float:
        vals = list(self.final_accuracy.values())
        return float(np.std(vals)) if vals else math.nan

    def summary(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "config_hash": self.config_hash,
            "label": self.label,
            "axes": self.axes,
            "config": self.config,
            "seeds": self.seeds,
            "status": self.status,
            "failed": {str(k): v for k, v in self.failed.items()},
            "final_accuracy": {str(k): v for k, v in self.final_accuracy.items()},
            "final_accuracy_mean": _json_num(self.accuracy_mean),
            "final_accuracy_std": _json_num(self.accuracy_std),
            "privacy": self.privacy,
        }


def _json_num(x: float):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def rounds_to_csv(rounds: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_COLUMNS)
    for r in rounds:
        w.writerow([_fmt(r[c]) for c in ROUND_COLUMNS])
    return buf.getvalue()


def rounds_from_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [{c: (int(r[c]) if c in ("round", "cohort_size") else float(r[c])) for c in ROUND_COLUMNS}
            for r in rows]


def load_dataset(data: dict, seed: int) -> Dataset:
    """Build or read the dataset a cell describes; synthetic data depends on ``seed``."""
    if data["source"] == "synthetic":
        return synth_classification(data["num_classes"], data["per_class"], data["dim"],
                                    data["separation"], Rng(seed).child("data"))
    if data["source"] == "idx":
        return load_idx_gzip(data["images"], data["labels"])
    return load_cifar_binary(data["path"], data["cifar_variant"])


def resolve_sigma(cell: Cell) -> float:
    if cell.privacy["sigma"] is not None:
        return cell.privacy["sigma"]
    return calibrate_sigma(cell.privacy["epsilon"], cell.privacy["delta"],
                           cell.train["sample_prob"], cell.train["rounds"])


def run_cell_seed(cell: Cell, seed: int, sigma: float):
    """Train one cell at one seed; returns the TrainingReport."""
    config = cell.train_config(seed)
    data = load_dataset(cell.data, seed)
    plan = partition_by_classes(data, config.num_clients, cell.data["classes_per_client"],
                                Rng(seed).child("partition"), cell.data["train_fraction"])
    return run_training(config, cell.privacy_params(sigma), plan.shards(data),
                        evaluate_every=cell.eval_every)


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _run_cell(spec: ExperimentSpec, cell: Cell, root: Path, force: bool) -> MetricsRecord:
    cdir = root / cell.cell_id
    cdir.mkdir(parents=True, exist_ok=True)
    rec = MetricsRecord(spec.name, cell.config_hash, cell.label, cell.axes,
                        {**cell.canonical(), "seeds": list(spec.seeds)}, list(spec.seeds), path=str(cdir))
    try:
        sigma = resolve_sigma(cell)
    except Exception as e:  # calibration failure fails every seed of the cell
        rec.failed = {s: f"{type(e).__name__}: {e}" for s in spec.seeds}
        _write_text(cdir / "summary.json", json.dumps(rec.summary(), indent=2, sort_keys=True))
        return rec
    for seed in spec.seeds:
        csv_path, js_path = cdir / f"seed{seed}.csv", cdir / f"seed{seed}.json"
        if not force and csv_path.exists() and js_path.exists():
            prior = json.loads(js_path.read_text())
            if prior.get("config_hash") == cell.config_hash and prior.get("status") == "ok":
                log.info("%s seed %d: up to date, skipped", cell.label, seed)
                rec.series[seed] = rounds_from_csv(csv_path.read_text())
                rec.final_accuracy[seed] = prior["final"]["mean"]
                rec.privacy = prior["privacy_report"]
                continue
        try:
            report = run_cell_seed(cell, seed, sigma)
        except Exception as e:
            log.error("%s seed %d failed: %s", cell.label, seed, e)
            rec.failed[seed] = f"{type(e).__name__}: {e}"
            _write_text(js_path, json.dumps({"config_hash": cell.config_hash, "status": "failed",
                                             "error": traceback.format_exc()}, indent=2))
            continue
        _write_text(csv_path, rounds_to_csv(report.rounds))
        save_params(report.params, cdir / f"seed{seed}.ckpt")
        summary = {
            "experiment_id": spec.name,
            "config_hash": cell.config_hash,
            "status": "ok",
            "label": cell.label,
            "seed": seed,
            "config": {**report.config, "privacy": report.privacy, "data": cell.data,
                       "eval_every": cell.eval_every},
            "final": report.final,
            "privacy_report": report.privacy_reports[-1],
            "rounds": report.rounds,
        }
        _write_text(js_path, json.dumps(summary, indent=2, sort_keys=True, allow_nan=True))
        rec.series[seed] = report.rounds
        rec.final_accuracy[seed] = report.final["mean"]
        rec.privacy = report.privacy_reports[-1]
    _write_text(cdir / "summary.json", json.dumps(rec.summary(), indent=2, sort_keys=True))
    return rec


def run_experiment(spec: ExperimentSpec, out_dir, force: bool = False,
                   workers: int = 1) -> list[MetricsRecord]:
    """Run every cell x seed of ``spec`` under ``out_dir/<name>``.

    A failing seed marks its cell failed; other cells and seeds still run.
    Cells may run on worker threads since each owns its files and RNG streams.
    """
    root = Path(out_dir) / spec.name
    root.mkdir(parents=True, exist_ok=True)
    _write_text(root / "spec.json", json.dumps({"config_hash": spec.config_hash, "spec": spec.canonical()},
                                               indent=2, sort_keys=True))
    cells = spec.cells()
    if workers > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda c: _run_cell(spec, c, root, force), cells))
    else:
        records = [_run_cell(spec, c, root, force) for c in cells]
    emit_plots_data(records, root / "plots.csv")
    return records


def emit_plots_data(records: Sequence[MetricsRecord], path=None,
                    metrics: Sequence[str] = PLOT_METRICS) -> str:
    """Long-format CSV (round, metric, value, algorithm, seed); rounds without a value are omitted."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("round", "metric", "value", "algorithm", "seed"))
    for rec in records:
        for seed in sorted(rec.series):
            for r in rec.series[seed]:
                for m in metrics:
                    v = r[m]
                    if v is None or (isinstance(v, float) and math.isnan(v)):
                        continue
                    w.writerow((r["round"], m, _fmt(v), rec.label, seed))
    text = buf.getvalue()
    if path is not None:
        _write_text(Path(path), text)
    return text
