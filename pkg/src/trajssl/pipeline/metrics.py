"""Metrics records, their CSV/JSON files, embedding dumps and run comparison."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics.json"
CSV_FIELDS = ("scenario", "layer", "accuracy", "n_eval", "seed", "wall_time_s")


@dataclass(frozen=True)
class MetricsRecord:
    scenario: str
    layer: str
    correct: int
    n_eval: int
    seed: int
    wall_time: float = 0.0

    def __post_init__(self):
        if self.n_eval <= 0 or not 0 <= self.correct <= self.n_eval:
            raise ValueError(f"invalid counts {self.correct}/{self.n_eval}")

    @property
    def accuracy(self) -> float:
        return self.correct / self.n_eval

    def row(self, timings: bool = False) -> dict:
        return {
            "scenario": self.scenario, "layer": self.layer, "accuracy": repr(self.accuracy),
            "n_eval": self.n_eval, "seed": self.seed,
            "wall_time_s": f"{self.wall_time:.3f}" if timings else "",
        }


def metrics_csv(records, timings: bool = False) -> str:
    """CSV text. Wall time is left blank unless ``timings`` so reruns are byte-identical."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r.row(timings))
    return buf.getvalue()


def write_metrics(out_dir, records, timings: bool = False):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, METRICS_CSV), "w", newline="") as fh:
        fh.write(metrics_csv(records, timings))
    doc = [{**asdict(r), "accuracy": r.accuracy} for r in records]
    if not timings:
        for d in doc:
            del d["wall_time"]
    with open(os.path.join(out_dir, METRICS_JSON), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_metrics(run_dir) -> list:
    path = os.path.join(run_dir, METRICS_JSON)
    with open(path) as fh:
        doc = json.load(fh)
    return [MetricsRecord(d["scenario"], d["layer"], d["correct"], d["n_eval"], d["seed"], d.get("wall_time", 0.0))
            for d in doc]


def dump_embeddings(path_prefix, matrix: np.ndarray, index: list, meta: dict | None = None):
    """Write ``<prefix>.f32`` (little-endian float32, row-major) and ``<prefix>.json``."""
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    with open(f"{path_prefix}.f32", "wb") as fh:
        fh.write(mat.tobytes())
    side = {"dtype": "float32-le", "shape": list(mat.shape),
            "index_fields": ["category", "instance", "pose_index"], "index": [list(map(int, r)) for r in index]}
    if meta:
        side["meta"] = meta
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(side, fh, sort_keys=True)
        fh.write("\n")


def load_embeddings(path_prefix) -> tuple:
    with open(f"{path_prefix}.json") as fh:
        side = json.load(fh)
    mat = np.fromfile(f"{path_prefix}.f32", dtype="<f4").reshape(side["shape"])
    return mat, side["index"]


@dataclass(frozen=True)
class ReportRow:
    method: str
    scenario: str
    layer: str
    mean: float
    std: float
    n_runs: int
    delta: float | None = None


def merge_runs(runs: list) -> tuple:
    """Group metrics by (method, scenario, layer) and add traj minus baseline deltas.

    ``runs`` holds ``(method_label, seed, records)`` triples. Returns the
    report rows and a list of warnings (e.g. seed sets that differ between
    methods); mismatched runs are still merged.
    """
    groups: dict = {}
    seeds: dict = {}
    for method, seed, records in runs:
        seeds.setdefault(method, set()).add(seed)
        for r in records:
            groups.setdefault((method, r.scenario, r.layer), []).append(r.accuracy)
    warnings = []
    seed_sets = {m: tuple(sorted(s)) for m, s in seeds.items()}
    if len(set(seed_sets.values())) > 1:
        warnings.append("seed sets differ between methods: "
                        + "; ".join(f"{m}={list(s)}" for m, s in sorted(seed_sets.items())))
    means = {k: float(np.mean(v)) for k, v in groups.items()}
    rows = []
    for (method, scen, layer), vals in sorted(groups.items()):
        delta = None
        if method == "traj" and ("baseline", scen, layer) in means:
            delta = means[(method, scen, layer)] - means[("baseline", scen, layer)]
        rows.append(ReportRow(method, scen, layer, means[(method, scen, layer)],
                              float(np.std(vals)), len(vals), delta))
    return rows, warnings


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "scenario", "layer", "mean", "std", "n_runs", "delta_vs_baseline"])
    for r in rows:
        w.writerow([r.method, r.scenario, r.layer, repr(r.mean), repr(r.std), r.n_runs,
                    "" if r.delta is None else repr(r.delta)])
    return buf.getvalue()


def report_text(rows) -> str:
    head = ("method", "scenario", "layer", "accuracy", "delta")
    body = []
    for r in rows:
        acc = f"{100 * r.mean:6.2f} +- {100 * r.std:5.2f}"
        delta = "" if r.delta is None or math.isnan(r.delta) else f"{100 * r.delta:+6.2f}"
        body.append((r.method, r.scenario, r.layer, acc, delta))
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head, *body]]
    return "\n".join(lines) + "\n"
