"""Experiment orchestration and analysis.

Grids of training configurations run cell by cell with derived seeds; every
cell writes its record to its own JSON file as soon as it finishes, so a
partial grid survives interruption and a rerun only computes what is
missing. Analysis covers bootstrap peak performance over run batches,
population-size sweeps of a trained estimator, and the comparison of the
model's mixture-weight estimates against EM via kernel density scores.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Rng
from .model import AggregationSpec, DeepSetModel, forward, serialize
from .tasks import (
    DegenerateKdeError,
    draw_gmm2,
    em_fit_weights,
    kde_log_score,
    sample_circle_task,
    sample_gmm2,
)
from .training import ExperimentRecord, TrainConfig, apply_head, train


class EmptyInputError(ValueError):
    """Analysis requested over an empty collection."""


# ---------------------------------------------------------------------------
# bootstrap analysis
# ---------------------------------------------------------------------------

def bootstrap_peak(values, batch_size: int, resamples: int, rng: Rng) -> float:
    """Median over resampled batches of the per-batch best (minimum) value.

    Estimates the peak performance one should expect when running only
    `batch_size` experiments.
    """
    vals = np.asarray(list(values), dtype=np.float64)
    if len(vals) == 0:
        raise EmptyInputError("bootstrap over no values")
    if batch_size < 1 or resamples < 1:
        raise ValueError("batch_size and resamples must be >= 1")
    idx = rng.gen.integers(0, len(vals), size=(resamples, batch_size))
    return float(np.median(vals[idx].min(axis=1)))


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

SIMPLE_GRID_KINDS = ("mean", "max", "logsumexp")


def simple_grid() -> list[tuple[str, AggregationSpec, AggregationSpec]]:
    """All nine combinations of the three plain aggregations at the two
    sites (equivariant layers, final aggregation)."""
    cells = []
    for e in SIMPLE_GRID_KINDS:
        for f in SIMPLE_GRID_KINDS:
            cells.append((f"{e}--{f}", AggregationSpec(kind=e), AggregationSpec(kind=f)))
    return cells


def recurrence_grid(steps: int = 3) -> list[tuple[str, AggregationSpec, AggregationSpec]]:
    """The 2x2 recurrence study: plain mean versus the recurrent
    aggregation (weighted-sum base) at each site."""
    plain = AggregationSpec(variant="simple", kind="mean")
    rec = AggregationSpec(variant="recurrent", kind="sum", steps=steps)
    return [
        ("plain--plain", plain, plain),
        ("plain--rec", plain, rec),
        ("rec--plain", rec, plain),
        ("rec--rec", rec, rec),
    ]


def derive_seed(base_seed: int, cell: str, repeat: int) -> int:
    material = f"{base_seed}/{cell}/{repeat}".encode()
    return int.from_bytes(hashlib.blake2b(material, digest_size=7).digest(), "big")


def record_path(out_dir, run_id: str) -> Path:
    return Path(out_dir) / f"record-{run_id}.json"


def save_record(path, record: ExperimentRecord) -> None:
    Path(path).write_text(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def load_record(path) -> ExperimentRecord:
    return ExperimentRecord.from_dict(json.loads(Path(path).read_text()))


def run_grid(base: TrainConfig, grid, repeats: int, out_dir,
             save_models: bool = False, log=None) -> list[ExperimentRecord]:
    """Run (or resume) every grid cell x repeat; one record file per run.

    Failures never abort the grid: a failing cell gets a record with a
    non-ok status and the sweep continues.
    """
    grid = list(grid)
    if not grid or repeats < 1:
        raise EmptyInputError("empty grid")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for cell, equiv, final in grid:
        for rep in range(repeats):
            run_id = f"{cell}-{rep:02d}"
            path = record_path(out, run_id)
            config = replace(base, equivariant_agg=equiv, final_agg=final,
                             seed=derive_seed(base.seed, cell, rep))
            if path.exists():
                rec = load_record(path)
            else:
                if log:
                    log(f"running {run_id}")
                try:
                    model, rec = train(config)
                    if save_models and rec.status == "ok":
                        (out / f"model-{run_id}.json").write_text(serialize(model))
                except Exception as exc:  # isolation: record, keep going
                    rec = ExperimentRecord(config_id=config.config_id(),
                                           seed=config.seed,
                                           status=f"error: {exc}",
                                           config=config.to_dict())
                rec.meta.update(run_id=run_id, grid_cell=cell, repeat=rep,
                                agg_equiv=equiv.label(), agg_final=final.label())
                save_record(path, rec)
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# population-size sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    """Per-size point-estimate samples and their percentile summaries."""

    task: str
    sizes: list
    values: list          # list (per size) of per-draw estimates / errors
    true_value: float | None = None
    summaries: list = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError(f"sizes must be strictly increasing: {self.sizes}")
        if not self.summaries:
            self.summaries = [_summary(v) for v in self.values]

    def to_dict(self) -> dict:
        return {"task": self.task, "sizes": list(self.sizes),
                "true_value": self.true_value,
                "summaries": self.summaries,
                "values": [list(v) for v in self.values]}


def _summary(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q = np.percentile(v, [5.0, 25.0, 50.0, 75.0, 95.0])
    return {"p05": float(q[0]), "p25": float(q[1]), "median": float(q[2]),
            "p75": float(q[3]), "p95": float(q[4])}


def _model_estimates(model: DeepSetModel, head: str, pops: np.ndarray,
                     chunk: int | None = None) -> np.ndarray:
    """Batched point estimates for stacked populations [m, n, 2]."""
    if chunk is None:
        # keep live graph memory bounded for large populations
        chunk = max(1, min(64, 8192 // max(1, pops.shape[1])))
    outs = []
    for lo in range(0, len(pops), chunk):
        pred = apply_head(head, forward(model, ad.constant(pops[lo:lo + chunk]))).values
        outs.append(pred)
    pred = np.concatenate(outs, axis=0)
    if head == "beta_head":
        return pred[:, 0] / (pred[:, 0] + pred[:, 1])
    return pred  # circle head: [m, 3] predictions


def subsample(mother: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    idx = rng.gen.integers(0, len(mother), size=n)
    return mother[idx]


def population_sweep(model: DeepSetModel, task: str, sizes, resamples: int,
                     rng: Rng, mother: np.ndarray | None = None,
                     true_value: float | None = None) -> SweepResult:
    """Track the estimator across population sizes.

    Mixture task: draws of every size are subsampled (with replacement)
    from one fixed mother population, and the tracked value is the Beta
    mean estimate of the smaller weight. Circle task: fresh populations per
    size, tracked value is the squared error against each population's own
    oracle circle.
    """
    sizes = [int(s) for s in sizes]
    values = []
    if task == "mixture":
        if mother is None:
            gmm = draw_gmm2(rng.child("mother"))
            mother = sample_gmm2(rng.child("mother-draw"), gmm, max(sizes))
            true_value = gmm.weight_small
        for n in sizes:
            srng = rng.child(f"size{n}")
            pops = np.stack([subsample(mother, n, srng.child(f"draw{i}"))
                             for i in range(resamples)])
            values.append(_model_estimates(model, "beta_head", pops).tolist())
    elif task == "circle":
        for n in sizes:
            srng = rng.child(f"size{n}")
            errs = []
            for i in range(resamples):
                points, circ = sample_circle_task(srng.child(f"draw{i}"), n)
                pred = _model_estimates(model, "circle_head", points[None])[0]
                target = np.array([circ.center[0], circ.center[1], circ.radius])
                errs.append(float(np.square(pred - target).sum()))
            values.append(errs)
    else:
        raise ValueError(f"unknown task {task!r}")
    return SweepResult(task=task, sizes=sizes, values=values, true_value=true_value)


# ---------------------------------------------------------------------------
# EM comparison
# ---------------------------------------------------------------------------

def em_comparison(model: DeepSetModel, population: np.ndarray, true_weight: float,
                  sizes, rng: Rng, draws: int = 100) -> list[dict]:
    """Score the model against EM per population size.

    For each size, gathers `draws` estimates from each method on
    subsamples of the mother population, fits a kernel density to each
    estimate set, and reports the log score ratio at the true weight.
    Positive model_vs_em means the model's estimates concentrate more
    density at the truth; em_vs_model carries the opposite sign.
    """
    rows = []
    for n in sizes:
        n = int(n)
        srng = rng.child(f"size{n}")
        pops = np.stack([subsample(population, n, srng.child(f"draw{i}"))
                         for i in range(draws)])
        model_est = _model_estimates(model, "beta_head", pops)
        em_est = []
        for i in range(draws):
            em_est.append(em_fit_weights(pops[i], srng.child(f"em{i}")))
        row = {"size": n, "status": "ok", "model_score": None, "em_score": None,
               "model_vs_em_log_ratio": None, "em_vs_model_log_ratio": None}
        try:
            ms = kde_log_score(model_est, true_weight)
            es = kde_log_score(np.asarray(em_est), true_weight)
            row.update(model_score=ms, em_score=es,
                       model_vs_em_log_ratio=ms - es,
                       em_vs_model_log_ratio=es - ms)
        except DegenerateKdeError as exc:
            row["status"] = f"degenerate_kde: {exc}"
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# reports: CSV + JSON, round-trippable
# ---------------------------------------------------------------------------

GRID_BASE_COLUMNS = ["run_id", "config_id", "seed", "agg_equiv", "agg_final", "status"]
GRID_METRICS = {
    "circle": ["best_mse", "center_mse", "radius_mse"],
    "mixture": ["beta_nll", "est_abs_err"],
}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def grid_report_rows(records) -> list[dict]:
    rows = []
    for rec in records:
        task = rec.config.get("task", "circle")
        row = {
            "run_id": rec.meta.get("run_id", ""),
            "config_id": rec.config_id,
            "seed": rec.seed,
            "agg_equiv": rec.meta.get("agg_equiv", ""),
            "agg_final": rec.meta.get("agg_final", ""),
            "status": rec.status,
        }
        for metric in GRID_METRICS[task]:
            row[metric] = rec.metrics.get(metric)
        row["steps"] = rec.config.get("steps")
        row["seconds"] = rec.seconds
        rows.append(row)
    rows.sort(key=lambda r: r["run_id"])
    return rows


def write_grid_report(records, out_dir) -> tuple[Path, Path]:
    records = list(records)
    if records:
        tasks = {rec.config.get("task", "circle") for rec in records}
        if len(tasks) > 1:
            raise ValueError(f"mixed tasks in one report: {sorted(tasks)}")
        task = tasks.pop()
    else:
        task = "circle"
    columns = GRID_BASE_COLUMNS + GRID_METRICS[task] + ["steps", "seconds"]
    rows = grid_report_rows(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "grid_report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])
    json_path = out / "grid_report.json"
    payload = {"columns": columns, "rows": rows,
               "configs": {rec.config_id: rec.config for rec in records}}
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return csv_path, json_path


_INT_COLUMNS = {"seed", "steps", "size"}
_TEXT_COLUMNS = {"run_id", "config_id", "agg_equiv", "agg_final", "status"}


def _parse_cell(column: str, text: str):
    if column in _TEXT_COLUMNS:
        return text
    if text == "":
        return None
    if column in _INT_COLUMNS:
        return int(text)
    return float(text)


def read_report_csv(path) -> list[dict]:
    """Load any report CSV back into typed rows (bitwise for floats)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        columns = next(reader)
        return [{c: _parse_cell(c, cell) for c, cell in zip(columns, row)}
                for row in reader]


def write_sweep_report(sweep: SweepResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = ["size", "p05", "p25", "median", "p75", "p95"]
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for size, summary in zip(sweep.sizes, sweep.summaries):
            writer.writerow([_fmt(size)] + [_fmt(summary[c]) for c in columns[1:]])
    json_path = out / "sweep.json"
    json_path.write_text(json.dumps(sweep.to_dict(), sort_keys=True, indent=1) + "\n")
    return csv_path, json_path


def write_comparison_report(rows, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = ["size", "status", "model_score", "em_score",
               "model_vs_em_log_ratio", "em_vs_model_log_ratio"]
    csv_path = out / "em_comparison.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])
    json_path = out / "em_comparison.json"
    json_path.write_text(json.dumps({"columns": columns, "rows": rows},
                                    sort_keys=True, indent=1) + "\n")
    return csv_path, json_path


def write_bootstrap_report(result: dict, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = list(result)
    csv_path = out / "bootstrap.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerow([_fmt(result[c]) for c in columns])
    json_path = out / "bootstrap.json"
    json_path.write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")
    return csv_path, json_path


def report(payload, out_dir) -> tuple[Path, Path]:
    """Write CSV + JSON for grid records, a sweep, or an EM comparison."""
    if isinstance(payload, SweepResult):
        return write_sweep_report(payload, out_dir)
    payload = list(payload) if not isinstance(payload, list) else payload
    if payload and isinstance(payload[0], ExperimentRecord):
        return write_grid_report(payload, out_dir)
    if payload and isinstance(payload[0], dict) and "size" in payload[0]:
        return write_comparison_report(payload, out_dir)
    if not payload:
        return write_grid_report([], out_dir)
    raise TypeError(f"cannot report {type(payload[0]).__name__} items")


def load_records(records_dir) -> list[ExperimentRecord]:
    paths = sorted(Path(records_dir).glob("record-*.json"))
    return [load_record(p) for p in paths]
