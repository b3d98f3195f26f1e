"""Command-line harness: data generation, training, grids, sweeps, and
analysis reports.

Every writing subcommand requires --seed and --out-dir. Commands are
idempotent: run records already present in the output directory are reused
instead of recomputed, so repeating an invocation with identical flags
reproduces identical files. The exit code is 0 only when every requested
run reached status "ok".
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import Rng
from .harness import (
    bootstrap_peak,
    em_comparison,
    load_records,
    population_sweep,
    recurrence_grid,
    record_path,
    run_grid,
    save_record,
    load_record,
    simple_grid,
    write_bootstrap_report,
    write_comparison_report,
    write_grid_report,
    write_sweep_report,
)
from .model import AggregationSpec, deserialize, serialize
from .tasks import draw_gmm2, generate_dataset, sample_gmm2, write_dataset
from .training import TrainConfig, train


def parse_aggregation(text: str, recurrent_steps: int = 3) -> AggregationSpec:
    """Parse an aggregation label: a plain kind ("mean", "sum", "max",
    "logsumexp", "percentile:0.5"), or "q-"/"r-" prefixed for the query
    and recurrent variants wrapping that base kind."""
    variant = "simple"
    if text.startswith("q-"):
        variant, text = "query", text[2:]
    elif text.startswith("r-"):
        variant, text = "recurrent", text[2:]
    p = None
    kind = text
    if text.startswith("percentile:"):
        kind, p = "percentile", float(text.split(":", 1)[1])
    return AggregationSpec(variant=variant, kind=kind, p=p, steps=recurrent_steps)


def _config_from_args(args) -> TrainConfig:
    if args.config:
        base = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        base = TrainConfig.defaults(args.task)
    overrides = {"seed": args.seed}
    if args.task:
        overrides["task"] = args.task
        overrides["head"] = "circle_head" if args.task == "circle" else "beta_head"
    for flag, key in [("steps", "steps"), ("batch_size", "batch_size"),
                      ("lr", "learning_rate"), ("n_min", "n_min"), ("n_max", "n_max")]:
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    if args.equiv_agg:
        overrides["equivariant_agg"] = parse_aggregation(args.equiv_agg, args.recurrent_steps)
    if args.final_agg:
        overrides["final_agg"] = parse_aggregation(args.final_agg, args.recurrent_steps)
    d = base.to_dict()
    d.update({k: v for k, v in overrides.items()
              if not isinstance(v, AggregationSpec)})
    config = TrainConfig.from_dict(d)
    for key in ("equivariant_agg", "final_agg"):
        if key in overrides and isinstance(overrides[key], AggregationSpec):
            from dataclasses import replace
            config = replace(config, **{key: overrides[key]})
    return config


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with a full TrainConfig")
    p.add_argument("--task", choices=["circle", "mixture"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--n-min", type=int, dest="n_min")
    p.add_argument("--n-max", type=int, dest="n_max")
    p.add_argument("--equiv-agg", dest="equiv_agg",
                   help='e.g. "mean", "logsumexp", "q-sum", "r-sum"')
    p.add_argument("--final-agg", dest="final_agg")
    p.add_argument("--recurrent-steps", type=int, default=3, dest="recurrent_steps")


def _require_out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    out = _require_out(args)
    rng = Rng(args.seed)
    records = generate_dataset(args.task, rng, args.count, args.n)
    path = out / "dataset.jsonl"
    write_dataset(path, records)
    print(f"wrote {path} ({len(records)} populations)")
    return 0


def cmd_train(args) -> int:
    out = _require_out(args)
    config = _config_from_args(args)
    rec_path = record_path(out, "train")
    model_path = out / "model-train.json"
    if rec_path.exists() and model_path.exists():
        rec = load_record(rec_path)
        print(f"reusing {rec_path}")
    else:
        model, rec = train(config)
        rec.meta.update(run_id="train", agg_equiv=config.equivariant_agg.label(),
                        agg_final=config.final_agg.label())
        save_record(rec_path, rec)
        model_path.write_text(serialize(model))
        print(f"wrote {rec_path}")
        print(f"wrote {model_path}")
    print(f"status: {rec.status}; metrics: {json.dumps(rec.metrics, sort_keys=True)}")
    return 0 if rec.status == "ok" else 1


def cmd_grid(args) -> int:
    out = _require_out(args)
    base = _config_from_args(args)
    grid = simple_grid() if args.grid == "simple" else recurrence_grid(args.recurrent_steps)
    records = run_grid(base, grid, args.repeats, out,
                       log=lambda msg: print(msg, flush=True))
    csv_path, json_path = write_grid_report(records, out)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    bad = [r.meta.get("run_id") for r in records if r.status != "ok"]
    if bad:
        print(f"non-ok runs: {bad}")
        return 1
    return 0


def _mother_population(args, rng: Rng):
    gmm = draw_gmm2(rng.child("mother"))
    mother = sample_gmm2(rng.child("mother-draw"), gmm, args.mother_n)
    return mother, gmm.weight_small


def cmd_sweep(args) -> int:
    out = _require_out(args)
    model = deserialize(Path(args.model).read_text())
    sizes = [int(s) for s in args.sizes.split(",")]
    rng = Rng(args.seed)
    if args.task == "mixture":
        mother, true_w = _mother_population(args, rng)
        sweep = population_sweep(model, "mixture", sizes, args.resamples,
                                 rng.child("sweep"), mother=mother, true_value=true_w)
    else:
        sweep = population_sweep(model, "circle", sizes, args.resamples,
                                 rng.child("sweep"))
    csv_path, json_path = write_sweep_report(sweep, out)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    return 0


def cmd_compare_em(args) -> int:
    out = _require_out(args)
    model = deserialize(Path(args.model).read_text())
    sizes = [int(s) for s in args.sizes.split(",")]
    rng = Rng(args.seed)
    mother, true_w = _mother_population(args, rng)
    rows = em_comparison(model, mother, true_w, sizes, rng.child("compare"),
                         draws=args.draws)
    csv_path, json_path = write_comparison_report(rows, out)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_bootstrap(args) -> int:
    out = _require_out(args)
    records = load_records(args.records_dir)
    values = [r.metrics[args.metric] for r in records
              if r.status == "ok" and args.metric in r.metrics]
    rng = Rng(args.seed)
    estimate = bootstrap_peak(values, args.batch_size, args.resamples, rng)
    result = {"metric": args.metric, "batch_size": args.batch_size,
              "resamples": args.resamples, "runs": len(values),
              "median_best": estimate}
    csv_path, json_path = write_bootstrap_report(result, out)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    return 0


def cmd_report(args) -> int:
    out = _require_out(args)
    records = load_records(args.records_dir)
    csv_path, json_path = write_grid_report(records, out)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    return 0 if all(r.status == "ok" for r in records) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setnets",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def writer(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out-dir", required=True, dest="out_dir")
        p.set_defaults(fn=fn)
        return p

    p = writer("gen-data", cmd_gen_data, help="write a dataset file")
    p.add_argument("--task", choices=["circle", "mixture"], required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--n", type=int, default=20)

    p = writer("train", cmd_train, help="train one model")
    _add_train_flags(p)

    p = writer("grid", cmd_grid, help="train a grid of aggregation configs")
    _add_train_flags(p)
    p.add_argument("--grid", choices=["simple", "recurrence"], default="simple")
    p.add_argument("--repeats", type=int, default=5)

    p = writer("sweep", cmd_sweep, help="population-size sweep of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--task", choices=["circle", "mixture"], required=True)
    p.add_argument("--sizes", default="10,20,50,100,200,500,1000")
    p.add_argument("--resamples", type=int, default=100)
    p.add_argument("--mother-n", type=int, default=1000, dest="mother_n")

    p = writer("compare-em", cmd_compare_em, help="score a model against EM")
    p.add_argument("--model", required=True)
    p.add_argument("--sizes", default="10,20,50,100,200,500,1000")
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--mother-n", type=int, default=1000, dest="mother_n")

    p = writer("bootstrap", cmd_bootstrap, help="bootstrap peak performance")
    p.add_argument("--records-dir", required=True, dest="records_dir")
    p.add_argument("--metric", default="best_mse")
    p.add_argument("--batch-size", type=int, default=5, dest="batch_size")
    p.add_argument("--resamples", type=int, default=10000)

    p = writer("report", cmd_report, help="rebuild CSV/JSON reports from records")
    p.add_argument("--records-dir", required=True, dest="records_dir")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
