"""Command-line runner: generate data, compute importance, train, evaluate,
benchmark. Every command writes a run manifest with the fully resolved
configuration so runs can be reproduced bit-for-bit from the same flags.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, evaluation, meta
from .autodiff import NumericError
from .model import CheckpointError, load_params, save_params
from .seeding import substream, substream_int
from .tasks import (
    ChannelConfig,
    DataFormatError,
    GridSpec,
    generate_scenario,
    load_scenario_dir,
    save_scenario,
)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _write_manifest(out_dir: Path, command: str, resolved: dict, outputs: list) -> None:
    doc = {
        "command": command,
        "config": resolved,
        "outputs": sorted(str(o) for o in outputs),
        "version": __version__,
        "wallclock": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _meta_config(args) -> meta.MetaConfig:
    cfg = meta.MetaConfig(seed=args.seed)
    overrides = {}
    for name in (
        "alpha",
        "beta",
        "gamma",
        "inner_steps",
        "meta_iterations",
        "meta_batch_size",
        "importance_epochs",
        "baseline_epochs",
        "baseline_lr",
        "finetune_epochs",
    ):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "k", None) is not None:
        overrides["shots"] = args.k
    return dataclasses.replace(cfg, **overrides)


def _write_csv(path: Path, header: list, rows: list) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = GridSpec(rows=args.rows, cols=args.cols, spacing_cm=args.spacing_cm)
    config = ChannelConfig(grid=grid, samples_per_rp=args.samples_per_rp)
    outputs = []
    for k in range(args.scenarios):
        scenario = generate_scenario(
            substream_int(args.seed, "data", k), config, scenario_id=f"scenario_{k:03d}"
        )
        path = out / f"scenario_{k:03d}.json"
        save_scenario(scenario, path)
        outputs.append(path)
    _write_manifest(
        out,
        "gen",
        {
            "scenarios": args.scenarios,
            "seed": args.seed,
            "rows": args.rows,
            "cols": args.cols,
            "spacing_cm": args.spacing_cm,
            "samples_per_rp": args.samples_per_rp,
        },
        outputs,
    )
    print(f"wrote {len(outputs)} scenarios to {out}")
    return 0


def _importance_doc(vector: meta.ImportanceVector, cfg: meta.MetaConfig) -> dict:
    return {
        "task_ids": vector.task_ids,
        "importance": vector.values.tolist(),
        "average_losses": vector.average_losses.tolist(),
        "loss_matrix": [
            [None if np.isnan(v) else float(v) for v in row] for row in vector.loss_matrix
        ],
        "config": dataclasses.asdict(cfg),
    }


def _load_importance(path: Path) -> meta.ImportanceVector:
    doc = json.loads(path.read_text())
    matrix = np.array(
        [[np.nan if v is None else v for v in row] for row in doc["loss_matrix"]]
    )
    return meta.ImportanceVector(
        values=np.asarray(doc["importance"], dtype=np.float64),
        average_losses=np.asarray(doc["average_losses"], dtype=np.float64),
        loss_matrix=matrix,
        task_ids=list(doc["task_ids"]),
    )


def cmd_importance(args) -> int:
    scenarios = load_scenario_dir(args.data)
    if len(scenarios) < 2:
        raise DataFormatError(f"{args.data}: importance needs >= 2 scenarios")
    cfg = _meta_config(args)
    vector = meta.compute_importance(scenarios, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(_importance_doc(vector, cfg), indent=2))
    print(f"importance over {len(scenarios)} tasks -> {out}")
    return 0


def cmd_train(args) -> int:
    scenarios = load_scenario_dir(args.data)
    cfg = _meta_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace: list = []
    outputs = []
    resolved = dataclasses.asdict(cfg)
    resolved.update({"algorithm": args.algo, "data": str(args.data)})

    if args.algo in meta.META_ALGORITHMS:
        importance = None
        if args.algo == "tb-maml":
            if args.importance:
                importance = _load_importance(Path(args.importance))
                resolved["importance_file"] = str(args.importance)
            else:
                importance = meta.compute_importance(scenarios, cfg)
                imp_path = out / "importance.json"
                imp_path.write_text(json.dumps(_importance_doc(importance, cfg), indent=2))
                outputs.append(imp_path)
                resolved["importance_file"] = str(imp_path)
        params = meta.meta_train(args.algo, scenarios, cfg, importance=importance, trace=trace)
    elif args.algo == "conventional":
        target = scenarios[args.target]
        resolved["target"] = target.id
        task = meta.build_task_data(target, cfg.shots, cfg.seed)
        params = meta.train_conventional(task, cfg)
    elif args.algo == "transfer":
        target = scenarios[args.target]
        others = [s for s in scenarios if s.id != target.id]
        if not others:
            raise DataFormatError("transfer needs at least 2 scenarios")
        source = others[int(substream(cfg.seed, "transfer-source").integers(len(others)))]
        resolved.update({"target": target.id, "source": source.id})
        task = meta.build_task_data(target, cfg.shots, cfg.seed)
        params = meta.train_transfer(source, task, cfg)
    else:  # unreachable: argparse restricts choices
        raise ValueError(args.algo)

    ckpt = out / "checkpoint.json"
    save_params(params, ckpt)
    outputs.append(ckpt)
    trace_path = out / "trace.csv"
    _write_csv(trace_path, ["iteration", "task_id", "query_loss"], trace)
    outputs.append(trace_path)
    _write_manifest(out, "train", resolved, outputs)
    print(f"trained {args.algo} -> {ckpt}")
    return 0


def cmd_eval(args) -> int:
    try:
        params = load_params(args.checkpoint)
    except CheckpointError as e:
        raise DataFormatError(str(e))
    scenarios = load_scenario_dir(args.data)
    cfg = _meta_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    all_errors = []
    per_scenario = {}
    for scenario in scenarios:
        task = meta.build_task_data(scenario, cfg.shots, cfg.seed)
        errors = meta.adapt_and_eval(params, task, cfg)
        per_scenario[scenario.id] = {
            "mean_cm": float(errors.mean()),
            "median_cm": float(np.median(errors)),
            "count": int(errors.size),
        }
        all_errors.extend(errors.tolist())
        rows.extend((scenario.id, i, f"{e:.6f}") for i, e in enumerate(errors))

    errors_path = out / "errors.csv"
    _write_csv(errors_path, ["scenario", "sample", "error_cm"], rows)
    summary = {
        "overall": {
            "mean_cm": float(np.mean(all_errors)),
            "median_cm": float(np.median(all_errors)),
            "count": len(all_errors),
        },
        "per_scenario": per_scenario,
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2))
    resolved = dataclasses.asdict(cfg)
    resolved.update({"checkpoint": str(args.checkpoint), "data": str(args.data)})
    _write_manifest(out, "eval", resolved, [errors_path, summary_path])
    print(
        f"evaluated {len(scenarios)} scenarios: mean {summary['overall']['mean_cm']:.1f} cm, "
        f"median {summary['overall']['median_cm']:.1f} cm"
    )
    return 0


def cmd_bench(args) -> int:
    scenarios = load_scenario_dir(args.data)
    algorithms = args.algos.split(",")
    shots = [int(s) for s in args.shots.split(",")]
    # the matrix and sweep experiments run at the first listed shot count
    cfg = dataclasses.replace(_meta_config(args), shots=shots[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []

    report = evaluation.benchmark(
        scenarios, algorithms, shots, args.repeats, cfg, test_count=args.test_scenarios
    )
    errors_path = out / "errors.csv"
    _write_csv(
        errors_path,
        ["algorithm", "shots", "repeat", "scenario", "error_cm"],
        [
            (e["algorithm"], e["shots"], e["repeat"], e["scenario"], f"{v:.6f}")
            for e in report.entries
            for v in e["errors"]
        ],
    )
    outputs.append(errors_path)
    cdf_path = out / "cdf.csv"
    _write_csv(
        cdf_path,
        ["algorithm", "shots", "threshold_cm", "fraction"],
        [
            (r["algorithm"], r["shots"], r["threshold_cm"], f"{r['fraction']:.6f}")
            for r in report.cdf_table()
        ],
    )
    outputs.append(cdf_path)

    matrix_scenarios = scenarios[: args.matrix_scenarios]
    matrix = evaluation.cross_scenario_matrix(matrix_scenarios, cfg, fine_tune_shots=0)
    matrix_path = out / "matrix.csv"
    _write_csv(
        matrix_path,
        ["i", "j", "mean_error_cm"],
        [
            (i, j, f"{matrix[i, j]:.6f}")
            for i in range(matrix.shape[0])
            for j in range(matrix.shape[1])
        ],
    )
    outputs.append(matrix_path)

    meta_algos = [a for a in algorithms if a in meta.META_ALGORITHMS]
    sweep_path = out / "sweep.csv"
    if meta_algos and args.counts:
        counts = [int(c) for c in args.counts.split(",")]
        sweep = evaluation.task_count_sweep(
            scenarios, meta_algos, counts, args.repeats, cfg, test_count=args.test_scenarios
        )
        _write_csv(
            sweep_path,
            ["algorithm", "task_count", "mean_error_cm"],
            [
                (algo, count, f"{sweep[(algo, count)]['mean_cm']:.6f}")
                for algo, count in sorted(sweep)
            ],
        )
    else:
        _write_csv(sweep_path, ["algorithm", "task_count", "mean_error_cm"], [])
    outputs.append(sweep_path)

    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(report.summary(), indent=2))
    outputs.append(summary_path)
    resolved = dataclasses.asdict(cfg)
    resolved.update(
        {
            "algorithms": algorithms,
            "shot_counts": shots,
            "repeats": args.repeats,
            "test_scenarios": args.test_scenarios,
            "data": str(args.data),
        }
    )
    _write_manifest(out, "bench", resolved, outputs)
    for row in report.summary():
        print(
            f"{row['algorithm']:>12s}  k={row['shots']}  "
            f"mean {row['mean_cm']:6.1f} cm  median {row['median_cm']:6.1f} cm"
        )
    return 0


# ---------------------------------------------------------------------------
# parser


def _positive_int(value: str) -> int:
    n = int(value)
    if n <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return n


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=None, help="inner step size")
    p.add_argument("--beta", type=float, default=None, help="outer (meta) step size")
    p.add_argument("--gamma", type=float, default=None, help="importance bias intensity")
    p.add_argument("--inner-steps", dest="inner_steps", type=int, default=None)
    p.add_argument("--meta-iterations", dest="meta_iterations", type=int, default=None)
    p.add_argument("--batch", dest="meta_batch_size", type=int, default=None)
    p.add_argument("--importance-epochs", dest="importance_epochs", type=int, default=None)
    p.add_argument("--baseline-epochs", dest="baseline_epochs", type=int, default=None)
    p.add_argument("--baseline-lr", dest="baseline_lr", type=float, default=None)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaloc",
        description="Few-shot CSI indoor localization: data, training, benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic scenario files")
    p.add_argument("--scenarios", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=3)
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("--spacing-cm", dest="spacing_cm", type=float, default=60.0)
    p.add_argument("--samples-per-rp", dest="samples_per_rp", type=int, default=40)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("importance", help="compute the task importance vector")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=None, help="shot count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_importance)

    p = sub.add_parser("train", help="train one algorithm on a scenario directory")
    p.add_argument("--algo", required=True, choices=evaluation.ALL_ALGORITHMS)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=None, help="shot count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--importance", default=None, help="importance JSON for tb-maml")
    p.add_argument("--target", type=int, default=0, help="target scenario index (baselines)")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="adapt a checkpoint on each scenario and report errors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=None, help="shot count (0 = zero-shot)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="run the full benchmark suite")
    p.add_argument("--data", required=True)
    p.add_argument("--algos", default=",".join(evaluation.ALL_ALGORITHMS))
    p.add_argument("--shots", default="5,3")
    p.add_argument("--repeats", type=_positive_int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--test-scenarios", dest="test_scenarios", type=int, default=5)
    p.add_argument("--matrix-scenarios", dest="matrix_scenarios", type=int, default=10)
    p.add_argument("--counts", default=None, help="task-count sweep, e.g. 5,10,15")
    p.add_argument("--k", type=int, default=None, help=argparse.SUPPRESS)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
