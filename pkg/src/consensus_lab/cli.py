"""Command line entry point: ``run``, ``verify``, ``topology-info`` and ``sweep``.

Exit codes: 0 success, 1 configuration or argument error, 2 divergence (or,
for ``verify``, a failed hard check).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCHEMA, ConfigError, ExperimentConfig, load_config
from .diagnostics import avg_direction_sharpness, hessian_lambda_max, kappa, weight_diversity_matrix
from .engine import stream
from .objectives import MAX_DENSE_DIM
from .runner import RunResult, run_experiment, total_batch
from .topology import TopologyError, build_topology, spectral_report
from .verify import SUITES, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2

SUMMARY_COLUMNS = [
    "run",
    "value",
    "final_loss",
    "final_consensus_distance",
    "mean_consensus_distance",
    "lambda_max",
    "sharpness",
    "kappa",
    "diverged",
]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CONSENSUS_LAB_THREADS", "1")))
    except ValueError:
        return 1


def execute(cfg: ExperimentConfig, out_dir: Path | None = None) -> RunResult:
    """Run one experiment and write its files into ``out_dir``."""
    out_dir = cfg.output_dir if out_dir is None else out_dir
    started = _now()
    result = run_experiment(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = ["metrics.jsonl"]
    (out_dir / "metrics.jsonl").write_text(result.metrics_jsonl(), newline="\n")
    if result.landscape is not None:
        (out_dir / "landscape.csv").write_text(result.landscape.to_csv(), newline="\n")
        outputs.append("landscape.csv")
    manifest = {
        "config_hash": cfg.config_hash,
        "artifact_version": __version__,
        "seeds": {
            "objective": cfg["objective.seed"],
            "trainer": cfg["trainer.seed"],
            "init": cfg["init.seed"],
            "topology_shuffle": cfg["topology.shuffle_seed"],
        },
        "started": started,
        "finished": _now(),
        "wall_clock_seconds": result.wall_clock,
        "outputs": outputs + ["manifest.json"],
        "records": len(result.records),
        "diverged": result.diverged,
        "divergence_step": result.divergence_step,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return result


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = execute(cfg)
    except (ConfigError, TopologyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if result.diverged:
        print(f"diverged at step {result.divergence_step}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {len(result.records)} records to {cfg.output_dir}")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = run_suite(args.suite, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"verify_{args.suite}.json"
    path.write_text(json.dumps(report, indent=2, default=_jsonable) + "\n")
    for check in report["checks"]:
        tag = "PASS" if check["passed"] else ("FAIL" if check["hard"] else "SOFT-FAIL")
        kind = "hard" if check["hard"] else "soft"
        print(f"{tag:9s} {check['name']} ({kind})")
    print(f"report: {path}")
    return EXIT_OK if report["passed"] else EXIT_DIVERGED


def cmd_topology_info(args) -> int:
    try:
        P = build_topology(args.kind, args.m)
    except TopologyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    info = {"kind": P.kind, "m": P.m, **spectral_report(P).as_dict()}
    if P.m <= 16:
        info["matrix"] = P.entries.tolist()
    print(json.dumps(info, indent=2))
    return EXIT_OK


def _summary_row(cfg: ExperimentConfig, result: RunResult, label: str, value: str) -> dict:
    nan = math.nan
    row = dict.fromkeys(SUMMARY_COLUMNS, nan)
    row.update(run=label, value=value, diverged=result.diverged)
    obj, ds = cfg.objective()
    tc = cfg.trainer()
    row["kappa"] = kappa(tc.eta, total_batch(cfg, ds.n), ds.n)
    cds = [r.consensus_distance for r in result.records]
    if cds:
        row["mean_consensus_distance"] = float(np.mean(cds))
    if result.diverged:
        return row
    last = result.records[-1]
    row["final_loss"] = last.train_loss
    row["final_consensus_distance"] = last.consensus_distance
    ens = result.final
    if ens.d <= MAX_DENSE_DIM:
        wa = ens.averaged_model()
        row["lambda_max"] = hessian_lambda_max(obj, wa, ds)
        K = cfg["diagnostics.sharpness_samples"] or 1000
        K += K % 2
        row["sharpness"] = avg_direction_sharpness(
            obj, wa, weight_diversity_matrix(ens), K, ds, stream(tc.seed, "sharpness", 0, ens.step)
        )[0]
    return row


def cmd_sweep(args) -> int:
    key, sep, values = args.axis.partition("=")
    key = key.strip()
    try:
        if not sep or not values:
            raise ConfigError("--axis must look like key=v1,v2,...")
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        base = load_config(args.config)
        # Validate every point before launching any run.
        points = []
        for v in (x.strip() for x in values.split(",")):
            cfg = base.with_value(key, v)
            cfg.topology()
            points.append((v, cfg))
    except (ConfigError, TopologyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    root = base.output_dir

    def one(item):
        v, cfg = item
        label = f"{key}={v}"
        return _summary_row(cfg, execute(cfg, root / label), label, v)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(one, points))
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep_summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    print(f"wrote {len(rows)} runs to {root}")
    return EXIT_DIVERGED if any(r["diverged"] for r in rows) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consensus-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run a built-in verification suite")
    p.add_argument("suite", choices=[*SUITES, "all"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="directory for verify_<suite>.json")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("topology-info", help="print a gossip matrix and its spectrum")
    p.add_argument("kind")
    p.add_argument("m", type=int)
    p.set_defaults(func=cmd_topology_info)

    p = sub.add_parser("sweep", help="run one experiment per value of a config key")
    p.add_argument("config")
    p.add_argument("--axis", required=True, help="key=v1,v2,...")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; map that to the config-error code.
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
