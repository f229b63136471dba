"""The training loop that turns a configuration into a metric trajectory."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .diagnostics import DiagnosticsRecord, LandscapeSlice, landscape_slice, measure
from .engine import (
    DivergenceError,
    WorkerEnsemble,
    adsam_step,
    csgd_step,
    dsgd_step,
    sgd_step,
    vanilla_sam_step,
)

__all__ = ["RunResult", "run_experiment", "record_steps", "total_batch"]


@dataclass
class RunResult:
    records: list[DiagnosticsRecord]
    final: WorkerEnsemble
    diverged: bool = False
    divergence_step: int | None = None
    landscape: LandscapeSlice | None = None
    wall_clock: float = 0.0
    history: list[WorkerEnsemble] = field(default_factory=list, repr=False)

    def metrics_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)


def record_steps(steps: int, every: int) -> list[int]:
    """Snapshot indices that get a record: ``0, k, 2k, ...`` plus the final step."""
    out = list(range(0, steps + 1, every))
    if out[-1] != steps:
        out.append(steps)
    return out


def total_batch(cfg: ExperimentConfig, n: int) -> int:
    if cfg["trainer.sampling"] == "full":
        return n
    return min(n, cfg["topology.m"] * cfg["trainer.local_batch"])


def _advance(alg, ens, P, obj, dataset, tc, t, Sigma):
    if alg == "dsgd":
        return dsgd_step(ens, P, obj, dataset, tc, t)
    if alg == "csgd":
        return csgd_step(ens, obj, dataset, tc, t)
    if alg == "sgd":
        return sgd_step(ens, obj, dataset, tc, t)
    if alg == "sam":
        return vanilla_sam_step(ens, obj, dataset, tc, t)
    return adsam_step(ens, obj, dataset, Sigma, tc, t)


def run_experiment(cfg: ExperimentConfig, keep_history: bool = False) -> RunResult:
    """Run ``trainer.steps`` steps, measuring the snapshot before each recorded step.

    Divergence stops the loop; the records gathered so far are returned with
    ``diverged`` set.
    """
    started = time.perf_counter()
    obj, dataset = cfg.objective()
    P = cfg.topology()
    tc = cfg.trainer()
    ens = cfg.initial_ensemble(obj.dim)
    B = total_batch(cfg, dataset.n)
    every = cfg["diagnostics.every"]
    want = set(record_steps(tc.steps, every))
    Sigma = tc.adsam_sigma**2 * np.eye(obj.dim)

    def snapshot(e: WorkerEnsemble) -> DiagnosticsRecord:
        rec = measure(
            obj,
            e,
            dataset,
            eta=tc.eta_at(e.step),
            total_batch=B,
            sharpness_samples=cfg["diagnostics.sharpness_samples"],
            seed=tc.seed,
            store_xi=cfg["diagnostics.store_xi"],
        )
        rec.wall_clock = time.perf_counter() - started
        return rec

    records: list[DiagnosticsRecord] = []
    history = [ens] if keep_history else []
    diverged, bad_step = False, None
    alg = tc.algorithm
    for t in range(tc.steps + 1):
        if t in want:
            records.append(snapshot(ens))
        if t == tc.steps:
            break
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out = _advance(alg, ens, P, obj, dataset, tc, t, Sigma)
        except DivergenceError as exc:
            diverged, bad_step = True, exc.step
            break
        ens = out.post
        if keep_history:
            history.append(ens)

    land = None
    mode = cfg["diagnostics.landscape"]
    if mode != "none" and not diverged:
        land = landscape_slice(
            obj,
            ens.averaged_model(),
            dataset,
            mode,
            cfg["diagnostics.landscape_extent"],
            cfg["diagnostics.landscape_resolution"],
            tc.seed,
        )
    return RunResult(records, ens, diverged, bad_step, land, time.perf_counter() - started, history)
