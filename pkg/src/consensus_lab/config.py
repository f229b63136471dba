"""Strict ``key = value`` experiment configuration.

One assignment per line, ``#`` starts a comment, keys carry a dotted
section prefix (``trainer.eta``). Unknown or repeated keys are errors so a
typo can never silently fall back to a default.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from .engine import ALGORITHMS, SAMPLING_MODES, TrainerConfig, WorkerEnsemble, stream
from .objectives import (
    Dataset,
    Objective,
    load_csv_dataset,
    make_cubic_perturbed,
    make_huber_kink,
    make_mlp,
    make_pure_cubic,
    make_quadratic,
    MLPObjective,
)
from .topology import KINDS, GossipMatrix, build_topology, load_edge_file, shuffle_workers

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config", "SCHEMA", "FAMILIES"]

FAMILIES = ("quadratic", "cubic_perturbed", "pure_cubic", "mlp", "huber_kink", "csv")
SINGLE_MODEL = ("sgd", "sam", "adsam")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; the message names the key."""


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _finite_float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"expected a finite number, got {text!r}")
    return v


def _choice(options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "objective.family": (_choice(FAMILIES), "cubic_perturbed"),
    "objective.d": (int, 5),
    "objective.n": (int, 32),
    "objective.seed": (int, 0),
    "objective.cubic_scale": (_finite_float, 0.1),
    "objective.quartic": (_finite_float, 0.01),
    "objective.hidden": (int, 8),
    "objective.dataset": (_choice(("two_moons", "blobs")), "two_moons"),
    "objective.delta": (_finite_float, 0.01),
    "objective.path": (str, ""),
    "topology.kind": (_choice(KINDS), "ring"),
    "topology.m": (int, 8),
    "topology.shuffle": (_bool, False),
    "topology.shuffle_seed": (int, 0),
    "topology.path": (str, ""),
    "trainer.algorithm": (_choice(ALGORITHMS), "dsgd"),
    "trainer.eta": (_finite_float, 0.1),
    "trainer.local_batch": (int, 1),
    "trainer.steps": (int, 100),
    "trainer.sampling": (_choice(SAMPLING_MODES), "iid"),
    "trainer.sam_rho": (_finite_float, 0.0),
    "trainer.adsam_samples": (int, 2),
    "trainer.adsam_sigma": (_finite_float, 0.0),
    "trainer.seed": (int, 0),
    "trainer.lr_decay": (_finite_float, 1.0),
    "trainer.lr_decay_every": (int, 0),
    "init.center_scale": (_finite_float, 0.5),
    "init.diversity": (_finite_float, 0.0),
    "init.seed": (int, 0),
    "diagnostics.every": (int, 1),
    "diagnostics.sharpness_samples": (int, 0),
    "diagnostics.store_xi": (_bool, False),
    "diagnostics.landscape": (_choice(("none", "1d", "2d")), "none"),
    "diagnostics.landscape_extent": (_finite_float, 1.0),
    "diagnostics.landscape_resolution": (int, 21),
    "output.dir": (str, "out"),
}


def _parse_lines(text: str, source: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def canonical_text(raw: Mapping[str, str]) -> str:
    return "".join(f"{k} = {raw[k]}\n" for k in sorted(raw))


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated configuration. ``raw`` keeps the explicit assignments."""

    values: Mapping[str, Any]
    raw: Mapping[str, str] = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(canonical_text(self.raw).encode()).hexdigest()

    @property
    def output_dir(self) -> Path:
        return Path(self["output.dir"])

    def with_value(self, key: str, text: str) -> "ExperimentConfig":
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        raw = dict(self.raw)
        raw[key] = text
        return _from_raw(raw, self.base_dir)

    def trainer(self) -> TrainerConfig:
        return TrainerConfig(
            **{k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("trainer.")}
        )

    def _path(self, key: str) -> Path:
        p = Path(self[key])
        return p if p.is_absolute() else self.base_dir / p

    def objective(self) -> tuple[Objective, Dataset]:
        fam = self["objective.family"]
        d, n, seed = self["objective.d"], self["objective.n"], self["objective.seed"]
        if fam == "quadratic":
            obj, ds = make_quadratic(d, seed, n)
        elif fam == "cubic_perturbed":
            obj, ds = make_cubic_perturbed(d, seed, self["objective.cubic_scale"], n, self["objective.quartic"])
        elif fam == "pure_cubic":
            obj, ds = make_pure_cubic(d, self["objective.cubic_scale"])
        elif fam == "mlp":
            obj, ds = make_mlp(self["objective.hidden"], seed, self["objective.dataset"], n)
        elif fam == "huber_kink":
            obj, ds = make_huber_kink(self["objective.delta"])
        else:
            ds = load_csv_dataset(self._path("objective.path"), self["topology.m"])
            obj = MLPObjective(ds.arrays["x"].shape[1], self["objective.hidden"])
        if self["trainer.sampling"] != "full":
            ds = ds.sharded(self["topology.m"])
        return obj, ds

    def topology(self) -> GossipMatrix:
        kind, m = self["topology.kind"], self["topology.m"]
        P = load_edge_file(self._path("topology.path")) if kind == "custom" else build_topology(kind, m)
        if P.m != m:
            raise ConfigError(f"topology.m: {m} does not match the {P.m} workers in {self['topology.path']}")
        if self["topology.shuffle"]:
            P = shuffle_workers(P, self["topology.shuffle_seed"])
        return P

    def initial_ensemble(self, dim: int) -> WorkerEnsemble:
        seed = self["init.seed"]
        w0 = self["init.center_scale"] * stream(seed, "init", 0, 1).standard_normal(dim)
        return WorkerEnsemble.initialize(w0, self["topology.m"], self["init.diversity"], seed)


def _from_raw(raw: Mapping[str, str], base_dir: Path) -> ExperimentConfig:
    values = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        else:
            values[key] = default
    _validate(values, base_dir)
    return ExperimentConfig(values, dict(raw), base_dir)


def _validate(v: dict, base_dir: Path) -> None:
    def need(cond: bool, key: str, msg: str) -> None:
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    need(v["objective.d"] >= 1, "objective.d", "must be >= 1")
    need(v["objective.n"] >= 1, "objective.n", "must be >= 1")
    need(v["objective.cubic_scale"] >= 0, "objective.cubic_scale", "must be >= 0")
    need(v["objective.quartic"] >= 0, "objective.quartic", "must be >= 0")
    need(v["objective.hidden"] >= 1, "objective.hidden", "must be >= 1")
    need(v["objective.delta"] > 0, "objective.delta", "must be > 0")
    need(v["topology.m"] >= 1, "topology.m", "must be >= 1")
    need(v["init.center_scale"] >= 0, "init.center_scale", "must be >= 0")
    need(v["init.diversity"] >= 0, "init.diversity", "must be >= 0")
    need(v["diagnostics.every"] >= 1, "diagnostics.every", "must be >= 1")
    need(v["diagnostics.sharpness_samples"] >= 0, "diagnostics.sharpness_samples", "must be >= 0")
    need(v["diagnostics.landscape_resolution"] >= 3, "diagnostics.landscape_resolution", "must be >= 3")
    need(v["diagnostics.landscape_extent"] >= 0, "diagnostics.landscape_extent", "must be >= 0")
    for key in ("objective.path", "topology.path"):
        if v[key]:
            p = Path(v[key])
            p = p if p.is_absolute() else base_dir / p
            need(p.is_file(), key, f"file {v[key]!r} does not exist")
    need(v["objective.family"] != "csv" or bool(v["objective.path"]), "objective.path", "required for csv")
    need(v["topology.kind"] != "custom" or bool(v["topology.path"]), "topology.path", "required for custom")
    try:
        TrainerConfig(**{k.split(".", 1)[1]: x for k, x in v.items() if k.startswith("trainer.")})
    except ValueError as exc:
        raise ConfigError(f"trainer.{exc}") from None
    if v["trainer.algorithm"] in SINGLE_MODEL:
        need(v["topology.m"] == 1, "topology.m", f"{v['trainer.algorithm']} runs a single model (m = 1)")
    fam = v["objective.family"]
    if fam in ("pure_cubic", "huber_kink"):
        n = 1
    elif fam == "csv":
        n = None
    else:
        n = v["objective.n"]
    if n is not None and v["trainer.sampling"] != "full":
        m, B = v["topology.m"], v["trainer.local_batch"]
        need(m <= n, "topology.m", f"{m} workers exceed {n} samples")
        need(B <= n // m, "trainer.local_batch", f"{B} exceeds the smallest shard ({n // m} samples)")


def parse_config(text: str, source: str = "<config>", base_dir: Path | str = ".") -> ExperimentConfig:
    return _from_raw(_parse_lines(text, source), Path(base_dir))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path), path.parent)
