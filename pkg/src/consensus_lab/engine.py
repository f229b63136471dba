"""Optimizer state machines: D-SGD, C-SGD, SGD, SAM and average-direction SAM.

All randomness comes from counter-keyed streams: a batch for worker ``j`` at
step ``t`` is drawn from a generator seeded by ``(seed, tag, j, t, draw)``,
so the batches a run sees do not depend on the order workers are visited.
D-SGD and C-SGD share those streams, which makes paired runs share data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .objectives import Batch, Dataset, Objective, batch_gradient
from .topology import GossipMatrix, gossip_mix

__all__ = [
    "ALGORITHMS",
    "SAMPLING_MODES",
    "DivergenceError",
    "TrainerConfig",
    "WorkerEnsemble",
    "StepOutcome",
    "stream",
    "draw_batches",
    "gaussian_factor",
    "dsgd_step",
    "csgd_step",
    "sgd_step",
    "vanilla_sam_step",
    "adsam_step",
    "gaussian_draws",
]

ALGORITHMS = ("dsgd", "csgd", "sgd", "sam", "adsam")
SAMPLING_MODES = ("iid", "epoch_partition", "full")

_TAGS = {"batch": 1, "epoch": 2, "adsam": 3, "init": 4, "sharpness": 5, "probe": 6}


class DivergenceError(FloatingPointError):
    """A gradient or weight became non-finite."""

    def __init__(self, message: str, step: int | None = None, workers: Sequence[int] = ()):
        super().__init__(message)
        self.step = step
        self.workers = tuple(workers)


def stream(seed: int, tag: str, worker: int = 0, step: int = 0, draw: int = 0) -> np.random.Generator:
    """Independent generator for one ``(seed, tag, worker, step, draw)`` key."""
    return np.random.default_rng([int(seed), _TAGS[tag], int(worker), int(step), int(draw)])


@dataclass(frozen=True)
class TrainerConfig:
    algorithm: str = "dsgd"
    eta: float = 0.1
    local_batch: int = 1
    steps: int = 1
    sampling: str = "iid"
    sam_rho: float = 0.0
    adsam_samples: int = 2
    adsam_sigma: float = 0.0
    seed: int = 0
    lr_decay: float = 1.0
    lr_decay_every: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm: unknown value {self.algorithm!r}")
        # eta == 0 is allowed: it turns D-SGD into pure gossip.
        if not (self.eta >= 0 and np.isfinite(self.eta)):
            raise ValueError(f"eta: must be a nonnegative finite number, got {self.eta}")
        if self.local_batch < 1:
            raise ValueError(f"local_batch: must be >= 1, got {self.local_batch}")
        if self.steps < 0:
            raise ValueError(f"steps: must be >= 0, got {self.steps}")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"sampling: unknown mode {self.sampling!r}")
        if self.sam_rho < 0:
            raise ValueError(f"sam_rho: must be >= 0, got {self.sam_rho}")
        if self.adsam_samples < 1:
            raise ValueError(f"adsam_samples: must be >= 1, got {self.adsam_samples}")
        if self.adsam_sigma < 0:
            raise ValueError(f"adsam_sigma: must be >= 0, got {self.adsam_sigma}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay: must be in (0, 1], got {self.lr_decay}")
        if self.lr_decay_every < 0:
            raise ValueError(f"lr_decay_every: must be >= 0, got {self.lr_decay_every}")

    def eta_at(self, step: int) -> float:
        if self.lr_decay_every and self.lr_decay != 1.0:
            return self.eta * self.lr_decay ** (step // self.lr_decay_every)
        return self.eta


@dataclass(frozen=True)
class WorkerEnsemble:
    """The ``m`` local models as rows of a read-only ``(m, d)`` array."""

    weights: np.ndarray
    step: int = 0

    def __post_init__(self):
        W = np.array(self.weights, dtype=float, ndmin=2)
        W.setflags(write=False)
        object.__setattr__(self, "weights", W)

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1]

    def averaged_model(self) -> np.ndarray:
        acc = np.zeros(self.d)
        for row in self.weights:
            acc = acc + row
        return acc / self.m

    def deviations(self) -> np.ndarray:
        return self.weights - self.averaged_model()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.weights)))

    def at_consensus(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def rescaled(self, c: float) -> "WorkerEnsemble":
        """Shrink every worker toward the mean: ``w_a + c (w_j - w_a)``."""
        wa = self.averaged_model()
        return WorkerEnsemble(wa + c * (self.weights - wa), self.step)

    @classmethod
    def replicate(cls, w: np.ndarray, m: int, step: int = 0) -> "WorkerEnsemble":
        return cls(np.tile(np.asarray(w, float), (m, 1)), step)

    @classmethod
    def initialize(
        cls, w0: np.ndarray, m: int, init_scale: float = 0.0, seed: int = 0
    ) -> "WorkerEnsemble":
        """Common init plus an optional per-worker Gaussian offset."""
        w0 = np.asarray(w0, float)
        W = np.tile(w0, (m, 1))
        if init_scale > 0:
            for j in range(m):
                W[j] += init_scale * stream(seed, "init", j).standard_normal(w0.size)
        return cls(W, 0)


@dataclass(frozen=True)
class StepOutcome:
    pre: WorkerEnsemble
    post: WorkerEnsemble
    batches: tuple[Batch, ...]
    record: Any = None
    direction: np.ndarray | None = field(default=None, repr=False)


def draw_batches(dataset: Dataset, config: TrainerConfig, step: int, m: int, draw: int = 0) -> tuple[Batch, ...]:
    """One batch per worker for ``step`` according to the sampling mode.

    ``full`` hands every worker the entire dataset. ``iid`` draws
    ``local_batch`` distinct indices from the worker's shard. ``epoch_partition``
    walks a per-epoch permutation of the shard in consecutive chunks.
    """
    if config.sampling == "full":
        return tuple(Batch(j, np.arange(dataset.n)) for j in range(m))
    if dataset.m != m:
        raise ValueError(f"dataset has {dataset.m} shards but the ensemble has {m} workers")
    out = []
    B = config.local_batch
    for j, shard in enumerate(dataset.shards):
        if B > shard.size:
            raise ValueError(f"local_batch {B} exceeds shard size {shard.size} of worker {j}")
        if config.sampling == "iid":
            idx = stream(config.seed, "batch", j, step, draw).choice(shard, size=B, replace=False)
        else:
            per_epoch = shard.size // B
            epoch, pos = divmod(step, per_epoch)
            perm = stream(config.seed, "epoch", j, epoch, draw).permutation(shard)
            idx = perm[pos * B : (pos + 1) * B]
        out.append(Batch(j, idx))
    return tuple(out)


def _check_finite(arr: np.ndarray, what: str, step: int) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.where(~np.all(np.isfinite(np.atleast_2d(arr)), axis=1))[0]
        raise DivergenceError(f"non-finite {what} at step {step} (workers {bad.tolist()})", step, bad)


def _local_gradients(obj, points, batches, dataset, step):
    G = np.stack([batch_gradient(obj, points[b.worker], b, dataset) for b in batches])
    _check_finite(G, "gradient", step)
    return G


def dsgd_step(
    ensemble: WorkerEnsemble,
    P: GossipMatrix,
    obj: Objective,
    dataset: Dataset,
    config: TrainerConfig,
    step_index: int,
    draw: int = 0,
) -> StepOutcome:
    """Adapt-while-communicate round: ``w_j <- sum_k P_jk w_k - eta grad_j(w_j)``.

    Gradients are taken at the pre-mix iterates.
    """
    if P.m != ensemble.m:
        raise ValueError(f"gossip matrix is {P.m}x{P.m} but ensemble has {ensemble.m} workers")
    batches = draw_batches(dataset, config, step_index, ensemble.m, draw)
    G = _local_gradients(obj, ensemble.weights, batches, dataset, step_index)
    W = gossip_mix(P, ensemble.weights) - config.eta_at(step_index) * G
    _check_finite(W, "weights", step_index)
    return StepOutcome(ensemble, WorkerEnsemble(W, ensemble.step + 1), batches)


def csgd_step(
    ensemble: WorkerEnsemble,
    obj: Objective,
    dataset: Dataset,
    config: TrainerConfig,
    step_index: int,
    draw: int = 0,
) -> StepOutcome:
    """Centralized step: every worker's batch gradient at the one shared model."""
    if not ensemble.at_consensus():
        raise ValueError("C-SGD needs all workers to hold the same model")
    w = ensemble.weights[0]
    batches = draw_batches(dataset, config, step_index, ensemble.m, draw)
    G = _local_gradients(obj, np.tile(w, (ensemble.m, 1)), batches, dataset, step_index)
    g = G[0] if ensemble.m == 1 else np.sum(G, axis=0) / ensemble.m
    w_new = w - config.eta_at(step_index) * g
    _check_finite(w_new, "weights", step_index)
    return StepOutcome(ensemble, WorkerEnsemble.replicate(w_new, ensemble.m, ensemble.step + 1), batches, direction=g)


def _single(ensemble: WorkerEnsemble, name: str) -> np.ndarray:
    if ensemble.m != 1:
        raise ValueError(f"{name} runs on a single model, got {ensemble.m} workers")
    return ensemble.weights[0]


def sgd_step(ensemble, obj, dataset, config, step_index, draw=0) -> StepOutcome:
    """Plain mini-batch step ``w <- w - eta grad(w)`` on a one-worker ensemble."""
    _single(ensemble, "sgd_step")
    return csgd_step(ensemble, obj, dataset, config, step_index, draw)


def vanilla_sam_step(ensemble, obj, dataset, config, step_index, draw=0) -> StepOutcome:
    """SAM with the first-order inner maximizer ``rho * g / ||g||``."""
    w = _single(ensemble, "vanilla_sam_step")
    (batch,) = draw_batches(dataset, config, step_index, 1, draw)
    g = batch_gradient(obj, w, batch, dataset)
    _check_finite(g, "gradient", step_index)
    norm = float(np.linalg.norm(g))
    if config.sam_rho == 0 or norm < 1e-12:
        g_sam = g
    else:
        g_sam = batch_gradient(obj, w + config.sam_rho * g / norm, batch, dataset)
        _check_finite(g_sam, "gradient", step_index)
    w_new = w - config.eta_at(step_index) * g_sam
    _check_finite(w_new, "weights", step_index)
    return StepOutcome(ensemble, WorkerEnsemble(w_new[None, :], ensemble.step + 1), (batch,), direction=g_sam)


def gaussian_factor(Sigma: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Return ``U sqrt(Lambda)`` for a PSD covariance (tiny negatives clamped).

    Raises:
        ValueError: if an eigenvalue is below ``-tol``.
    """
    Sigma = np.asarray(Sigma, float)
    if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
        raise ValueError("covariance must be a square matrix")
    if not np.allclose(Sigma, Sigma.T, rtol=0, atol=1e-12 * max(1.0, float(np.max(np.abs(Sigma))))):
        raise ValueError("covariance must be symmetric")
    lam, U = np.linalg.eigh(0.5 * (Sigma + Sigma.T))
    if lam.size and lam.min() < -tol:
        raise ValueError(f"covariance is not PSD (smallest eigenvalue {lam.min():.3e})")
    return U * np.sqrt(np.clip(lam, 0.0, None))


def gaussian_draws(factor: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """``K`` draws of ``factor @ xi``; antithetic ``(+xi, -xi)`` pairs when K is even."""
    d = factor.shape[0]
    if K % 2 == 0:
        xi = rng.standard_normal((K // 2, d))
        xi = np.concatenate([xi, -xi])
    else:
        xi = rng.standard_normal((K, d))
    return xi @ factor.T


def adsam_step(ensemble, obj, dataset, Sigma, config, step_index, draw=0) -> StepOutcome:
    """Average-direction SAM: descend along a Monte-Carlo mean of ``grad(w + eps)``.

    ``eps ~ N(0, Sigma)`` with ``config.adsam_samples`` draws from the step's
    stream. Even counts use antithetic pairs.
    """
    w = _single(ensemble, "adsam_step")
    factor = gaussian_factor(Sigma)
    (batch,) = draw_batches(dataset, config, step_index, 1, draw)
    if not np.any(factor):
        direction = batch_gradient(obj, w, batch, dataset)
    else:
        eps = gaussian_draws(factor, config.adsam_samples, stream(config.seed, "adsam", 0, step_index, draw))
        data = dataset.take(batch.indices)
        pts = obj.mean_grads_at(w + eps, data)
        direction = np.sum(pts, axis=0) / pts.shape[0]
    _check_finite(direction, "gradient", step_index)
    w_new = w - config.eta_at(step_index) * direction
    _check_finite(w_new, "weights", step_index)
    return StepOutcome(ensemble, WorkerEnsemble(w_new[None, :], ensemble.step + 1), (batch,), direction=direction)
