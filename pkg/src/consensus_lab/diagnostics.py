"""Measurements taken on ensemble snapshots.

Everything here is a pure function of its inputs. Monte-Carlo estimates take
an explicit generator (or seed) and use antithetic pairs, reporting the
standard error computed over pair means.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .engine import TrainerConfig, WorkerEnsemble, gaussian_draws, gaussian_factor
from .objectives import (
    MAX_DENSE_DIM,
    Batch,
    Dataset,
    Objective,
    batch_gradient,
    batch_hessian,
    batch_loss,
    sample_hessians,
)
from .topology import GossipMatrix, spectral_report

__all__ = [
    "DiagnosticsRecord",
    "SmoothingReport",
    "RegularizerReport",
    "LandscapeSlice",
    "weight_diversity_matrix",
    "consensus_distance",
    "gradient_diversity",
    "avg_direction_sharpness",
    "hessian_consensus_alignment",
    "implicit_regularizer_sgd",
    "implicit_regularizer_dsgd",
    "smoothing_report",
    "descent_condition_check",
    "landscape_slice",
    "hessian_lambda_max",
    "perturbation_cubic_moment",
    "kappa",
    "smoothed_gradient",
    "measure",
]


@dataclass
class DiagnosticsRecord:
    """One step's measurements.

    ``wall_clock`` is kept on the object but left out of :meth:`to_json` so
    that metric files are byte-reproducible.
    """

    step: int
    train_loss: float
    grad_norm: float
    consensus_distance: float
    avg_direction_sharpness: float | None = None
    avg_direction_sharpness_stderr: float | None = None
    hessian_consensus_alignment: float | None = None
    regularizer: dict | None = None
    xi: list | None = None
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("wall_clock")
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False, allow_nan=True, separators=(",", ":"))


@dataclass(frozen=True)
class SmoothingReport:
    alpha: float
    beta: float
    sigma_min: float
    theoretical_bound: float
    empirical_smoothed_lipschitz: float
    mc_relative_error: float


@dataclass(frozen=True)
class RegularizerReport:
    """Itemized implicit-regularizer objective at one point.

    ``hessian_alignment``, ``hessian_sq_term`` and ``hessian_variance`` are
    zero for the SGD variant and ``None`` when Hessians are unavailable.
    """

    kappa: float
    base_loss: float
    grad_norm_term: float
    hessian_alignment: float | None
    hessian_sq_term: float | None
    grad_variance: float
    hessian_variance: float | None
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _require_dense(d: int) -> None:
    if d > MAX_DENSE_DIM:
        raise ValueError(f"dense d x d matrices limited to d <= {MAX_DENSE_DIM}, got d={d}")


def weight_diversity_matrix(ensemble: WorkerEnsemble) -> np.ndarray:
    """``Xi = (1/m) sum_j (w_j - w_a)(w_j - w_a)^T``, symmetric by construction."""
    _require_dense(ensemble.d)
    D = ensemble.deviations()
    Xi = np.zeros((ensemble.d, ensemble.d))
    for dev in D:
        Xi += np.outer(dev, dev)
    Xi /= ensemble.m
    return 0.5 * (Xi + Xi.T)


def consensus_distance(ensemble: WorkerEnsemble) -> float:
    """Mean squared distance of the workers from their average (trace of Xi)."""
    D = ensemble.deviations()
    return float(sum(float(dev @ dev) for dev in D) / ensemble.m)


def gradient_diversity(
    obj: Objective, ensemble: WorkerEnsemble, batches: Sequence[Batch], dataset: Dataset
) -> np.ndarray:
    """``(1/m) sum_j [grad_j(w_j) - grad_j(w_a)]`` with worker ``j``'s own batch.

    Vanishes for quadratic losses whenever the workers share a batch (or,
    in expectation, when batches are drawn from a common pool).
    """
    if len(batches) != ensemble.m:
        raise ValueError(f"need one batch per worker: {len(batches)} batches for {ensemble.m} workers")
    wa = ensemble.averaged_model()
    acc = np.zeros(ensemble.d)
    for j, batch in enumerate(batches):
        acc = acc + (batch_gradient(obj, ensemble.weights[j], batch, dataset) - batch_gradient(obj, wa, batch, dataset))
    return acc / ensemble.m


def _pair_stats(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of MC samples laid out as [+xi block, -xi block]."""
    K = values.shape[0]
    if K % 2 == 0 and K >= 2:
        half = K // 2
        units = 0.5 * (values[:half] + values[half:])
    else:
        units = values
    n = units.shape[0]
    mean = np.sum(units, axis=0) / n
    if n < 2:
        return mean, np.zeros_like(mean)
    se = np.std(units, axis=0, ddof=1) / math.sqrt(n)
    return mean, se


def _rng(rng_or_seed) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return np.random.default_rng(rng_or_seed)


_CHUNK = 1 << 16


def smoothed_gradient(obj: Objective, w, factor: np.ndarray, K: int, data, rng) -> tuple[np.ndarray, np.ndarray]:
    """Antithetic MC estimate of ``E[grad L(w + factor @ xi)]`` and its standard error.

    Draws are generated in one block (so results do not depend on chunking)
    and evaluated in chunks to bound memory.
    """
    w = np.asarray(w, float)
    eps = gaussian_draws(factor, K, _rng(rng))
    parts = [obj.mean_grads_at(w + eps[i : i + _CHUNK], data) for i in range(0, K, _CHUNK)]
    return _pair_stats(np.concatenate(parts))


def avg_direction_sharpness(
    obj: Objective,
    w,
    Xi,
    K: int,
    dataset: Dataset,
    rng=0,
    batch: Batch | None = None,
) -> tuple[float, float]:
    """MC estimate of ``E_{eps ~ N(0, Xi)}[L(w + eps) - L(w)]`` and its standard error."""
    w = np.asarray(w, float)
    factor = gaussian_factor(Xi)
    if not np.any(factor):
        return 0.0, 0.0
    data = dataset.take(batch.indices) if batch is not None else dataset.all()
    eps = gaussian_draws(factor, K, _rng(rng))
    base = float(obj.mean_losses_at(w[None, :], data)[0])
    vals = obj.mean_losses_at(w + eps, data) - base
    mean, se = _pair_stats(vals)
    return float(mean), float(se)


def hessian_consensus_alignment(obj: Objective, w, Xi, batch: Batch | None, dataset: Dataset) -> float:
    """``Tr(H(w) Xi)`` as the elementwise contraction ``sum_{l,s} H_ls Xi_ls``."""
    Xi = np.asarray(Xi, float)
    _require_dense(Xi.shape[0])
    if not np.any(Xi):
        return 0.0
    H = batch_hessian(obj, w, batch if batch is not None else dataset.full_batch(), dataset)
    return float(np.sum(H * Xi))


def kappa(eta: float, B: int, N: int) -> float:
    """Batch-size weight ``(eta / B) (N - B) / (N - 1)``; zero at ``B == N``."""
    if N == 1:
        return 0.0
    return (eta / B) * (N - B) / (N - 1)


def _per_sample_stats(obj, w, dataset):
    data = dataset.all()
    G = obj.grads(w, data)
    g = np.sum(G, axis=0) / G.shape[0]
    dev = G - g
    grad_var = float(np.sum(np.einsum("ni,ni->n", dev, dev)) / G.shape[0])
    loss = float(np.sum(obj.losses(w, data)) / G.shape[0])
    return loss, g, grad_var


def implicit_regularizer_sgd(obj: Objective, w, dataset: Dataset, eta: float, B: int) -> RegularizerReport:
    """Loss + ``eta/4 ||grad||^2`` + kappa times the one-sample gradient variance."""
    N = dataset.n
    if not 1 <= B <= N:
        raise ValueError(f"total batch size must satisfy 1 <= B <= N={N}, got {B}")
    w = np.asarray(w, float)
    loss, g, grad_var = _per_sample_stats(obj, w, dataset)
    k = kappa(eta, B, N)
    gn = 0.25 * eta * float(g @ g)
    return RegularizerReport(k, loss, gn, 0.0, 0.0, grad_var, 0.0, loss + gn + k * grad_var)


def implicit_regularizer_dsgd(obj: Objective, w, Xi, dataset: Dataset, eta: float, B: int) -> RegularizerReport:
    """Itemized D-SGD implicit objective at total batch size ``B``.

    The two sharpness terms ``Tr(H Xi)`` and ``eta/4 Tr(H^2 Xi)`` do not
    involve ``B``; only the kappa-weighted variance terms do.
    """
    N = dataset.n
    if not 1 <= B <= N:
        raise ValueError(f"total batch size must satisfy 1 <= B <= N={N}, got {B}")
    w = np.asarray(w, float)
    loss, g, grad_var = _per_sample_stats(obj, w, dataset)
    k = kappa(eta, B, N)
    gn = 0.25 * eta * float(g @ g)
    Xi = np.zeros((w.size, w.size)) if Xi is None else np.asarray(Xi, float)
    if w.size > MAX_DENSE_DIM:
        return RegularizerReport(k, loss, gn, None, None, grad_var, None, loss + gn + k * grad_var)
    if not np.any(Xi):
        return RegularizerReport(k, loss, gn, 0.0, 0.0, grad_var, 0.0, loss + gn + k * grad_var)
    Hs = sample_hessians(obj, w, dataset)
    Hbar = np.sum(Hs, axis=0) / N
    align = float(np.sum(Hbar * Xi))
    sq = 0.25 * eta * float(np.trace(Hbar @ Hbar @ Xi))
    D = Hs - Hbar
    hess_var = float(np.sum(np.einsum("nij,njk,ki->n", D, D, Xi)) / N)
    total = loss + align + sq + gn + k * (grad_var + hess_var)
    return RegularizerReport(k, loss, gn, align, sq, grad_var, hess_var, total)


def perturbation_cubic_moment(Xi, K: int, rng=0) -> tuple[float, float]:
    """MC estimate (and standard error) of ``E ||eps||^3`` for ``eps ~ N(0, Xi)``."""
    eps = gaussian_draws(gaussian_factor(Xi), K, _rng(rng))
    vals = np.linalg.norm(eps, axis=1) ** 3
    mean, se = _pair_stats(vals)
    return float(mean), float(se)


def smoothing_report(
    obj: Objective,
    Xi,
    probe_region: tuple,
    n_probes: int,
    K: int,
    dataset: Dataset,
    seed: int = 0,
) -> SmoothingReport:
    """Regional Lipschitz estimates for the raw and the Gaussian-smoothed gradient.

    ``probe_region`` is a box ``(lower, upper)``. Probe pairs are a uniform
    point in the box and a second point at a log-uniform distance in
    ``[1e-4, box diameter]`` so that narrow high-curvature features are hit.
    The smoothed gradient at both points of a pair uses the same draws.
    """
    lo = np.atleast_1d(np.asarray(probe_region[0], float))
    hi = np.atleast_1d(np.asarray(probe_region[1], float))
    d = lo.size
    rng = np.random.default_rng([seed, 77])
    diam = float(np.linalg.norm(hi - lo))
    X = lo + (hi - lo) * rng.random((n_probes, d))
    U = rng.standard_normal((n_probes, d))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    R = np.exp(rng.uniform(math.log(1e-4), math.log(max(diam, 2e-4)), n_probes))
    Y = X + R[:, None] * U
    data = dataset.all()
    gX = obj.mean_grads_at(X, data)
    gY = obj.mean_grads_at(Y, data)
    alpha = float(max(np.max(np.linalg.norm(gX, axis=1)), np.max(np.linalg.norm(gY, axis=1))))
    beta = float(np.max(np.linalg.norm(gX - gY, axis=1) / R))

    Xi = np.atleast_2d(np.asarray(Xi, float))
    sigma_min = float(np.linalg.eigvalsh(Xi)[0])
    first = math.sqrt(2.0) * alpha / sigma_min if sigma_min > 0 else math.inf
    bound = min(first, beta)

    eps = gaussian_draws(gaussian_factor(Xi), K, np.random.default_rng([seed, 78]))
    best, best_rel = 0.0, 0.0
    for x, y, r in zip(X, Y, R):
        diff = obj.mean_grads_at(x + eps, data) - obj.mean_grads_at(y + eps, data)
        mean, se = _pair_stats(diff)
        ratio = float(np.linalg.norm(mean)) / r
        if ratio > best:
            best = ratio
            norm = float(np.linalg.norm(mean))
            best_rel = float(np.linalg.norm(se)) / norm if norm > 0 else 0.0
    return SmoothingReport(alpha, beta, sigma_min, bound, best, best_rel)


def _batch_noise(obj, W, dataset, config, m):
    """Per-worker ``E||g_batch - grad L(w_j)||^2`` for the configured sampler."""
    data = dataset.all()
    out = []
    for j in range(m):
        w = W[j]
        G = obj.grads(w, data)
        full = np.sum(G, axis=0) / G.shape[0]
        if config.sampling == "full":
            out.append(0.0)
            continue
        shard = dataset.shards[j]
        Gs = G[shard]
        n, B = shard.size, config.local_batch
        gs = np.sum(Gs, axis=0) / n
        var = float(np.sum((Gs - gs) ** 2) / n)
        fpc = (n - B) / (n - 1) if n > 1 else 0.0
        bias = gs - full
        out.append(float(bias @ bias) + var * fpc / B)
    return out


def descent_condition_check(
    history: Sequence[WorkerEnsemble],
    obj: Objective,
    P: GossipMatrix,
    eta: float,
    dataset: Dataset,
    config: TrainerConfig,
) -> list[dict]:
    """Compare each step's learning rate with the consensus-descent threshold.

    For each consecutive pair of snapshots reports ``eta_star(t)``, whether
    ``eta <= eta_star(t)`` and whether ``Tr Xi(t+1) <= Tr Xi(t)`` held. A
    ``violation`` is a step that satisfied the condition yet did not descend.
    """
    lam = spectral_report(P).lam
    data = dataset.all()
    out = []
    for t in range(len(history) - 1):
        ens, nxt = history[t], history[t + 1]
        tr, tr_next = consensus_distance(ens), consensus_distance(nxt)
        grad_sq = 0.0
        for w in ens.weights:
            G = obj.grads(w, data)
            g = np.sum(G, axis=0) / G.shape[0]
            grad_sq += float(g @ g)
        grad_sq /= ens.m
        noise = float(np.mean(_batch_noise(obj, ens.weights, dataset, config, ens.m)))
        bracket = grad_sq + (1.0 - lam) * noise
        if tr == 0.0:
            eta_star = 0.0
        elif lam == 0.0 or bracket == 0.0:
            eta_star = math.inf
        else:
            eta_star = tr * (1.0 - lam) / (math.sqrt(6.0) * math.sqrt(lam)) / math.sqrt(bracket)
        ok = eta <= eta_star
        descended = tr_next <= tr
        out.append(
            {
                "step": ens.step,
                "consensus_distance": tr,
                "next_consensus_distance": tr_next,
                "eta_star": eta_star,
                "condition_met": bool(ok),
                "descended": bool(descended),
                "violation": bool(ok and not descended),
            }
        )
    return out


@dataclass(frozen=True)
class LandscapeSlice:
    mode: str
    coords: np.ndarray
    losses: np.ndarray
    directions: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if self.mode == "1d":
            writer.writerow(["x", "loss"])
            for x, v in zip(self.coords, self.losses):
                writer.writerow([repr(float(x)), repr(float(v))])
        else:
            writer.writerow(["x", "y", "loss"])
            for i, x in enumerate(self.coords):
                for k, y in enumerate(self.coords):
                    writer.writerow([repr(float(x)), repr(float(y)), repr(float(self.losses[i, k]))])
        return buf.getvalue()


def _directions(obj: Objective, w, count: int, rng) -> np.ndarray:
    d = w.size
    raw = rng.standard_normal((count, d))
    Q, _ = np.linalg.qr(raw.T)
    dirs = Q.T[:count].copy()
    groups = obj.filter_groups()
    if groups is None:
        return dirs
    bias = obj.bias_indices() if hasattr(obj, "bias_indices") else np.array([], dtype=int)
    for v in dirs:
        for g in groups:
            vn = float(np.linalg.norm(v[g]))
            if vn > 0:
                v[g] *= float(np.linalg.norm(w[g])) / vn
        v[bias] = 0.0
    return dirs


def landscape_slice(
    obj: Objective,
    w_center,
    dataset: Dataset,
    mode: str = "1d",
    extent: float = 1.0,
    resolution: int = 21,
    seed: int = 0,
) -> LandscapeSlice:
    """Full-batch loss on a 1D line or 2D plane through ``w_center``.

    Directions are random and orthonormal; for networks they are then
    filter-normalized (each neuron's slice scaled to that neuron's weight
    norm, bias entries zeroed).
    """
    if mode not in ("1d", "2d"):
        raise ValueError(f"mode must be '1d' or '2d', got {mode!r}")
    if resolution < 3:
        raise ValueError("resolution must be >= 3")
    w = np.asarray(w_center, float)
    ndir = 1 if mode == "1d" else 2
    dirs = _directions(obj, w, ndir, np.random.default_rng([seed, 91]))
    coords = np.array([0.0]) if extent == 0 else np.linspace(-extent, extent, resolution)
    data = dataset.all()
    if mode == "1d":
        pts = w + coords[:, None] * dirs[0]
        losses = obj.mean_losses_at(pts, data)
        if extent != 0 and resolution % 2 == 1:
            losses[resolution // 2] = obj.mean_losses_at(w[None, :], data)[0]
    else:
        a, b = np.meshgrid(coords, coords, indexing="ij")
        pts = w + a.reshape(-1, 1) * dirs[0] + b.reshape(-1, 1) * dirs[1]
        losses = obj.mean_losses_at(pts, data).reshape(coords.size, coords.size)
        if extent != 0 and resolution % 2 == 1:
            losses[resolution // 2, resolution // 2] = obj.mean_losses_at(w[None, :], data)[0]
    return LandscapeSlice(mode, coords, losses, dirs)


def hessian_lambda_max(
    obj: Objective, w, dataset: Dataset, iters: int = 5000, tol: float = 1e-12, seed: int = 0
) -> float:
    """Largest eigenvalue of the full-batch Hessian by shifted power iteration."""
    H = batch_hessian(obj, w, dataset.full_batch(), dataset)
    shift = float(np.linalg.norm(H))
    A = H + shift * np.eye(H.shape[0])
    v = np.random.default_rng([seed, 55]).standard_normal(H.shape[0])
    v /= np.linalg.norm(v)
    mu = float(v @ A @ v)
    for _ in range(iters):
        u = A @ v
        nu = float(np.linalg.norm(u))
        if nu == 0.0:
            return -shift
        v = u / nu
        new = float(v @ A @ v)
        if abs(new - mu) <= tol * max(1.0, abs(new)):
            mu = new
            break
        mu = new
    return mu - shift


def measure(
    obj: Objective,
    ensemble: WorkerEnsemble,
    dataset: Dataset,
    *,
    eta: float,
    total_batch: int,
    sharpness_samples: int = 0,
    seed: int = 0,
    store_xi: bool = False,
) -> DiagnosticsRecord:
    """Build a :class:`DiagnosticsRecord` for one snapshot."""
    wa = ensemble.averaged_model()
    full = dataset.full_batch()
    loss = batch_loss(obj, wa, full, dataset)
    g = batch_gradient(obj, wa, full, dataset)
    cd = consensus_distance(ensemble)
    rec = DiagnosticsRecord(ensemble.step, loss, float(np.linalg.norm(g)), cd)
    if ensemble.d <= MAX_DENSE_DIM:
        Xi = weight_diversity_matrix(ensemble)
        rec.hessian_consensus_alignment = hessian_consensus_alignment(obj, wa, Xi, full, dataset)
        if sharpness_samples > 0:
            from .engine import stream

            est, se = avg_direction_sharpness(
                obj, wa, Xi, sharpness_samples, dataset, stream(seed, "sharpness", 0, ensemble.step)
            )
            rec.avg_direction_sharpness, rec.avg_direction_sharpness_stderr = est, se
        B = min(max(total_batch, 1), dataset.n)
        rec.regularizer = implicit_regularizer_dsgd(obj, wa, Xi, dataset, eta, B).as_dict()
        if store_xi:
            rec.xi = Xi.tolist()
    else:
        rec.regularizer = implicit_regularizer_dsgd(obj, wa, None, dataset, eta, min(total_batch, dataset.n)).as_dict()
    return rec
