"""Compare the expected D-SGD update with the Gaussian-smoothed gradient.

The expected D-SGD direction is measured by repeating one D-SGD round from a
fixed snapshot; the smoothed direction is an antithetic Monte-Carlo mean of
the full-batch gradient around the averaged model with covariance equal to
the ensemble's weight diversity. Their gap is expected to shrink with the
cube of the worker displacement.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .diagnostics import (
    avg_direction_sharpness,
    consensus_distance,
    hessian_lambda_max,
    landscape_slice,
    smoothed_gradient,
    weight_diversity_matrix,
)
from .engine import (
    TrainerConfig,
    WorkerEnsemble,
    csgd_step,
    dsgd_step,
    gaussian_factor,
)
from .objectives import Dataset, Objective, batch_gradient, batch_loss
from .topology import GossipMatrix

__all__ = [
    "DirectionComparison",
    "ScalingFit",
    "ComparisonError",
    "expected_dsgd_direction",
    "adsam_direction",
    "compare_directions",
    "residual_scaling_fit",
    "minibatch_variance_identity_check",
    "equal_partitions",
    "sharpness_preference_comparison",
]

_ABS_FLOOR = 1e-12


class ComparisonError(RuntimeError):
    """A paired run diverged or never reached the loss threshold."""


@dataclass(frozen=True)
class DirectionComparison:
    dsgd_expected_direction: np.ndarray
    adsam_direction: np.ndarray
    plain_gradient: np.ndarray
    residual_norm: float
    displacement_scale: float
    dsgd_stderr: np.ndarray
    adsam_stderr: np.ndarray

    @property
    def combined_stderr(self) -> float:
        return float(np.linalg.norm(np.hypot(self.dsgd_stderr, self.adsam_stderr)))

    @property
    def noise_floor(self) -> float:
        """Three combined standard errors, never below a rounding floor."""
        scale = max(1.0, float(np.max(np.abs(self.plain_gradient))))
        return max(3.0 * self.combined_stderr, _ABS_FLOOR * scale)

    def as_dict(self) -> dict:
        out = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        out["combined_stderr"] = self.combined_stderr
        out["noise_floor"] = self.noise_floor
        return out


@dataclass(frozen=True)
class ScalingFit:
    """Log-log fit of residual against displacement scale.

    ``slope`` is NaN and ``exact`` is True when no scale produced a residual
    above its noise floor.
    """

    scales: tuple[float, ...]
    residuals: tuple[float, ...]
    noise_floors: tuple[float, ...]
    used: tuple[bool, ...]
    slope: float
    slope_stderr: float
    intercept: float
    exact: bool

    def as_dict(self) -> dict:
        return asdict(self)


def expected_dsgd_direction(
    obj: Objective,
    ensemble: WorkerEnsemble,
    P: GossipMatrix,
    dataset: Dataset,
    config: TrainerConfig,
    trials: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean of ``(w_a(t) - w_a(t+1)) / eta`` over independent batch draws.

    Each trial is one D-SGD round from the same snapshot with its own draw
    index. With ``sampling == "full"`` the round is deterministic and a
    single trial is run (standard error zero).
    """
    if trials < 2:
        raise ValueError("trials must be >= 2")
    eta = config.eta_at(ensemble.step)
    if eta <= 0:
        raise ValueError("the expected direction needs eta > 0")
    wa = ensemble.averaged_model()
    n = 1 if config.sampling == "full" else trials
    dirs = np.empty((n, ensemble.d))
    for t in range(n):
        out = dsgd_step(ensemble, P, obj, dataset, config, ensemble.step, draw=t)
        dirs[t] = (wa - out.post.averaged_model()) / eta
    mean = np.sum(dirs, axis=0) / n
    se = np.zeros(ensemble.d) if n == 1 else np.std(dirs, axis=0, ddof=1) / math.sqrt(n)
    return mean, se


def adsam_direction(obj: Objective, w_a, Xi, dataset: Dataset, K: int, rng=0) -> tuple[np.ndarray, np.ndarray]:
    """Antithetic estimate of ``E_{eps ~ N(0, Xi)}[full-batch grad(w_a + eps)]``."""
    if K < 2 or K % 2:
        raise ValueError("K must be an even number >= 2")
    factor = gaussian_factor(Xi)
    w_a = np.asarray(w_a, float)
    if not np.any(factor):
        return batch_gradient(obj, w_a, dataset.full_batch(), dataset), np.zeros(w_a.size)
    return smoothed_gradient(obj, w_a, factor, K, dataset.all(), rng)


def compare_directions(
    obj: Objective,
    ensemble: WorkerEnsemble,
    P: GossipMatrix,
    dataset: Dataset,
    config: TrainerConfig,
    trials: int,
    K: int,
    rng=0,
    displacement_scale: float = 1.0,
) -> DirectionComparison:
    wa = ensemble.averaged_model()
    dsgd, dsgd_se = expected_dsgd_direction(obj, ensemble, P, dataset, config, trials)
    ad, ad_se = adsam_direction(obj, wa, weight_diversity_matrix(ensemble), dataset, K, rng)
    plain = batch_gradient(obj, wa, dataset.full_batch(), dataset)
    return DirectionComparison(
        dsgd, ad, plain, float(np.linalg.norm(dsgd - ad)), float(displacement_scale), dsgd_se, ad_se
    )


def residual_scaling_fit(
    obj: Objective,
    base_ensemble: WorkerEnsemble,
    P: GossipMatrix,
    dataset: Dataset,
    config: TrainerConfig,
    scales: Sequence[float],
    trials: int = 2,
    K: int = 100_000,
    seed: int = 0,
) -> tuple[ScalingFit, list[DirectionComparison]]:
    """Fit ``log residual = slope * log c + intercept`` over displacement scales.

    The ensemble is shrunk to ``w_a + c (w_j - w_a)`` for every ``c``. A
    point whose residual is below ten times its noise floor is excluded
    from the fit (and reported in ``used``).
    """
    scales = [float(c) for c in scales]
    if len(scales) < 4:
        raise ValueError("need at least 4 scales")
    if any(not 0 < c <= 1 for c in scales):
        raise ValueError("scales must lie in (0, 1]")
    if any(a <= b for a, b in zip(scales, scales[1:])):
        raise ValueError("scales must be strictly decreasing")
    comps = []
    for i, c in enumerate(scales):
        ens = base_ensemble.rescaled(c)
        rng = np.random.default_rng([seed, 6, i])
        comps.append(compare_directions(obj, ens, P, dataset, config, trials, K, rng, c))
    residuals = tuple(cmp.residual_norm for cmp in comps)
    floors = tuple(cmp.noise_floor for cmp in comps)
    used = tuple(r >= 10.0 * f for r, f in zip(residuals, floors))
    exact = all(r <= f for r, f in zip(residuals, floors))
    slope = stderr = intercept = math.nan
    if sum(used) >= 2:
        x = np.log([c for c, u in zip(scales, used) if u])
        y = np.log([r for r, u in zip(residuals, used) if u])
        fit = stats.linregress(x, y)
        slope, stderr, intercept = float(fit.slope), float(fit.stderr), float(fit.intercept)
    return ScalingFit(tuple(scales), residuals, floors, used, slope, stderr, intercept, exact), comps


def equal_partitions(n: int, size: int):
    """Yield every unordered partition of ``range(n)`` into blocks of ``size``."""

    def rec(remaining):
        if not remaining:
            yield ()
            return
        head, rest = remaining[0], remaining[1:]
        for others in itertools.combinations(rest, size - 1):
            block = (head, *others)
            left = tuple(x for x in rest if x not in others)
            for tail in rec(left):
                yield (block, *tail)

    yield from rec(tuple(range(n)))


def minibatch_variance_identity_check(V, B: int) -> tuple[float, float, float]:
    """Exhaustive check of the without-replacement mini-batch variance formula.

    ``lhs`` averages ``(1/(m B^2)) sum_i ||sum_{j in batch_i} (V_j - mean V)||^2``
    over every partition of the ``N`` vectors into ``m = N / B`` batches
    (ordering batches does not change the average). ``rhs`` is
    ``(N - B) / ((N - 1) B)`` times the one-sample variance.
    """
    V = np.asarray(V, float)
    if V.ndim == 1:
        V = V[:, None]
    N = V.shape[0]
    if B < 1 or N % B:
        raise ValueError(f"batch size {B} does not divide N={N}")
    if N > 10:
        raise ValueError("exhaustive enumeration is limited to N <= 10")
    m = N // B
    centered = V - np.sum(V, axis=0) / N
    total, count = 0.0, 0
    for part in equal_partitions(N, B):
        s = 0.0
        for block in part:
            v = np.sum(centered[list(block)], axis=0)
            s += float(v @ v)
        total += s / (m * B * B)
        count += 1
    lhs = total / count
    var = float(np.sum(centered * centered)) / N
    rhs = 0.0 if N == 1 else (N - B) / ((N - 1) * B) * var
    if rhs == 0.0:
        scale = max(1.0, float(np.max(np.abs(V))) ** 2)
        rel = 0.0 if lhs <= 1e-24 * scale else math.inf
    else:
        rel = abs(lhs - rhs) / rhs
    return lhs, rhs, rel


def _train_to_threshold(step_fn, ensemble, obj, dataset, threshold, max_steps, check_every):
    full = dataset.full_batch()
    ens = ensemble
    for t in range(max_steps + 1):
        if t % check_every == 0 or t == max_steps:
            if batch_loss(obj, ens.averaged_model(), full, dataset) <= threshold:
                return ens, t
        if t == max_steps:
            break
        ens = step_fn(ens, t).post
        if not ens.is_finite():
            raise ComparisonError(f"run diverged at step {t}")
    raise ComparisonError(f"train loss stayed above {threshold} for {max_steps} steps")


def sharpness_preference_comparison(
    obj: Objective,
    dataset: Dataset,
    P: GossipMatrix,
    config: TrainerConfig,
    w0,
    *,
    loss_threshold: float,
    max_steps: int | None = None,
    check_every: int = 10,
    probe_sigma: float = 0.05,
    sharpness_samples: int = 2000,
    slice_extent: float = 1.0,
    slice_resolution: int = 21,
) -> dict:
    """Train D-SGD (gossip ``P``) and C-SGD from a common init and compare endpoints.

    Both runs share the batch streams (same seed) and stop at the first
    check where the averaged model's full-batch loss reaches
    ``loss_threshold``. Reported per algorithm: steps taken, final loss,
    largest Hessian eigenvalue, sharpness under the probe covariance
    ``probe_sigma^2 I`` and a 1D landscape slice.
    """
    max_steps = config.steps if max_steps is None else max_steps
    start = WorkerEnsemble.replicate(w0, P.m)
    runs = {
        "dsgd": lambda ens, t: dsgd_step(ens, P, obj, dataset, config, t),
        "csgd": lambda ens, t: csgd_step(ens, obj, dataset, config, t),
    }
    probe = probe_sigma**2 * np.eye(start.d)
    out = {}
    for name, fn in runs.items():
        end, steps = _train_to_threshold(fn, start, obj, dataset, loss_threshold, max_steps, check_every)
        w = end.averaged_model()
        sharp, sharp_se = avg_direction_sharpness(
            obj, w, probe, sharpness_samples, dataset, np.random.default_rng([config.seed, 5, 0])
        )
        sl = landscape_slice(obj, w, dataset, "1d", slice_extent, slice_resolution, config.seed)
        out[name] = {
            "steps": steps,
            "final_loss": batch_loss(obj, w, dataset.full_batch(), dataset),
            "lambda_max": hessian_lambda_max(obj, w, dataset),
            "sharpness": sharp,
            "sharpness_stderr": sharp_se,
            "consensus_distance": consensus_distance(end),
            "slice": {"x": sl.coords.tolist(), "loss": sl.losses.tolist()},
        }
    out["lambda_max_difference"] = out["dsgd"]["lambda_max"] - out["csgd"]["lambda_max"]
    out["sharpness_difference"] = out["dsgd"]["sharpness"] - out["csgd"]["sharpness"]
    out["dsgd_flatter"] = bool(out["dsgd"]["lambda_max"] <= out["csgd"]["lambda_max"])
    return out
