"""Per-sample objectives and the synthetic datasets they are evaluated on.

An objective never stores data. It evaluates per-sample losses, gradients
and (optionally) Hessians against a dictionary of arrays whose leading axis
indexes samples; :class:`Dataset` owns those arrays and the worker shards.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = [
    "Objective",
    "QuadraticObjective",
    "CubicObjective",
    "MLPObjective",
    "HuberKinkObjective",
    "Dataset",
    "Batch",
    "make_quadratic",
    "make_cubic_perturbed",
    "make_pure_cubic",
    "make_mlp",
    "make_huber_kink",
    "load_csv_dataset",
    "batch_loss",
    "batch_gradient",
    "batch_hessian",
    "third_order_contract",
    "MAX_DENSE_DIM",
]

MAX_DENSE_DIM = 200
THIRD_ORDER_STEP = 1e-3


class Objective:
    """Base class: a differentiable per-sample loss ``L(w; z)``.

    Subclasses implement :meth:`losses` and :meth:`grads`; those with closed
    form curvature also implement :meth:`hessians` and set
    ``has_analytic_hessian``.
    """

    dim: int
    has_analytic_hessian = False

    def losses(self, w: np.ndarray, data: Mapping[str, np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def grads(self, w: np.ndarray, data: Mapping[str, np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def hessians(self, w: np.ndarray, data: Mapping[str, np.ndarray]) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no analytic Hessian")

    def mean_grads_at(self, W: np.ndarray, data: Mapping[str, np.ndarray]) -> np.ndarray:
        """Batch-mean gradient at each row of ``W`` (shape ``(K, d)``)."""
        return np.stack([_mean_rows(self.grads(w, data)) for w in W])

    def mean_losses_at(self, W: np.ndarray, data: Mapping[str, np.ndarray]) -> np.ndarray:
        """Batch-mean loss at each row of ``W``."""
        return np.array([float(np.mean(self.losses(w, data))) for w in W])

    def filter_groups(self) -> list[np.ndarray] | None:
        """Index groups for filter-normalized directions; None if not a network."""
        return None


def _mean_rows(a: np.ndarray) -> np.ndarray:
    # Sequential index-order accumulation keeps the reduction bit-stable.
    out = np.zeros(a.shape[1:])
    for row in a:
        out = out + row
    return out / a.shape[0]


@dataclass(frozen=True)
class QuadraticObjective(Objective):
    """``L(w; z) = 1/2 w^T H_z w + b_z^T w``; data keys ``H`` and ``b``."""

    dim: int
    has_analytic_hessian = True

    def losses(self, w, data):
        H, b = data["H"], data["b"]
        return 0.5 * np.einsum("i,nij,j->n", w, H, w) + b @ w

    def grads(self, w, data):
        return np.einsum("nij,j->ni", data["H"], w) + data["b"]

    def hessians(self, w, data):
        return np.array(data["H"], dtype=float)

    def mean_grads_at(self, W, data):
        H = _mean_rows(data["H"])
        b = _mean_rows(data["b"])
        return W @ H.T + b

    def mean_losses_at(self, W, data):
        H = _mean_rows(data["H"])
        b = _mean_rows(data["b"])
        return 0.5 * np.einsum("ki,ij,kj->k", W, H, W) + W @ b


@dataclass(frozen=True)
class CubicObjective(Objective):
    """Quadratic plus a diagonal cubic term plus quartic confinement.

    ``L(w; z) = 1/2 w^T H_z w + b_z^T w + s * sum_i c_{z,i} w_i^3 + q ||w||^4``

    The third derivative of the cubic part is the constant diagonal
    ``6 s c_z``. With ``q = 0`` the gradient is an exact quadratic in ``w``.
    """

    dim: int
    cubic_scale: float
    quartic: float = 0.01
    has_analytic_hessian = True

    def losses(self, w, data):
        H, b, c = data["H"], data["b"], data["c"]
        quad = 0.5 * np.einsum("i,nij,j->n", w, H, w) + b @ w
        return quad + self.cubic_scale * (c @ w**3) + self.quartic * float(w @ w) ** 2

    def grads(self, w, data):
        H, b, c = data["H"], data["b"], data["c"]
        g = np.einsum("nij,j->ni", H, w) + b + 3.0 * self.cubic_scale * c * w**2
        return g + 4.0 * self.quartic * float(w @ w) * w

    def hessians(self, w, data):
        H, c = data["H"], data["c"]
        n, d = c.shape
        out = np.array(H, dtype=float)
        idx = np.arange(d)
        out[:, idx, idx] += 6.0 * self.cubic_scale * c * w
        out += self.quartic * (4.0 * float(w @ w) * np.eye(d) + 8.0 * np.outer(w, w))
        return out

    def mean_grads_at(self, W, data):
        H = _mean_rows(data["H"])
        b = _mean_rows(data["b"])
        c = _mean_rows(data["c"])
        sq = np.sum(W * W, axis=1, keepdims=True)
        return W @ H.T + b + 3.0 * self.cubic_scale * c * W**2 + 4.0 * self.quartic * sq * W

    def mean_losses_at(self, W, data):
        H = _mean_rows(data["H"])
        b = _mean_rows(data["b"])
        c = _mean_rows(data["c"])
        sq = np.sum(W * W, axis=1)
        quad = 0.5 * np.einsum("ki,ij,kj->k", W, H, W) + W @ b
        return quad + self.cubic_scale * (W**3 @ c) + self.quartic * sq**2


@dataclass(frozen=True)
class HuberKinkObjective(Objective):
    """1D Huber-smoothed absolute value ``|w - x_z|`` with kink width ``delta``.

    Loss Lipschitz constant 1, gradient Lipschitz constant ``1 / delta``.
    """

    delta: float = 0.01
    dim: int = 1

    def losses(self, w, data):
        r = float(w[0]) - data["x"]
        a = np.abs(r)
        return np.where(a <= self.delta, 0.5 * r * r / self.delta, a - 0.5 * self.delta)

    def grads(self, w, data):
        r = float(w[0]) - data["x"]
        return np.clip(r / self.delta, -1.0, 1.0)[:, None]

    def mean_grads_at(self, W, data):
        r = W[:, :1] - data["x"][None, :]
        g = np.clip(r / self.delta, -1.0, 1.0)
        return np.mean(g, axis=1, keepdims=True)

    def mean_losses_at(self, W, data):
        a = np.abs(W[:, :1] - data["x"][None, :])
        vals = np.where(a <= self.delta, 0.5 * a * a / self.delta, a - 0.5 * self.delta)
        return np.mean(vals, axis=1)


@dataclass(frozen=True)
class MLPObjective(Objective):
    """One-hidden-layer tanh network with logistic loss.

    Parameter layout: ``W1`` (hidden x inputs, row-major), ``b1``, ``w2``,
    ``b2``. Labels are in {0, 1}; the loss is ``softplus(f) - y f``.
    """

    n_inputs: int
    hidden: int

    @property
    def dim(self) -> int:  # type: ignore[override]
        return self.hidden * (self.n_inputs + 2) + 1

    def unpack(self, w):
        h, p = self.hidden, self.n_inputs
        W1 = w[: h * p].reshape(h, p)
        b1 = w[h * p : h * p + h]
        w2 = w[h * p + h : h * p + 2 * h]
        b2 = w[-1]
        return W1, b1, w2, b2

    def _forward(self, w, x):
        W1, b1, w2, b2 = self.unpack(w)
        a = np.tanh(x @ W1.T + b1)
        return a, a @ w2 + b2

    def losses(self, w, data):
        _, f = self._forward(w, data["x"])
        return np.logaddexp(0.0, f) - data["y"] * f

    def grads(self, w, data):
        x, y = data["x"], data["y"]
        W1, b1, w2, b2 = self.unpack(w)
        a, f = self._forward(w, x)
        df = 0.5 * (1.0 + np.tanh(0.5 * f)) - y  # sigmoid(f) - y
        da = df[:, None] * w2[None, :] * (1.0 - a * a)
        gW1 = da[:, :, None] * x[:, None, :]
        return np.concatenate(
            [gW1.reshape(len(y), -1), da, df[:, None] * a, df[:, None]], axis=1
        )

    def filter_groups(self):
        h, p = self.hidden, self.n_inputs
        groups = [np.arange(i * p, (i + 1) * p) for i in range(h)]
        groups.append(np.arange(h * p + h, h * p + 2 * h))
        return groups

    def bias_indices(self) -> np.ndarray:
        h, p = self.hidden, self.n_inputs
        return np.concatenate([np.arange(h * p, h * p + h), [self.dim - 1]])


@dataclass(frozen=True)
class Batch:
    worker: int
    indices: np.ndarray

    def __post_init__(self):
        idx = np.sort(np.asarray(self.indices, dtype=np.int64))
        if idx.size < 1:
            raise ValueError("a batch needs at least one sample")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def size(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class Dataset:
    """Sample arrays (leading axis = sample index) plus a shard map.

    ``shards[j]`` lists the sample indices owned by worker ``j``.
    """

    arrays: Mapping[str, np.ndarray]
    shards: tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self):
        frozen = {}
        n = None
        for k, v in self.arrays.items():
            v = np.array(v, dtype=float)
            v.setflags(write=False)
            frozen[k] = v
            if n is None:
                n = v.shape[0]
            elif v.shape[0] != n:
                raise ValueError("all dataset arrays need the same leading length")
        object.__setattr__(self, "arrays", frozen)
        if not self.shards:
            object.__setattr__(self, "shards", (np.arange(self.n),))

    @property
    def n(self) -> int:
        return next(iter(self.arrays.values())).shape[0]

    @property
    def m(self) -> int:
        return len(self.shards)

    def take(self, indices) -> dict[str, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        return {k: v[idx] for k, v in self.arrays.items()}

    def all(self) -> dict[str, np.ndarray]:
        return dict(self.arrays)

    def full_batch(self, worker: int = 0) -> Batch:
        return Batch(worker, np.arange(self.n))

    def sharded(self, m: int) -> "Dataset":
        """Uniform contiguous sharding: shard sizes differ by at most one."""
        if m < 1 or m > self.n:
            raise ValueError(f"cannot shard {self.n} samples over {m} workers")
        shards = tuple(np.array(s) for s in np.array_split(np.arange(self.n), m))
        return Dataset(self.arrays, shards)

    def to_bytes(self) -> bytes:
        return b"".join(k.encode() + np.ascontiguousarray(v).tobytes() for k, v in sorted(self.arrays.items()))


def _psd_matrices(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    A = rng.standard_normal((n, d, d)) / math.sqrt(d)
    H = np.einsum("nki,nkj->nij", A, A)
    H = 0.5 * (H + np.transpose(H, (0, 2, 1)))
    norms = np.linalg.norm(H, ord=2, axis=(1, 2))
    # Cap spectral norm at 2.
    scale = np.minimum(1.0, 2.0 / np.maximum(norms, 1e-300))
    return H * scale[:, None, None]


def make_quadratic(d: int, seed: int, n: int = 32) -> tuple[QuadraticObjective, Dataset]:
    """Random PSD quadratics, one ``(H_z, b_z)`` pair per sample."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    rng = np.random.default_rng([seed, 101])
    H = _psd_matrices(rng, n, d)
    b = rng.standard_normal((n, d))
    return QuadraticObjective(d), Dataset({"H": H, "b": b})


def make_cubic_perturbed(
    d: int, seed: int, cubic_scale: float, n: int = 32, quartic: float = 0.01
) -> tuple[CubicObjective, Dataset]:
    """Random quadratics with per-sample diagonal cubic terms and quartic confinement."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if cubic_scale < 0:
        raise ValueError("cubic_scale must be nonnegative")
    rng = np.random.default_rng([seed, 101])
    H = _psd_matrices(rng, n, d)
    b = rng.standard_normal((n, d))
    c = np.random.default_rng([seed, 202]).standard_normal((n, d))
    return CubicObjective(d, float(cubic_scale), float(quartic)), Dataset({"H": H, "b": b, "c": c})


def make_pure_cubic(d: int = 1, scale: float = 1.0) -> tuple[CubicObjective, Dataset]:
    """Single sample ``L(w) = scale * sum_i w_i^3``, no quadratic part, no confinement."""
    data = {"H": np.zeros((1, d, d)), "b": np.zeros((1, d)), "c": np.ones((1, d))}
    return CubicObjective(d, float(scale), 0.0), Dataset(data)


def make_huber_kink(delta: float = 0.01) -> tuple[HuberKinkObjective, Dataset]:
    return HuberKinkObjective(delta), Dataset({"x": np.zeros(1)})


def _two_moons(rng, n):
    n_out = n // 2
    n_in = n - n_out
    t_out = rng.uniform(0, math.pi, n_out)
    t_in = rng.uniform(0, math.pi, n_in)
    x = np.concatenate(
        [
            np.stack([np.cos(t_out), np.sin(t_out)], axis=1),
            np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1),
        ]
    )
    x += 0.1 * rng.standard_normal(x.shape)
    y = np.concatenate([np.zeros(n_out), np.ones(n_in)])
    return x, y


def _blobs(rng, n):
    n0 = n // 2
    y = np.concatenate([np.zeros(n0), np.ones(n - n0)])
    centers = np.array([[-1.0, -1.0], [1.0, 1.0]])
    x = centers[y.astype(int)] + 0.8 * rng.standard_normal((n, 2))
    return x, y


def make_mlp(
    hidden_width: int, seed: int, kind: str = "two_moons", n: int = 200
) -> tuple[MLPObjective, Dataset]:
    """Tanh MLP on a planar two-class dataset.

    Samples are shuffled once so contiguous shards are class balanced.
    """
    if hidden_width < 1:
        raise ValueError("hidden_width must be >= 1")
    if n < 4:
        raise ValueError("need at least 4 samples")
    rng = np.random.default_rng([seed, 303])
    if kind == "two_moons":
        x, y = _two_moons(rng, n)
    elif kind == "blobs":
        x, y = _blobs(rng, n)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    perm = rng.permutation(n)
    return MLPObjective(2, int(hidden_width)), Dataset({"x": x[perm], "y": y[perm]})


def load_csv_dataset(path: str | Path, m: int = 1) -> Dataset:
    """Header row, feature columns, then an integer label column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: no data rows")
    body = [[float(v) for v in r] for r in rows[1:] if r]
    arr = np.array(body, dtype=float)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    labels = arr[:, -1]
    if not np.all(labels == np.round(labels)):
        raise ValueError(f"{path}: label column must hold integers")
    if arr.shape[0] < m:
        raise ValueError(f"{path}: {arr.shape[0]} samples is fewer than {m} workers")
    return Dataset({"x": arr[:, :-1], "y": labels})


def _batch_data(dataset: Dataset, batch) -> dict[str, np.ndarray]:
    idx = batch.indices if isinstance(batch, Batch) else np.sort(np.asarray(batch, dtype=np.int64))
    if idx.size == 0:
        raise ValueError("empty batch")
    if idx.min() < 0 or idx.max() >= dataset.n:
        raise IndexError("batch index out of range")
    return dataset.take(idx)


def batch_loss(obj: Objective, w, batch, dataset: Dataset) -> float:
    return float(_mean_rows(obj.losses(np.asarray(w, float), _batch_data(dataset, batch))[:, None])[0])


def batch_gradient(obj: Objective, w, batch, dataset: Dataset) -> np.ndarray:
    """Mean of per-sample gradients over ``batch`` (a :class:`Batch` or index list)."""
    return _mean_rows(obj.grads(np.asarray(w, float), _batch_data(dataset, batch)))


def _fd_hessian(obj, w, data):
    d = w.size
    h = 1e-4 * (1.0 + float(np.max(np.abs(w))))
    M = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        M[i] = (_mean_rows(obj.grads(w + e, data)) - _mean_rows(obj.grads(w - e, data))) / (2 * h)
    return 0.5 * (M + M.T)


def batch_hessian(obj: Objective, w, batch, dataset: Dataset, method: str = "auto") -> np.ndarray:
    """Mean per-sample Hessian over ``batch``.

    Analytic when the objective provides one (and ``method`` allows it),
    otherwise symmetrized central differences of the batch gradient.
    """
    w = np.asarray(w, float)
    if w.size > MAX_DENSE_DIM:
        raise ValueError(f"dense Hessian limited to d <= {MAX_DENSE_DIM}, got {w.size}")
    data = _batch_data(dataset, batch)
    if method == "fd" or (method == "auto" and not obj.has_analytic_hessian):
        return _fd_hessian(obj, w, data)
    return _mean_rows(obj.hessians(w, data))


def sample_hessians(obj: Objective, w, dataset: Dataset) -> np.ndarray:
    """Per-sample Hessians over the whole dataset, shape ``(N, d, d)``."""
    w = np.asarray(w, float)
    if w.size > MAX_DENSE_DIM:
        raise ValueError(f"dense Hessian limited to d <= {MAX_DENSE_DIM}, got {w.size}")
    data = dataset.all()
    if obj.has_analytic_hessian:
        return np.asarray(obj.hessians(w, data), dtype=float)
    d = w.size
    h = 1e-4 * (1.0 + float(np.max(np.abs(w))))
    out = np.empty((dataset.n, d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        out[:, i, :] = (obj.grads(w + e, data) - obj.grads(w - e, data)) / (2 * h)
    return 0.5 * (out + np.transpose(out, (0, 2, 1)))


def third_order_contract(obj: Objective, w, batch, dataset: Dataset, M) -> np.ndarray:
    """Contract the batch third-derivative tensor with a symmetric matrix.

    Entry ``i`` is ``sum_{l,s} d^3 L / dw_i dw_l dw_s * M[l, s]``. Slices
    of the tensor come from central differences of :func:`batch_hessian`
    with step ``1e-3``.
    """
    w = np.asarray(w, float)
    M = np.asarray(M, float)
    d = w.size
    if M.shape != (d, d):
        raise ValueError(f"contraction matrix must be {d}x{d}")
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, float(np.max(np.abs(M))))):
        raise ValueError("contraction matrix must be symmetric")
    out = np.empty(d)
    h = THIRD_ORDER_STEP
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        Ti = (batch_hessian(obj, w + e, batch, dataset) - batch_hessian(obj, w - e, batch, dataset)) / (2 * h)
        out[i] = float(np.sum(Ti * M))
    return out
