"""Gossip matrices for decentralized training.

Every matrix built here is symmetric and doubly stochastic. Off-diagonal
weights follow the Metropolis-Hastings rule ``1 / (1 + max(deg_j, deg_k))``
and the diagonal absorbs the remainder of each row. On regular graphs this
coincides with uniform ``1 / (deg + 1)`` closed-neighbourhood weights, so a
ring gets 1/3 everywhere it is connected and the complete graph gets 1/m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "KINDS",
    "GossipMatrix",
    "SpectralReport",
    "TopologyError",
    "ConvergenceError",
    "build_topology",
    "from_edges",
    "load_edge_file",
    "spectral_report",
    "jacobi_eigenvalues",
    "gossip_mix",
    "shuffle_workers",
]

KINDS = ("ring", "grid", "exponential", "fully_connected", "star", "custom")

_ROW_SUM_TOL = 1e-12
_JACOBI_MAX_M = 64
_ZERO_SNAP = 1e-12


class TopologyError(ValueError):
    """Invalid topology parameters or a malformed gossip matrix."""


class ConvergenceError(RuntimeError):
    """The eigensolver hit its sweep cap without converging."""


@dataclass(frozen=True)
class GossipMatrix:
    """Symmetric doubly stochastic mixing matrix plus the graph it lives on.

    Attributes:
        m: Number of workers.
        entries: Dense ``(m, m)`` weight matrix (read-only).
        kind: Topology label, one of :data:`KINDS`.
        edge_set: Sorted undirected pairs ``(j, k)`` with ``j < k``.
    """

    m: int
    entries: np.ndarray = field(repr=False)
    kind: str
    edge_set: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=float)
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        self.validate()

    def validate(self) -> None:
        """Raise :class:`TopologyError` if any matrix invariant is broken."""
        P, m = self.entries, self.m
        if m < 1 or P.shape != (m, m):
            raise TopologyError(f"entries must be {m}x{m}, got {P.shape}")
        if self.kind not in KINDS:
            raise TopologyError(f"unknown topology kind {self.kind!r}")
        if not np.array_equal(P, P.T):
            raise TopologyError("gossip matrix is not symmetric")
        if np.any(P < 0) or np.any(P > 1):
            raise TopologyError("gossip weights must lie in [0, 1]")
        rows = P.sum(axis=1)
        if np.max(np.abs(rows - 1.0)) > _ROW_SUM_TOL:
            raise TopologyError("rows of the gossip matrix must sum to 1")
        mask = np.zeros((m, m), dtype=bool)
        for j, k in self.edge_set:
            mask[j, k] = mask[k, j] = True
        np.fill_diagonal(mask, True)
        if np.any(P[~mask] != 0.0):
            raise TopologyError("nonzero weight outside the edge set")
        off = mask.copy()
        np.fill_diagonal(off, False)
        if np.any(P[off] <= 0.0):
            raise TopologyError("every edge must carry a positive weight")

    def neighbors(self, j: int) -> list[int]:
        return [k for k in range(self.m) if k != j and self.entries[j, k] > 0]


@dataclass(frozen=True)
class SpectralReport:
    eigenvalues: tuple[float, ...]
    lam: float
    spectral_gap: float

    def as_dict(self) -> dict:
        return {
            "eigenvalues": list(self.eigenvalues),
            "lambda": self.lam,
            "spectral_gap": self.spectral_gap,
        }


def _metropolis_hastings(m: int, edges: Iterable[tuple[int, int]]) -> np.ndarray:
    deg = np.zeros(m, dtype=int)
    edges = list(edges)
    for j, k in edges:
        deg[j] += 1
        deg[k] += 1
    P = np.zeros((m, m))
    for j, k in edges:
        P[j, k] = P[k, j] = 1.0 / (1.0 + max(deg[j], deg[k]))
    if m > 1 and np.all(deg == deg[0]):
        # Regular graph: every closed-neighbourhood weight is exactly 1/(deg+1).
        np.fill_diagonal(P, 1.0 / (1.0 + deg[0]))
        return P
    # Self-weight absorbs the rest; subtract in index order for bit-stability.
    for j in range(m):
        P[j, j] = 1.0 - sum(P[j, k] for k in range(m) if k != j)
    return P


def _normalize_edges(m: int, pairs: Iterable[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    out = set()
    for j, k in pairs:
        j, k = int(j) % m, int(k) % m
        if j != k:
            out.add((min(j, k), max(j, k)))
    return tuple(sorted(out))


def _ring_edges(m: int):
    return [(j, j + 1) for j in range(m)]


def _grid_edges(m: int):
    side = math.isqrt(m)
    edges = []
    for r in range(side):
        for c in range(side):
            j = r * side + c
            edges.append((j, r * side + (c + 1) % side))
            edges.append((j, ((r + 1) % side) * side + c))
    return edges


def _exponential_edges(m: int):
    edges = []
    hop = 1
    while hop < m:
        for j in range(m):
            edges.append((j, j + hop))
            edges.append((j, j - hop))
        hop *= 2
    return edges


def _star_edges(m: int):
    return [(0, k) for k in range(1, m)]


def build_topology(kind: str, m: int) -> GossipMatrix:
    """Build the gossip matrix of a standard topology.

    Args:
        kind: ``ring``, ``grid`` (2D torus), ``exponential`` (hops of every
            power of two below ``m``), ``fully_connected`` or ``star``.
        m: Worker count.

    Raises:
        TopologyError: if ``m`` is below the topology's minimum, or ``grid``
            is requested with a non-square ``m``.
    """
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise TopologyError(f"worker count must be a positive integer, got {m!r}")
    m = int(m)
    if kind == "fully_connected":
        # Built directly so that every entry is exactly 1/m.
        edges = _normalize_edges(m, ((j, k) for j in range(m) for k in range(j + 1, m)))
        return GossipMatrix(m, np.full((m, m), 1.0 / m), kind, edges)
    if kind == "ring":
        if m < 3:
            raise TopologyError(f"ring requires m >= 3, got {m}")
        edges = _normalize_edges(m, _ring_edges(m))
    elif kind == "grid":
        if math.isqrt(m) ** 2 != m:
            raise TopologyError(f"grid requires a perfect-square worker count, got {m} (non-square)")
        edges = _normalize_edges(m, _grid_edges(m))
    elif kind == "exponential":
        edges = _normalize_edges(m, _exponential_edges(m))
    elif kind == "star":
        if m < 2:
            raise TopologyError(f"star requires m >= 2, got {m}")
        edges = _normalize_edges(m, _star_edges(m))
    elif kind == "custom":
        raise TopologyError("custom topologies are built with from_edges() or load_edge_file()")
    else:
        raise TopologyError(f"unknown topology kind {kind!r}")
    return GossipMatrix(m, _metropolis_hastings(m, edges), kind, edges)


def from_edges(m: int, edges: Iterable[tuple[int, int]]) -> GossipMatrix:
    """Custom topology from an explicit undirected edge list.

    Self-loops and duplicate edges (in either orientation) are rejected.
    An empty edge list gives the identity matrix.
    """
    if m < 1:
        raise TopologyError(f"worker count must be positive, got {m}")
    seen: set[tuple[int, int]] = set()
    for j, k in edges:
        if not (0 <= j < m and 0 <= k < m):
            raise TopologyError(f"edge ({j}, {k}) out of range for m={m}")
        if j == k:
            raise TopologyError(f"self-loop ({j}, {k}) is not an edge")
        key = (min(j, k), max(j, k))
        if key in seen:
            raise TopologyError(f"duplicate edge ({j}, {k})")
        seen.add(key)
    edge_set = tuple(sorted(seen))
    return GossipMatrix(m, _metropolis_hastings(m, edge_set), "custom", edge_set)


def load_edge_file(path: str | Path) -> GossipMatrix:
    """Read a custom topology: first line ``m``, then one ``j k`` edge per line."""
    lines = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise TopologyError(f"{path}: empty topology file")
    try:
        m = int(lines[0])
        edges = []
        for ln in lines[1:]:
            a, b = ln.split()
            edges.append((int(a), int(b)))
    except ValueError as exc:
        raise TopologyError(f"{path}: malformed topology file ({exc})") from None
    return from_edges(m, edges)


def jacobi_eigenvalues(a: np.ndarray, tol: float = 1e-10, max_sweeps: int | None = None) -> np.ndarray:
    """Eigenvalues of a dense symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm falls below ``tol``; the
    eigenvalue error is then bounded by that norm. Returns ascending values.

    Raises:
        ConvergenceError: after ``max_sweeps`` (default ``100 * n``) sweeps.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if max_sweeps is None:
        max_sweeps = 100 * max(n, 1)
    offdiag = 1.0 - np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(a * a * offdiag)))
        if off <= tol:
            return np.sort(np.diag(a))
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < 1e-150 * abs(diff):
                    t = apq / diff  # angle too small for theta**2 to stay finite
                else:
                    theta = diff / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
    raise ConvergenceError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")


def spectral_report(P: GossipMatrix, method: str = "auto") -> SpectralReport:
    """Eigenvalues, ``lambda = max(|l_2|, |l_m|)`` and the spectral gap ``1 - lambda``.

    ``method`` is ``jacobi``, ``lapack`` or ``auto`` (Jacobi up to m=64).
    """
    if method == "auto":
        method = "jacobi" if P.m <= _JACOBI_MAX_M else "lapack"
    if method == "jacobi":
        ev = jacobi_eigenvalues(P.entries)
    elif method == "lapack":
        ev = np.linalg.eigvalsh(P.entries)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    # Values this close to zero are solver residue (a rank-one matrix has
    # exactly m-1 zero eigenvalues); report them as 0.
    ev = np.where(np.abs(ev) < _ZERO_SNAP, 0.0, ev)
    ev = np.sort(ev)[::-1]
    # The leading eigenvalue of a doubly stochastic matrix is exactly 1.
    lam = 0.0 if P.m == 1 else float(max(abs(ev[1]), abs(ev[-1])))
    lam = min(lam, 1.0)
    return SpectralReport(tuple(float(x) for x in ev), lam, 1.0 - lam)


def gossip_mix(P: GossipMatrix, W: np.ndarray) -> np.ndarray:
    """One communication round: row ``j`` of the result is ``sum_k P[j,k] W[k]``."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != P.m:
        raise ValueError(f"parameter stack must have {P.m} rows, got shape {W.shape}")
    return P.entries @ W


def shuffle_workers(P: GossipMatrix, seed: int) -> GossipMatrix:
    """Relabel workers by a seeded uniform permutation: returns ``Pi P Pi^T``."""
    perm = np.random.default_rng(seed).permutation(P.m)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(P.m)
    entries = P.entries[np.ix_(perm, perm)]
    edges = _normalize_edges(P.m, ((inv[j], inv[k]) for j, k in P.edge_set)) if P.m > 1 else ()
    return GossipMatrix(P.m, entries, P.kind, edges)
