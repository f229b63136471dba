"""Built-in verification suites at desk scale.

Each check returns a dict with ``name``, ``hard`` (whether failure fails the
suite), ``passed`` and the raw measurements. Soft checks are directional
and only reported.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .diagnostics import (
    consensus_distance,
    descent_condition_check,
    gradient_diversity,
    implicit_regularizer_dsgd,
    perturbation_cubic_moment,
    smoothing_report,
    weight_diversity_matrix,
)
from .engine import TrainerConfig, WorkerEnsemble, dsgd_step
from .equivalence import (
    ComparisonError,
    adsam_direction,
    expected_dsgd_direction,
    minibatch_variance_identity_check,
    residual_scaling_fit,
    sharpness_preference_comparison,
)
from .objectives import (
    make_cubic_perturbed,
    make_huber_kink,
    make_mlp,
    make_pure_cubic,
    make_quadratic,
    third_order_contract,
)
from .topology import build_topology, shuffle_workers, spectral_report

__all__ = ["SUITES", "run_suite", "random_psd"]


def _check(name: str, passed: bool, hard: bool = True, **details) -> dict:
    return {"name": name, "hard": hard, "passed": bool(passed), **details}


def random_psd(rng: np.random.Generator, d: int, scale: float = 1.0) -> np.ndarray:
    A = rng.standard_normal((d, d))
    S = scale * (A @ A.T) / d
    return 0.5 * (S + S.T)


def check_quadratic_zero_diversity(seed: int = 0, d: int = 10, m: int = 8, ensembles: int = 20) -> dict:
    obj, ds = make_quadratic(d, seed, n=32)
    # Every worker evaluates the full batch, so all share one curvature matrix.
    batches = [ds.full_batch(j) for j in range(m)]
    worst = 0.0
    for e in range(ensembles):
        ens = WorkerEnsemble(np.random.default_rng([seed, 900, e]).standard_normal((m, d)))
        worst = max(worst, float(np.max(np.abs(gradient_diversity(obj, ens, batches, ds)))))
    return _check("quadratic_zero_diversity", worst <= 1e-10, max_abs=worst, tol=1e-10)


def check_pure_cubic_closed_form(seed: int = 0, K: int = 10_000) -> dict:
    obj, ds = make_pure_cubic()
    P = build_topology("fully_connected", 2)
    cfg = TrainerConfig(eta=0.1, sampling="full", seed=seed)
    rows, ok = [], True
    for i, delta in enumerate((0.05, 0.1, 0.2)):
        ens = WorkerEnsemble(np.array([[delta], [-delta]]))
        target = 3 * delta**2
        dsgd, dsgd_se = expected_dsgd_direction(obj, ens, P, ds, cfg, trials=2)
        ad, ad_se = adsam_direction(obj, [0.0], [[delta**2]], ds, K, np.random.default_rng([seed, 901, i]))
        se = math.hypot(float(dsgd_se[0]), float(ad_se[0]))
        good = abs(dsgd[0] - target) <= 3 * se and abs(ad[0] - target) <= 3 * se
        ok &= good
        rows.append({"delta": delta, "target": target, "dsgd": float(dsgd[0]), "adsam": float(ad[0]), "stderr": se})
    return _check("pure_cubic_closed_form", ok, points=rows)


RESIDUAL_SETTINGS = {"d": 5, "m": 8, "cubic_scale": 0.1, "diversity": 2.0, "K": 1_000_000}


def check_residual_slope(seed: int = 0) -> dict:
    s = RESIDUAL_SETTINGS
    obj, ds = make_cubic_perturbed(s["d"], seed, s["cubic_scale"])
    P = build_topology("ring", s["m"])
    w0 = 0.5 * np.random.default_rng([seed, 902]).standard_normal(s["d"])
    ens = WorkerEnsemble.initialize(w0, s["m"], s["diversity"], seed)
    cfg = TrainerConfig(eta=0.1, sampling="full", seed=seed)
    fit, _ = residual_scaling_fit(obj, ens, P, ds, cfg, [1, 0.5, 0.25, 0.125], 2, s["K"], seed)
    ok = 2.5 <= fit.slope <= 3.5 and fit.slope_stderr <= 0.3
    return _check("residual_slope", ok, **fit.as_dict())


def check_taylor_chain(seed: int = 0, d: int = 5, m: int = 8) -> dict:
    obj, ds = make_cubic_perturbed(d, seed, 1.0)
    w0 = 0.5 * np.random.default_rng([seed, 903]).standard_normal(d)
    base = WorkerEnsemble.initialize(w0, m, 1.0, seed)
    full = ds.full_batch()
    ratios = []
    for c in (1.0, 0.5, 0.25):
        ens = base.rescaled(c)
        wa = ens.averaged_model()
        div = gradient_diversity(obj, ens, [full] * m, ds)
        pred = 0.5 * third_order_contract(obj, wa, full, ds, weight_diversity_matrix(ens))
        cube = float(np.mean(np.linalg.norm(ens.deviations(), axis=1) ** 3))
        ratios.append(float(np.linalg.norm(div - pred)) / cube)
    spread = max(ratios) / min(ratios)
    return _check("taylor_chain", spread <= 2.0, fitted_constants=ratios, spread=spread)


def check_lemma_c2(seed: int = 0) -> dict:
    rows, worst = [], 0.0
    for N, B in ((4, 2), (6, 2), (6, 3), (8, 2), (8, 4)):
        for s in range(5):
            V = np.random.default_rng([seed, 904, N, B, s]).standard_normal((N, 3))
            lhs, rhs, rel = minibatch_variance_identity_check(V, B)
            worst = max(worst, rel)
            rows.append({"N": N, "B": B, "lhs": lhs, "rhs": rhs, "relative_error": rel})
    return _check("minibatch_variance_identity", worst <= 1e-10, worst=worst, cases=rows)


def check_batch_independence(seed: int = 0) -> dict:
    obj, ds = make_cubic_perturbed(5, seed, 1.0, n=32)
    rng = np.random.default_rng([seed, 905])
    w = 0.5 * rng.standard_normal(5)
    Xi = random_psd(rng, 5, 0.1)
    reps = [implicit_regularizer_dsgd(obj, w, Xi, ds, 0.1, B) for B in (8, 16, 32)]
    align = [r.hessian_alignment for r in reps]
    sq = [r.hessian_sq_term for r in reps]
    var = max(max(align) - min(align), max(sq) - min(sq))
    ok = reps[-1].kappa == 0.0 and var <= 1e-12
    return _check("batch_independent_sharpness", ok, kappa=[r.kappa for r in reps], alignment=align, sq_term=sq)


def check_smoothing_bound(seed: int = 0, K: int = 100_000) -> dict:
    obj, ds = make_huber_kink(0.01)
    Xi = np.array([[0.25]])
    rep = smoothing_report(obj, Xi, ([-1.0], [1.0]), 200, K, ds, seed)
    ok = math.sqrt(2) * rep.alpha / rep.sigma_min < rep.beta and rep.empirical_smoothed_lipschitz <= 1.05 * rep.theoretical_bound
    return _check("smoothing_bound", ok, **rep.__dict__)


def check_cubic_moment(seed: int = 0, K: int = 100_000) -> dict:
    rows, ok = [], True
    for i in range(10):
        rng = np.random.default_rng([seed, 906, i])
        d = int(rng.integers(1, 11))
        Xi = random_psd(rng, d)
        est, se = perturbation_cubic_moment(Xi, K, rng)
        ratio = est / float(np.trace(Xi)) ** 1.5
        ok &= 1.0 <= ratio <= 3.0
        rows.append({"d": d, "ratio": ratio, "stderr": se / float(np.trace(Xi)) ** 1.5})
    return _check("cubic_moment_order", ok, cases=rows)


DESCENT_SETTINGS = {"cubic_scale": 0.1, "eta": 0.01, "local_batch": 2, "diversity": 1.0}


def descent_run(seed: int = 0, steps: int = 200):
    s = DESCENT_SETTINGS
    obj, ds = make_cubic_perturbed(5, 0, s["cubic_scale"], n=32)
    ds = ds.sharded(8)
    P = build_topology("ring", 8)
    cfg = TrainerConfig(eta=s["eta"], local_batch=s["local_batch"], steps=steps, seed=seed)
    w0 = 0.5 * np.random.default_rng([seed, 907]).standard_normal(5)
    ens = WorkerEnsemble.initialize(w0, 8, s["diversity"], seed)
    hist = [ens]
    for t in range(steps):
        ens = dsgd_step(ens, P, obj, ds, cfg, t).post
        hist.append(ens)
    return descent_condition_check(hist, obj, P, cfg.eta, ds, cfg)


def check_descent(seed: int = 0) -> dict:
    rows = descent_run(seed)
    violations = [r["step"] for r in rows if r["violation"]]
    met = sum(r["condition_met"] for r in rows)
    return _check("consensus_descent", not violations, violations=violations, steps_condition_met=met)


def check_spectral_gaps() -> dict:
    g4 = spectral_report(build_topology("ring", 4)).spectral_gap
    g16 = spectral_report(build_topology("ring", 16)).spectral_gap
    gfc = spectral_report(build_topology("fully_connected", 8)).spectral_gap
    ring = build_topology("ring", 8)
    a = np.array(spectral_report(ring).eigenvalues)
    b = np.array(spectral_report(shuffle_workers(ring, 1)).eigenvalues)
    ok = (
        abs(g4 - 2 / 3) <= 1e-8
        and abs(g16 - (1 - (1 + 2 * math.cos(math.pi / 8)) / 3)) <= 1e-6
        and gfc == 1.0
        and float(np.max(np.abs(a - b))) <= 1e-10
    )
    return _check("spectral_gaps", ok, ring4=g4, ring16=g16, fully_connected=gfc)


def steady_consensus(kind: str, seed: int, m: int = 8, steps: int = 300) -> float:
    """Mean ``Tr Xi`` over the second half of a D-SGD run from consensus."""
    obj, ds = make_cubic_perturbed(5, seed, 0.1, n=32)
    ds = ds.sharded(m)
    P = build_topology(kind, m)
    cfg = TrainerConfig(eta=0.05, local_batch=1, steps=steps, seed=seed)
    ens = WorkerEnsemble.replicate(0.5 * np.random.default_rng([seed, 908]).standard_normal(5), m)
    vals = []
    for t in range(steps):
        ens = dsgd_step(ens, P, obj, ds, cfg, t).post
        if t >= steps // 2:
            vals.append(consensus_distance(ens))
    return float(np.mean(vals))


def check_topology_ordering(seed: int = 0, runs: int = 10) -> dict:
    wins = 0
    pairs = []
    for r in range(runs):
        ring = steady_consensus("ring", seed + r)
        fc = steady_consensus("fully_connected", seed + r)
        wins += ring > fc
        pairs.append({"ring": ring, "fully_connected": fc})
    return _check("ring_more_diverse_than_fully_connected", wins == runs, hard=False, wins=wins, runs=pairs)


FLATNESS_SETTINGS = {"hidden": 8, "m": 16, "n": 192, "local_batch": 12, "eta": 1.0, "threshold": 0.05, "max_steps": 3000}


def check_flatness(seed: int = 0, seeds: int = 10) -> dict:
    s = FLATNESS_SETTINGS
    wins, rows = 0, []
    for k in range(seeds):
        obj, ds = make_mlp(s["hidden"], seed + k, "two_moons", s["n"])
        ds = ds.sharded(s["m"])
        P = build_topology("ring", s["m"])
        cfg = TrainerConfig(eta=s["eta"], local_batch=s["local_batch"], steps=s["max_steps"], seed=seed + k)
        w0 = 0.5 * np.random.default_rng([seed + k, 909]).standard_normal(obj.dim)
        try:
            rep = sharpness_preference_comparison(obj, ds, P, cfg, w0, loss_threshold=s["threshold"])
        except ComparisonError as exc:
            rows.append({"seed": seed + k, "error": str(exc)})
            continue
        wins += rep["dsgd_flatter"]
        rows.append(
            {
                "seed": seed + k,
                "dsgd_lambda_max": rep["dsgd"]["lambda_max"],
                "csgd_lambda_max": rep["csgd"]["lambda_max"],
                "dsgd_steps": rep["dsgd"]["steps"],
                "csgd_steps": rep["csgd"]["steps"],
            }
        )
    return _check("dsgd_flatter_minima", wins >= 7, hard=False, wins=wins, seeds=rows)


SUITES: dict[str, list[Callable[[int], dict]]] = {
    "theorem1": [check_pure_cubic_closed_form, check_residual_slope, check_taylor_chain],
    "lemma_c2": [check_lemma_c2, check_batch_independence],
    "smoothing": [check_smoothing_bound, check_cubic_moment],
    "props": [
        check_quadratic_zero_diversity,
        check_descent,
        lambda seed: check_spectral_gaps(),
        check_topology_ordering,
    ],
}


def run_suite(name: str, seed: int = 0) -> dict:
    """Run a suite (or ``all``) and summarize; ``passed`` ignores soft checks."""
    if name == "all":
        names = list(SUITES)
        checks = [c for n in names for c in SUITES[n]] + [check_flatness]
    elif name in SUITES:
        checks = SUITES[name]
    else:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join([*SUITES, 'all'])}")
    results = [check(seed) for check in checks]
    passed = all(r["passed"] for r in results if r["hard"])
    return {"suite": name, "seed": seed, "passed": passed, "checks": results}
