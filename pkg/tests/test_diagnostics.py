import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consensus_lab.diagnostics import (
    DiagnosticsRecord,
    avg_direction_sharpness,
    consensus_distance,
    descent_condition_check,
    gradient_diversity,
    hessian_consensus_alignment,
    hessian_lambda_max,
    implicit_regularizer_dsgd,
    implicit_regularizer_sgd,
    kappa,
    landscape_slice,
    measure,
    perturbation_cubic_moment,
    smoothing_report,
    weight_diversity_matrix,
)
from consensus_lab.engine import TrainerConfig, WorkerEnsemble, dsgd_step
from consensus_lab.objectives import (
    Dataset,
    QuadraticObjective,
    batch_hessian,
    make_cubic_perturbed,
    make_huber_kink,
    make_mlp,
    make_pure_cubic,
    make_quadratic,
)
from consensus_lab.topology import build_topology, spectral_report


def unit_quadratic(d):
    # L(w) = 1/2 ||w||^2 as a single sample.
    return QuadraticObjective(d), Dataset({"H": np.eye(d)[None], "b": np.zeros((1, d))})


def test_xi_two_worker_example():
    ens = WorkerEnsemble([[1.0, 0.0], [-1.0, 0.0]])
    assert np.array_equal(weight_diversity_matrix(ens), [[1.0, 0.0], [0.0, 0.0]])
    assert consensus_distance(ens) == 1.0


def test_xi_is_zero_at_consensus():
    ens = WorkerEnsemble.replicate([0.3, -2.0, 5.0], 4)
    assert not np.any(weight_diversity_matrix(ens))
    assert consensus_distance(ens) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 6), st.integers(0, 10_000))
def test_xi_is_symmetric_psd_with_trace_equal_to_consensus_distance(m, d, seed):
    W = np.random.default_rng(seed).standard_normal((m, d)) * 3
    ens = WorkerEnsemble(W)
    Xi = weight_diversity_matrix(ens)
    assert np.array_equal(Xi, Xi.T)
    assert np.min(np.linalg.eigvalsh(Xi)) >= -1e-12
    assert abs(np.trace(Xi) - consensus_distance(ens)) <= 1e-12 * max(1.0, np.trace(Xi))


@pytest.mark.parametrize("delta", [0.05, 0.1, 0.2, 1.0])
def test_pure_cubic_gradient_diversity(delta):
    obj, ds = make_pure_cubic()
    ens = WorkerEnsemble([[delta], [-delta]])
    div = gradient_diversity(obj, ens, [ds.full_batch(0), ds.full_batch(1)], ds)
    assert div[0] == pytest.approx(3 * delta**2, rel=1e-14)


def test_gradient_diversity_zero_on_quadratic_with_shared_batches():
    obj, ds = make_quadratic(6, 0)
    ens = WorkerEnsemble(np.random.default_rng(3).standard_normal((5, 6)))
    div = gradient_diversity(obj, ens, [ds.full_batch(j) for j in range(5)], ds)
    assert np.max(np.abs(div)) <= 1e-10


def test_gradient_diversity_zero_at_consensus():
    obj, ds = make_cubic_perturbed(4, 0, 1.0)
    ds = ds.sharded(4)
    ens = WorkerEnsemble.replicate([0.1, 0.2, 0.3, 0.4], 4)
    batches = [ds.full_batch(j) for j in range(4)]
    assert np.array_equal(gradient_diversity(obj, ens, batches, ds), np.zeros(4))


def test_sharpness_zero_for_zero_xi():
    obj, ds = unit_quadratic(3)
    assert avg_direction_sharpness(obj, np.ones(3), np.zeros((3, 3)), 100, ds) == (0.0, 0.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sharpness_on_unit_quadratic_is_half_trace(seed):
    obj, ds = unit_quadratic(4)
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((4, 4))
    Xi = 0.1 * A @ A.T
    w = rng.standard_normal(4)
    est, se = avg_direction_sharpness(obj, w, Xi, 20_000, ds, rng=seed)
    assert abs(est - 0.5 * np.trace(Xi)) <= 3 * se
    double, _ = avg_direction_sharpness(obj, w, 2 * Xi, 20_000, ds, rng=seed)
    # Shared draws scale by sqrt(2), so the quadratic estimate doubles exactly.
    assert double == pytest.approx(2 * est, rel=1e-12)


def test_alignment_hand_trace():
    obj = QuadraticObjective(2)
    ds = Dataset({"H": np.diag([2.0, 4.0])[None], "b": np.zeros((1, 2))})
    assert hessian_consensus_alignment(obj, np.zeros(2), np.eye(2), None, ds) == 6.0
    assert hessian_consensus_alignment(obj, np.zeros(2), np.zeros((2, 2)), None, ds) == 0.0


def test_kappa_values():
    assert kappa(0.1, 1, 2) == pytest.approx(0.1, abs=1e-17)
    assert kappa(0.3, 16, 16) == 0.0
    assert kappa(0.3, 1, 1) == 0.0
    assert [kappa(0.1, B, 64) > kappa(0.1, 2 * B, 64) for B in (4, 16)] == [True, True]


def test_sgd_regularizer_full_batch_reduces_to_gradient_penalty():
    obj, ds = make_cubic_perturbed(3, 1, 1.0, n=16)
    w = np.array([0.3, -0.2, 0.1])
    rep = implicit_regularizer_sgd(obj, w, ds, 0.2, 16)
    assert rep.kappa == 0.0
    assert rep.total == pytest.approx(rep.base_loss + rep.grad_norm_term, abs=0)


def test_identical_samples_have_zero_gradient_variance():
    obj = QuadraticObjective(2)
    H = np.tile(np.diag([1.0, 3.0]), (4, 1, 1))
    ds = Dataset({"H": H, "b": np.ones((4, 2))})
    assert implicit_regularizer_sgd(obj, np.ones(2), ds, 0.1, 1).grad_variance == 0.0


def test_dsgd_regularizer_with_zero_xi_equals_sgd():
    obj, ds = make_cubic_perturbed(3, 2, 1.0, n=16)
    w = np.array([0.1, 0.5, -0.3])
    a = implicit_regularizer_dsgd(obj, w, np.zeros((3, 3)), ds, 0.1, 4)
    b = implicit_regularizer_sgd(obj, w, ds, 0.1, 4)
    assert a == b


def test_dsgd_regularizer_terms_by_hand():
    obj, ds = make_quadratic(3, 5, n=8)
    w = np.array([0.2, -0.4, 1.0])
    Xi = np.diag([0.5, 0.1, 0.2])
    rep = implicit_regularizer_dsgd(obj, w, Xi, ds, 0.2, 2)
    H = np.asarray(ds.arrays["H"])
    Hbar = H.mean(axis=0)
    assert rep.hessian_alignment == pytest.approx(np.trace(Hbar @ Xi), rel=1e-12)
    assert rep.hessian_sq_term == pytest.approx(0.05 * np.trace(Hbar @ Hbar @ Xi), rel=1e-12)
    hv = np.mean([np.trace((h - Hbar) @ (h - Hbar) @ Xi) for h in H])
    assert rep.hessian_variance == pytest.approx(hv, rel=1e-12)
    assert rep.kappa == pytest.approx(0.1 * 6 / 7, rel=1e-15)


def test_regularizer_sharpness_terms_do_not_depend_on_batch():
    obj, ds = make_cubic_perturbed(4, 0, 1.0, n=16)
    w = np.array([0.1, 0.2, -0.3, 0.4])
    Xi = 0.05 * np.eye(4)
    reps = [implicit_regularizer_dsgd(obj, w, Xi, ds, 0.1, B) for B in (4, 8, 16)]
    assert len({r.hessian_alignment for r in reps}) == 1
    assert len({r.hessian_sq_term for r in reps}) == 1
    assert reps[-1].kappa == 0.0
    assert reps[0].kappa > reps[1].kappa > 0


def test_regularizer_rejects_bad_batch():
    obj, ds = make_quadratic(2, 0, n=4)
    with pytest.raises(ValueError):
        implicit_regularizer_dsgd(obj, np.zeros(2), None, ds, 0.1, 5)


def test_cubic_moment_one_dimension():
    sigma = 0.7
    est, se = perturbation_cubic_moment([[sigma**2]], 100_000, 0)
    exact = 2 * math.sqrt(2 / math.pi) * sigma**3
    assert abs(est - exact) <= 3 * se


def test_smoothing_on_quadratic_measures_curvature():
    obj = QuadraticObjective(1)
    ds = Dataset({"H": [[[2.0]]], "b": [[0.0]]})
    rep = smoothing_report(obj, [[0.25]], ([-1.0], [1.0]), 20, 1000, ds, seed=0)
    assert rep.empirical_smoothed_lipschitz == pytest.approx(2.0, rel=1e-9)
    assert rep.beta == pytest.approx(2.0, rel=1e-9)
    assert rep.sigma_min == 0.25


def test_smoothing_bound_takes_beta_branch_when_smaller():
    obj, ds = make_huber_kink(0.5)
    rep = smoothing_report(obj, [[0.01]], ([-1.0], [1.0]), 50, 2000, ds, seed=1)
    # sqrt(2) * 1 / 0.01 is far above the kink's gradient Lipschitz constant 2.
    assert rep.theoretical_bound == rep.beta
    assert rep.beta <= 2.0 + 1e-12
    assert rep.alpha <= 1.0 + 1e-12


def test_smoothing_bound_on_narrow_kink():
    obj, ds = make_huber_kink(0.01)
    rep = smoothing_report(obj, [[0.25]], ([-1.0], [1.0]), 100, 20_000, ds, seed=0)
    assert math.sqrt(2) * rep.alpha / rep.sigma_min < rep.beta
    assert rep.empirical_smoothed_lipschitz <= 1.05 * rep.theoretical_bound


def gossip_history(P, W, steps, cfg, obj, ds):
    ens = WorkerEnsemble(W)
    hist = [ens]
    for t in range(steps):
        ens = dsgd_step(ens, P, obj, ds, cfg, t).post
        hist.append(ens)
    return hist


def test_pure_gossip_contracts_consensus_distance():
    obj, ds = make_cubic_perturbed(3, 0, 1.0, n=16)
    ds = ds.sharded(8)
    P = build_topology("ring", 8)
    lam = spectral_report(P).lam
    cfg = TrainerConfig(eta=0.0, local_batch=2)
    hist = gossip_history(P, np.random.default_rng(0).standard_normal((8, 3)), 20, cfg, obj, ds)
    rows = descent_condition_check(hist, obj, P, 0.0, ds, cfg)
    for r in rows:
        assert r["condition_met"] and r["descended"] and not r["violation"]
        assert r["next_consensus_distance"] <= lam**2 * r["consensus_distance"] * (1 + 1e-12)


def test_fully_connected_mixing_reaches_consensus():
    obj, ds = make_cubic_perturbed(3, 0, 1.0, n=16)
    ds = ds.sharded(4)
    P = build_topology("fully_connected", 4)
    cfg = TrainerConfig(eta=0.0, local_batch=2)
    hist = gossip_history(P, np.random.default_rng(1).standard_normal((4, 3)), 1, cfg, obj, ds)
    assert consensus_distance(hist[1]) <= 1e-28
    row = descent_condition_check(hist, obj, P, 0.0, ds, cfg)[0]
    assert row["eta_star"] == math.inf


def test_descent_threshold_is_zero_at_consensus():
    obj, ds = make_cubic_perturbed(3, 0, 1.0, n=16)
    ds = ds.sharded(4)
    P = build_topology("ring", 4)
    cfg = TrainerConfig(eta=0.1, local_batch=2)
    hist = gossip_history(P, np.tile([0.1, 0.2, 0.3], (4, 1)), 1, cfg, obj, ds)
    row = descent_condition_check(hist, obj, P, 0.1, ds, cfg)[0]
    assert row["eta_star"] == 0.0 and not row["condition_met"]


def test_landscape_degenerate_extent():
    obj, ds = make_quadratic(3, 0)
    w = np.array([0.5, -0.5, 1.0])
    sl = landscape_slice(obj, w, ds, "1d", extent=0.0)
    assert sl.coords.tolist() == [0.0]
    assert sl.losses[0] == obj.mean_losses_at(w[None, :], ds.all())[0]


def test_landscape_quadratic_curvature_along_direction():
    obj, ds = make_quadratic(4, 1)
    w = np.zeros(4)
    sl = landscape_slice(obj, w, ds, "1d", extent=1.0, resolution=5)
    u = sl.directions[0]
    assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-12)
    H = batch_hessian(obj, w, ds.full_batch(), ds)
    b = np.mean(np.asarray(ds.arrays["b"]), axis=0)
    expected = 0.5 * sl.coords**2 * (u @ H @ u) + sl.coords * (b @ u)
    assert np.allclose(sl.losses, expected, rtol=0, atol=1e-12)


def test_landscape_2d_csv_layout():
    obj, ds = make_quadratic(3, 0)
    sl = landscape_slice(obj, np.ones(3), ds, "2d", extent=0.5, resolution=3)
    lines = sl.to_csv().splitlines()
    assert lines[0] == "x,y,loss"
    assert len(lines) == 1 + 9
    assert abs(float(sl.directions[0] @ sl.directions[1])) <= 1e-12
    assert landscape_slice(obj, np.ones(3), ds, "1d", 0.5, 3).to_csv().startswith("x,loss\n")


def test_landscape_validation():
    obj, ds = make_quadratic(2, 0)
    with pytest.raises(ValueError):
        landscape_slice(obj, np.zeros(2), ds, "3d")
    with pytest.raises(ValueError):
        landscape_slice(obj, np.zeros(2), ds, "1d", resolution=2)


def test_landscape_filter_normalization_for_networks():
    obj, ds = make_mlp(4, 0, "two_moons", n=40)
    w = np.random.default_rng(0).standard_normal(obj.dim)
    sl = landscape_slice(obj, w, ds, "1d", extent=1.0, resolution=3)
    u = sl.directions[0]
    assert np.all(u[obj.bias_indices()] == 0.0)
    for g in obj.filter_groups():
        assert np.linalg.norm(u[g]) == pytest.approx(np.linalg.norm(w[g]), rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_lambda_max_matches_dense_eigensolver(seed):
    obj, ds = make_cubic_perturbed(6, seed, 1.0)
    w = np.random.default_rng(seed).standard_normal(6)
    H = batch_hessian(obj, w, ds.full_batch(), ds)
    assert hessian_lambda_max(obj, w, ds) == pytest.approx(np.linalg.eigvalsh(H)[-1], abs=1e-6)


def test_record_json_omits_wall_clock():
    rec = DiagnosticsRecord(3, 0.5, 1.0, 0.25, wall_clock=12.0)
    payload = json.loads(rec.to_json())
    assert "wall_clock" not in payload
    assert payload["step"] == 3
    assert rec == DiagnosticsRecord(3, 0.5, 1.0, 0.25, wall_clock=99.0)


def test_measure_populates_fields():
    obj, ds = make_cubic_perturbed(3, 0, 1.0, n=16)
    ens = WorkerEnsemble.initialize(np.zeros(3), 4, 0.1, seed=0)
    rec = measure(obj, ens, ds, eta=0.1, total_batch=8, sharpness_samples=100, store_xi=True)
    assert rec.consensus_distance == pytest.approx(consensus_distance(ens), abs=0)
    assert rec.avg_direction_sharpness is not None
    assert rec.regularizer["kappa"] == pytest.approx(kappa(0.1, 8, 16))
    assert np.allclose(rec.xi, weight_diversity_matrix(ens))
