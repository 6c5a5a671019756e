import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import sph_harm_y

from diracspec.geometry import ConformalFactor, build_sphere_basis, build_torus_basis, evaluate_factor
from diracspec.spectrum import solve
from diracspec.variation import (ClusterWeights, MinimizeParams, ScheduleError, Status, active_densities,
                                 cluster_derivatives, concentration_scan, concentration_threshold,
                                 curvature_bound_check, directional_derivative, euler_lagrange_residual,
                                 finite_difference_derivative, fit_weights, fixed_point_step, grid_laplacian,
                                 minimize, normalized_objective, random_smooth_factor, zero_set_count)

from conftest import UNIT_SQUARE, constant

SQRT_PI = np.sqrt(np.pi)


@pytest.fixture(scope="module")
def sphere_k2_trace(sphere6):
    return minimize(sphere6, random_smooth_factor(sphere6, np.random.default_rng(11)), 2, seed=11)


@pytest.fixture(scope="module")
def torus_k2_trace():
    b = build_torus_basis(UNIT_SQUARE, (0.5, 0.0), 12.0)
    return b, minimize(b, random_smooth_factor(b, np.random.default_rng(3), amplitude=0.5), 2, seed=3)


# ---------------------------------------------------------------- derivative


def test_derivative_along_beta_is_minus_lambda(sphere6):
    beta = random_smooth_factor(sphere6, np.random.default_rng(0))
    for k in (1, 2, 5):
        lam = solve(sphere6, beta, k).lam(k)
        assert directional_derivative(sphere6, beta, beta, k) == pytest.approx(-lam, rel=1e-10)


@settings(max_examples=10)
@given(st.integers(0, 2**31), st.sampled_from(["sphere", "torus"]))
def test_derivative_matches_finite_differences(seed, surface):
    b = build_sphere_basis(5) if surface == "sphere" else build_torus_basis(UNIT_SQUARE, (0.5, 0.0), 10.0)
    rng = np.random.default_rng(seed)
    beta = random_smooth_factor(b, rng, amplitude=0.4)
    direction = random_smooth_factor(b, rng, amplitude=0.8)
    spec = solve(b, beta, 6)
    pairs = [k for k in range(1, 7) if spec.cluster(k)[1] - spec.cluster(k)[0] == 1]
    k = pairs[seed % len(pairs)]
    # a Kramers pair cannot split, so the cluster form is scalar and the value is the simple formula
    exact = directional_derivative(b, beta, direction, k, spectrum=spec)
    phi = b.synthesize(spec.cluster_vectors(k)[:, :1])[:, 0]
    dens = np.sum(np.abs(phi) ** 2, axis=-1)
    simple = -spec.lam(k) * b.integrate(direction.values * dens) / b.integrate(beta.values * dens)
    assert exact == pytest.approx(simple, rel=1e-9)
    fd = finite_difference_derivative(b, beta, direction, k)
    assert exact == pytest.approx(fd, rel=1e-3)


def test_derivative_vanishes_where_cluster_spinors_vanish(torus_zero):
    """b supported on one node sees only a rank-2 slice of the 4-dimensional first cluster."""
    beta = constant(torus_zero)
    spec = solve(torus_zero, beta, 4)
    assert spec.cluster(4) == (1, 4)
    b = np.zeros(torus_zero.n_nodes)
    b[5] = 1.0
    values = cluster_derivatives(torus_zero, beta, b, 4, spec)
    assert values[0] < -1e-3
    assert directional_derivative(torus_zero, beta, b, 4, spectrum=spec) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=10)
@given(st.integers(0, 2**31))
def test_cluster_derivatives_nondecreasing(seed):
    b = build_sphere_basis(4)
    rng = np.random.default_rng(seed)
    beta = constant(b)
    direction = random_smooth_factor(b, rng, amplitude=1.0)
    k = 6  # cluster (3, 6)
    spec = solve(b, beta, k)
    values = cluster_derivatives(b, beta, direction, k, spec)
    assert np.all(np.diff(values) >= -1e-12)
    i_k, I_k = spec.cluster(k)
    for j in range(i_k, I_k + 1):
        assert directional_derivative(b, beta, direction, j, spectrum=spec) == pytest.approx(values[j - i_k], abs=1e-12)


# ---------------------------------------------------------------- Euler-Lagrange and fixed point


def test_killing_spinors_satisfy_euler_lagrange(sphere6):
    beta = constant(sphere6, (4 * np.pi) ** -0.5)
    w = ClusterWeights(np.array([0.5, 0.5]), 1, 2)
    assert euler_lagrange_residual(sphere6, beta, 2, 2.0, weights=w) <= 1e-8


def test_generic_factor_is_not_critical(sphere6):
    beta = random_smooth_factor(sphere6, np.random.default_rng(1))
    assert euler_lagrange_residual(sphere6, beta, 2, 2.0) > 1e-3


def test_undamped_step_lands_on_weighted_density(sphere6):
    beta = random_smooth_factor(sphere6, np.random.default_rng(2), p=2.5).normalized()
    new, w = fixed_point_step(sphere6, beta, 4, 2.5, theta=1.0, floor_rel=1e-12)
    spec = solve(sphere6, beta, 4)
    dens, _ = active_densities(sphere6, spec, 4)
    target = dens @ w.d
    ratio = new.values ** 1.5 / target
    assert np.ptp(ratio) <= 1e-10 * ratio.mean()


def test_undamped_step_fixes_critical_factor(sphere6):
    beta = constant(sphere6, (4 * np.pi) ** -0.5)
    new, _ = fixed_point_step(sphere6, beta, 2, 2.0, theta=1.0)
    assert np.abs(new.values - beta.values).max() <= 1e-10


@settings(max_examples=15)
@given(st.integers(0, 2**31), st.floats(2.0, 3.0), st.floats(0.05, 1.0), st.integers(1, 6))
def test_step_is_lp_normalized_and_weights_convex(seed, p, theta, k):
    b = build_sphere_basis(4)
    beta = random_smooth_factor(b, np.random.default_rng(seed), amplitude=0.6, p=p)
    new, w = fixed_point_step(b, beta, k, p, theta=theta)
    assert new.norm(p) == pytest.approx(1.0, abs=1e-12)
    assert np.all(w.d >= 0) and abs(w.d.sum() - 1.0) <= 1e-14
    assert new.values.min() >= new.floor > 0


def test_damped_steps_mostly_descend(sphere6):
    beta = evaluate_factor(sphere6, lambda th, ph: 1 + 0.3 * np.cos(th) + 0.1 * np.sin(th) * np.sin(ph), p=2.25)
    beta = beta.normalized()
    values = [normalized_objective(sphere6, beta, 2)]
    for _ in range(30):
        beta, _ = fixed_point_step(sphere6, beta, 2, 2.25, theta=0.5)
        values.append(normalized_objective(sphere6, beta, 2))
    descents = np.diff(values) <= 1e-9
    assert descents.mean() >= 0.9


@pytest.mark.parametrize("surface,k,p", [("sphere", 1, 2.0), ("sphere", 2, 2.5), ("sphere", 6, 2.25),
                                         ("torus", 2, 2.0), ("torus", 6, 3.0)])
def test_stationarity_at_critical_factors(sphere6, torus_half, surface, k, p):
    b = sphere6 if surface == "sphere" else torus_half
    beta = constant(b, 3.0, p=p)
    assert euler_lagrange_residual(b, beta, k, p) <= 1e-8
    before = normalized_objective(b, beta, k, p)
    new, _ = fixed_point_step(b, beta, k, p, theta=1.0)
    assert abs(normalized_objective(b, new, k, p) - before) <= 1e-7


@given(st.integers(0, 2**31), st.sampled_from([0.1, 1.0, 7.0]), st.integers(1, 6))
def test_objective_scale_invariance(seed, c, k):
    b = build_sphere_basis(4)
    beta = random_smooth_factor(b, np.random.default_rng(seed), amplitude=0.5, p=2.25)
    assert normalized_objective(b, beta.scaled(c), k) == pytest.approx(normalized_objective(b, beta, k), rel=1e-10)


def test_fit_weights_falls_back_to_uniform_for_kramers_pairs(sphere6):
    spec = solve(sphere6, random_smooth_factor(sphere6, np.random.default_rng(4)), 2)
    dens, r = active_densities(sphere6, spec, 2)
    w = fit_weights(sphere6, np.ones(sphere6.n_nodes), dens, r, 2)
    assert w.rule == "uniform" and np.allclose(w.d, 0.5)


def test_cluster_weights_validation():
    with pytest.raises(ValueError):
        ClusterWeights(np.array([0.5, -0.1]), 1, 2)
    with pytest.raises(ValueError):
        ClusterWeights(np.array([1.0]), 1, 2)


# ---------------------------------------------------------------- minimize


def test_sphere_k2_recovers_round_metric(sphere_k2_trace):
    tr = sphere_k2_trace
    assert tr.status is Status.CONVERGED
    assert tr.estimate["Lambda"] == pytest.approx(2 * SQRT_PI, rel=0.01)
    v = tr.final_beta.values
    assert np.ptp(v) / v.mean() <= 0.02
    assert all(r.lambda_bar > 0 and np.isfinite(r.lambda_bar) for r in tr.iterations)


def test_continuation_values_move_proportionally_to_p(sphere_k2_trace):
    stages = sphere_k2_trace.stages
    for a, b in zip(stages, stages[1:]):
        assert abs(b.lambda_bar - a.lambda_bar) <= 5.0 * abs(b.p - a.p)


def test_torus_k2_trace_is_monotone(torus_k2_trace):
    _, tr = torus_k2_trace
    values = np.array([r.lambda_bar for r in tr.iterations])
    stages = np.array([r.stage for r in tr.iterations])
    for s in np.unique(stages):
        assert np.all(np.diff(values[stages == s][2:]) <= 1e-12)
    assert tr.final.el_residual <= 1e-4


def test_converged_minimizer_satisfies_curvature_and_nodal_bounds(sphere6, sphere_k2_trace):
    beta = sphere_k2_trace.final_beta
    lam = solve(sphere6, beta, 2).lam(2)
    assert curvature_bound_check(sphere6, beta, lam, tol=0.05).passed
    assert zero_set_count(sphere6, beta) == 0 <= 0 - 1 + 2 / 2


def test_schedule_validation(sphere6):
    beta = constant(sphere6)
    for bad in ([2.5, 2.5], [2.25, 2.5], [2.5, 1.9], []):
        with pytest.raises(ScheduleError):
            minimize(sphere6, beta, 2, bad)


def test_divergence_guard(sphere6):
    beta = random_smooth_factor(sphere6, np.random.default_rng(0))
    tr = minimize(sphere6, beta, 2, (2.5,), MinimizeParams(divergence_factor=0.5))
    assert tr.status is Status.DIVERGED and len(tr.iterations) == 1


def test_resume_reproduces_uninterrupted_trace(tmp_path, sphere6):
    beta0 = random_smooth_factor(sphere6, np.random.default_rng(5))
    params = MinimizeParams(checkpoint_every=4)
    sched = (2.5, 2.25)
    full = minimize(sphere6, beta0, 2, sched, params, checkpoint_path=tmp_path / "a.npz")
    ckpt = tmp_path / "b.npz"
    partial = minimize(sphere6, beta0, 2, sched, params, checkpoint_path=ckpt, stop_after=9)
    assert len(partial.iterations) == 9
    resumed = minimize(sphere6, beta0, 2, sched, params, checkpoint_path=ckpt, resume=True)
    assert resumed.records() == full.records()
    assert np.array_equal(resumed.final_beta.values, full.final_beta.values)
    assert resumed.estimate == full.estimate


# ---------------------------------------------------------------- diagnostics


def test_concentration_threshold_and_uniform_factor(sphere6):
    assert concentration_threshold(2 * SQRT_PI) == pytest.approx(0.25, abs=1e-15)
    scan = concentration_scan(sphere6, constant(sphere6, (4 * np.pi) ** -0.5), 2 * SQRT_PI, radii=(0.2,))
    assert scan.flagged.size == 0


def test_concentrated_bump_is_flagged():
    b = build_sphere_basis(30)
    center = b.n_nodes // 2 + 3
    d = b.distances_from(np.array([center]))[0]
    beta = 0.02 + 40.0 * np.exp(-(d / 0.04) ** 2)
    mass_in_ball = np.dot(b.weights, beta ** 2 * (d < 0.1)) / np.dot(b.weights, beta ** 2)
    assert mass_in_ball >= 0.6
    scan = concentration_scan(b, beta, 2 * np.sqrt(2 * np.pi), radii=(0.1,))
    assert center in scan.flagged
    assert scan.max_local_mass >= 0.6


def test_zero_set_count_examples(sphere6):
    assert zero_set_count(sphere6, constant(sphere6)) == 0
    b = build_sphere_basis(12)
    centers = np.array([b.n_nodes // 2, 5 * b.grid_shape[1] + 3, b.n_nodes - 4 * b.grid_shape[1] - 11])
    dist = b.distances_from(centers)
    beta = np.prod(np.minimum(1.0, dist / 0.4) ** 2, axis=0)
    assert zero_set_count(b, beta) == 3


def test_zero_set_count_merges_across_pole():
    b = build_sphere_basis(8)
    theta = b.nodes[:, 0]
    beta = np.minimum(1.0, theta / 0.8) ** 2  # small on the first rings around the north pole
    assert np.count_nonzero(beta <= 0.1) >= b.grid_shape[1]  # a full ring of nodes
    assert zero_set_count(b, beta, zero_tol=0.1) == 1


def test_grid_laplacian_oracles():
    b = build_sphere_basis(10)
    th, ph = b.nodes[:, 0], b.nodes[:, 1]
    for l, m in ((1, 0), (3, 2), (6, -4)):
        f = np.real(sph_harm_y(l, m, th, ph))
        assert np.abs(grid_laplacian(b, f) + l * (l + 1) * f).max() < 1e-10
    t = build_torus_basis(((1.0, 0.0), (0.4, 1.3)), (0.0, 0.0), 20.0)
    x, y = t.nodes[:, 0], t.nodes[:, 1]
    xi = np.linalg.inv(np.asarray(((1.0, 0.0), (0.4, 1.3)))) @ np.array([1.0, 2.0])
    f = np.cos(2 * np.pi * (xi[0] * x + xi[1] * y))
    assert np.abs(grid_laplacian(t, f) + 4 * np.pi ** 2 * (xi @ xi) * f).max() < 1e-8


def test_curvature_examples(sphere6, torus_half):
    beta = constant(sphere6, (4 * np.pi) ** -0.5)
    check = curvature_bound_check(sphere6, beta, 2 * SQRT_PI, tol=0.0)
    assert np.allclose(check.curvature, 4 * np.pi, rtol=1e-12) and check.passed
    flat = curvature_bound_check(torus_half, constant(torus_half, 2.0), np.pi, tol=0.0)
    assert np.abs(flat.curvature).max() < 1e-12 and flat.passed
