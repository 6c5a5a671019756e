import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diracspec.geometry import ConformalFactor, build_sphere_basis, build_torus_basis, evaluate_factor, mobius_factor
from diracspec.spectrum import (FloorRequiredError, GridMismatchError, IndefiniteWeightError, KernelInputError,
                                TruncationError, assemble_forms, detect_clusters, format_table,
                                generalized_eigensolve, rayleigh_value, solve, write_spectrum)
from diracspec.variation import random_smooth_factor

from conftest import UNIT_SQUARE, constant

SQRT_PI = np.sqrt(np.pi)


def bump(basis):
    return evaluate_factor(basis, lambda th, ph: 1 + 0.3 * np.cos(th) + 0.2 * np.sin(th) * np.cos(ph))


def test_constant_forms(sphere6):
    c = 2.5
    forms = assemble_forms(sphere6, constant(sphere6, c))
    M = sphere6.n_modes
    assert np.abs(forms.weight_form - c * np.eye(M)).max() < 1e-12
    assert np.abs(forms.inverse_weight_form - np.diag(sphere6.mu ** 2) / c).max() < 1e-12
    assert np.array_equal(forms.dirac_form, np.diag(sphere6.mu))


def test_bump_forms_hermitian_positive_definite(sphere6):
    forms = assemble_forms(sphere6, bump(sphere6))
    for A in (forms.dirac_form, forms.weight_form, forms.inverse_weight_form):
        assert np.abs(A - A.conj().T).max() <= 1e-12
    np.linalg.cholesky(forms.weight_form)  # raises unless positive definite


def test_assembly_errors(sphere6):
    other = build_sphere_basis(5)
    with pytest.raises(GridMismatchError):
        assemble_forms(sphere6, constant(other))
    v = np.ones(sphere6.n_nodes)
    v[0] = 0.0
    forms = assemble_forms(sphere6, ConformalFactor(v, sphere6.weights))
    with pytest.raises(FloorRequiredError):
        forms.inverse_weight_form


def test_indefinite_weight_form_rejected(sphere6):
    forms = assemble_forms(sphere6, constant(sphere6))
    idx, q = forms.blocks[0]
    forms.blocks[0] = (idx, q - 2 * np.eye(q.shape[0]))
    with pytest.raises(IndefiniteWeightError):
        generalized_eigensolve(forms, 2)


def test_round_sphere_first_eigenvalue(sphere6):
    spec = solve(sphere6, constant(sphere6, (4 * np.pi) ** -0.5), 6)
    assert spec.lam(1) == pytest.approx(2 * SQRT_PI, rel=1e-12)
    assert spec.lam(2) == pytest.approx(2 * SQRT_PI, rel=1e-12)
    assert spec.cluster(1) == (1, 2) and spec.cluster(3) == (3, 6)
    assert spec.kernel_dim == 0


def test_torus_half_spin_first_eigenvalue(torus_half):
    spec = solve(torus_half, constant(torus_half), 2)
    assert spec.lam(1) == pytest.approx(np.pi, abs=1e-12)
    assert spec.lam(2) == pytest.approx(np.pi, abs=1e-12)


def test_truncation_error():
    b = build_sphere_basis(2)
    with pytest.raises(TruncationError):
        solve(b, constant(b), 7)


@pytest.mark.parametrize("a", [0.5, 1.7, 3.0])
def test_mobius_factor_preserves_spectrum(a):
    """A conformal diffeomorphism pulls the round metric back to f^2 g with the same spectrum."""
    b = build_sphere_basis(24)
    spec = solve(b, evaluate_factor(b, mobius_factor(a)), 6)
    assert spec.positive[:6] == pytest.approx([1, 1, 2, 2, 2, 2], abs=5e-7)


def test_blocked_and_dense_agree():
    b = build_sphere_basis(8)
    beta = evaluate_factor(b, lambda th, ph: 1 + 0.5 * np.cos(th) ** 2)
    blocked = generalized_eigensolve(assemble_forms(b, beta, blocked=True), 10)
    dense = generalized_eigensolve(assemble_forms(b, beta, blocked=False), 10)
    assert blocked.positive[:10] == pytest.approx(dense.positive[:10], rel=1e-12)


def test_rayleigh_examples(sphere6):
    beta = constant(sphere6, (4 * np.pi) ** -0.5)
    forms = assemble_forms(sphere6, beta)
    spec = generalized_eigensolve(forms, 4)
    assert rayleigh_value(forms, spec.eigenvectors[:, 0]) == pytest.approx(1 / (2 * SQRT_PI), rel=1e-12)
    with pytest.raises(KernelInputError):
        rayleigh_value(forms, np.zeros(sphere6.n_modes))


def test_rayleigh_kernel_input(torus_zero):
    forms = assemble_forms(torus_zero, constant(torus_zero))
    kernel = np.zeros(torus_zero.n_modes)
    kernel[np.flatnonzero(torus_zero.kernel_mask)[0]] = 1.0
    with pytest.raises(KernelInputError):
        rayleigh_value(forms, kernel)


def test_rayleigh_sandwich_between_first_two_clusters(sphere6):
    beta = bump(sphere6)
    forms = assemble_forms(sphere6, beta)
    spec = generalized_eigensolve(forms, 3)
    v1, v3 = spec.eigenvectors[:, 0], spec.eigenvectors[:, 2]
    value = rayleigh_value(forms, v1 + v3)
    assert 1 / spec.lam(3) - 1e-12 <= value <= 1 / spec.lam(1) + 1e-12


@given(st.integers(0, 2**31))
def test_rayleigh_bounded_by_first_eigenvalue(seed):
    b = build_sphere_basis(4)
    rng = np.random.default_rng(seed)
    beta = random_smooth_factor(b, rng, amplitude=0.7)
    forms = assemble_forms(b, beta)
    lam1 = generalized_eigensolve(forms, 1).lam(1)
    for _ in range(20):
        c = rng.normal(size=b.n_modes) + 1j * rng.normal(size=b.n_modes)
        assert rayleigh_value(forms, c) <= 1 / lam1 + 1e-9


@settings(max_examples=8)
@given(st.integers(0, 2**31), st.sampled_from(["sphere", "torus"]))
def test_rayleigh_consistency_on_eigenspinors(seed, surface):
    # the quadrature 1/beta form matches 1/lambda once the cutoff resolves beta * phi
    if surface == "sphere":
        b, amp = build_sphere_basis(16), 0.5
    else:
        b, amp = build_torus_basis(UNIT_SQUARE, (0.5, 0.0), 56.0), 0.3
    beta = random_smooth_factor(b, np.random.default_rng(seed), amplitude=amp, degree=2)
    forms = assemble_forms(b, beta)
    spec = generalized_eigensolve(forms, 4)
    for k in range(1, 5):
        assert rayleigh_value(forms, spec.eigenvectors[:, k - 1]) * spec.lam(k) == pytest.approx(1.0, abs=1e-8)


@given(st.integers(0, 2**31), st.sampled_from(["sphere", "torus_half", "torus_zero"]))
def test_spectrum_properties(seed, surface):
    if surface == "sphere":
        b = build_sphere_basis(5)
    else:
        b = build_torus_basis(UNIT_SQUARE, (0.5, 0.0) if surface == "torus_half" else (0.0, 0.0), 10.0)
    rng = np.random.default_rng(seed)
    beta = random_smooth_factor(b, rng, amplitude=0.6)
    spec = solve(b, beta, 6)
    # B-orthonormal family and small residuals
    assert spec.b_orthonormality_residual <= 1e-8
    assert spec.residual <= 1e-8
    # kernel excluded from the positive count
    assert spec.lam(1) > 0
    assert spec.kernel_dim == (2 if surface == "torus_zero" else 0)
    # sorted, even clusters
    assert np.all(np.diff(spec.positive) >= 0)
    for k in range(1, 7):
        i, I = spec.cluster(k)
        assert (I - i + 1) % 2 == 0
    # scale covariance
    c = float(rng.uniform(0.1, 10))
    scaled = solve(b, beta.scaled(c), 6)
    assert scaled.positive[:6] == pytest.approx(spec.positive[:6] / c, rel=1e-10)
    # monotone in the floor direction
    prev = spec.positive[:6]
    for t in (0.01, 0.1, 1.0):
        shifted = solve(b, ConformalFactor(beta.values + t, b.weights), 6).positive[:6]
        assert np.all(shifted <= prev * (1 + 1e-12))
        prev = shifted


def test_detect_clusters_examples():
    assert detect_clusters(np.array([1.0, 1.0, 2, 2, 2, 2]), 1e-6)[3] == (3, 6)
    assert detect_clusters(np.array([1.0, 1.0, 2, 2, 2, 2]), 1e-6)[1] == (1, 2)
    distinct = np.array([1.0, 1.5, 2.0, 3.0])
    assert detect_clusters(distinct, 1e-6) == {k: (k, k) for k in range(1, 5)}


def test_spectrum_dump(tmp_path, torus_zero):
    spec = solve(torus_zero, constant(torus_zero), 4)
    path = write_spectrum(spec, tmp_path / "s.json", include_vectors=True)
    doc = json.loads(path.read_text())
    assert doc["format_version"] == 1 and doc["header"]["kernel_dim"] == 2
    assert [r["k"] for r in doc["records"]] == [1, 2, 3, 4]
    assert (tmp_path / "s.vectors.npz").exists()
    text = format_table(spec)
    assert text.splitlines()[0] == "# kernel_dim 2"
    assert float(text.splitlines()[2].split()[1]) == spec.lam(1)
