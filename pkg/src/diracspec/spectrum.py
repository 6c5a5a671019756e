"""Galerkin forms and the weighted eigenproblem D phi = lambda beta phi.

In the Dirac eigenbasis the operator is diag(mu), so the discrete problem is
``diag(mu) v = lambda Q v`` with ``Q_ab = int beta <psi_a, psi_b>``.  For an
axisymmetric factor on the sphere, ``Q`` is block diagonal in the azimuthal
quantum number and the solve runs block by block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .geometry import ConformalFactor, SpectralBasis

SPECTRUM_FORMAT_VERSION = 1
DEFAULT_CLUSTER_TOL = 1e-6


class SpectrumError(RuntimeError):
    pass


class GridMismatchError(SpectrumError, ValueError):
    pass


class FloorRequiredError(SpectrumError, ValueError):
    pass


class IndefiniteWeightError(SpectrumError):
    pass


class TruncationError(SpectrumError):
    """Requested eigenvalue index lies beyond the discrete spectrum; enlarge the cutoff."""


class KernelInputError(SpectrumError, ValueError):
    pass


@dataclass(eq=False)
class QuadraticForms:
    basis: SpectralBasis = field(repr=False)
    beta: ConformalFactor = field(repr=False)
    # list of (mode indices, Q block); a single block covering everything in the dense case
    blocks: list = field(repr=False)

    @property
    def mu(self) -> np.ndarray:
        return self.basis.mu

    @property
    def dirac_form(self) -> np.ndarray:
        return np.diag(self.basis.mu)

    @cached_property
    def weight_form(self) -> np.ndarray:
        M = self.basis.n_modes
        if len(self.blocks) == 1 and self.blocks[0][0].size == M:
            idx, q = self.blocks[0]
            out = np.empty((M, M), dtype=complex)
            out[np.ix_(idx, idx)] = q
            return out
        out = np.zeros((M, M), dtype=complex)
        for idx, q in self.blocks:
            out[np.ix_(idx, idx)] = q
        return out

    @cached_property
    def inverse_weight_form(self) -> np.ndarray:
        """int (1/beta) <D psi_a, D psi_b>; needs a positive floor."""
        if not (self.beta.floor > 0 or self.beta.values.min() > 0):
            raise FloorRequiredError("inverse weight form needs beta floored at delta > 0")
        g = _weighted_gram(self.basis, self.basis.weights / self.beta.values)
        mu = self.basis.mu
        return mu[:, None] * g * mu[None, :]

    @property
    def is_blocked(self) -> bool:
        return len(self.blocks) > 1


def _weighted_gram(basis: SpectralBasis, w: np.ndarray) -> np.ndarray:
    vals = basis.values
    a = vals * np.sqrt(w)[None, :, None]
    a = a.transpose(0, 2, 1).reshape(basis.n_modes, -1)
    return a.conj() @ a.T


def _axisymmetric_blocks(basis: SpectralBasis, beta_values: np.ndarray) -> list:
    sep = basis.separable
    nt, nphi = basis.grid_shape
    ring = beta_values.reshape(nt, nphi)[:, 0]
    w = 2.0 * np.pi * sep.theta_weights * ring
    blocks = []
    for m2 in np.unique(sep.block):
        idx = np.flatnonzero(sep.block == m2)
        prof = sep.profiles[idx]  # (b, nt, 2)
        a = (prof * np.sqrt(w)[None, :, None]).reshape(idx.size, -1)
        blocks.append((idx, (a @ a.T).astype(complex)))
    return blocks


def assemble_forms(basis: SpectralBasis, beta: ConformalFactor, blocked: bool | None = None) -> QuadraticForms:
    """Assemble the Galerkin forms for ``beta`` on ``basis``.

    ``blocked=None`` picks the block solver whenever beta is axisymmetric on a
    sphere basis.
    """
    if beta.values.shape != basis.weights.shape or not np.array_equal(beta.weights, basis.weights):
        raise GridMismatchError("conformal factor grid does not match the basis grid")
    if blocked is None:
        blocked = basis.axisymmetric(beta.values)
    if blocked:
        if not basis.axisymmetric(beta.values):
            raise SpectrumError("block assembly requested for a non-axisymmetric factor")
        blocks = _axisymmetric_blocks(basis, beta.values)
    else:
        q = _weighted_gram(basis, basis.weights * beta.values)
        q = 0.5 * (q + q.conj().T)
        blocks = [(np.arange(basis.n_modes), q)]
    return QuadraticForms(basis=basis, beta=beta, blocks=blocks)


@dataclass(eq=False)
class WeightedSpectrum:
    """Sorted generalized eigenvalues with B-orthonormal eigenvectors.

    ``eigenvalues`` holds all nonzero eigenvalues (kernel excluded),
    ``positive`` the positive ones; ``eigenvectors[:, i]`` belongs to
    ``positive[i]`` for ``i < eigenvectors.shape[1]``.  Cluster pairs are
    1-based, ``clusters[k] = (i(k), I(k))``.
    """

    eigenvalues: np.ndarray
    positive: np.ndarray
    eigenvectors: np.ndarray = field(repr=False)
    clusters: dict
    residual: float
    b_orthonormality_residual: float
    kernel_dim: int
    k_max: int
    cluster_tol: float

    @property
    def positive_index_map(self) -> dict:
        n_neg = int((self.eigenvalues < 0).sum())
        return {k: n_neg + k - 1 for k in range(1, self.k_max + 1)}

    def lam(self, k: int) -> float:
        return float(self.positive[k - 1])

    def cluster(self, k: int) -> tuple[int, int]:
        if k in self.clusters:
            return self.clusters[k]
        return detect_clusters(self.positive, self.cluster_tol, k_max=k)[k]

    def cluster_vectors(self, k: int) -> np.ndarray:
        i, I = self.cluster(k)
        if I > self.eigenvectors.shape[1]:
            raise SpectrumError("eigenvectors for the full cluster were not retained")
        return self.eigenvectors[:, i - 1:I]

    def to_records(self) -> list[dict]:
        return [
            {"k": k, "lambda": float(self.positive[k - 1]), "cluster": list(self.clusters[k]),
             "residual": self.residual}
            for k in range(1, self.k_max + 1)
        ]


def detect_clusters(positive: np.ndarray, cluster_tol: float = DEFAULT_CLUSTER_TOL,
                    k_max: int | None = None) -> dict[int, tuple[int, int]]:
    """Map k -> (i(k), I(k)) over contiguous runs with relative gaps <= cluster_tol."""
    lam = np.asarray(positive, dtype=float)
    n = lam.size
    k_max = n if k_max is None else min(k_max, n)
    start = np.zeros(n, dtype=int)
    for i in range(1, n):
        same = abs(lam[i] - lam[i - 1]) <= cluster_tol * max(abs(lam[i]), abs(lam[i - 1]))
        start[i] = start[i - 1] if same else i
    end = np.zeros(n, dtype=int)
    end[-1] = n - 1 if n else 0
    for i in range(n - 2, -1, -1):
        end[i] = end[i + 1] if start[i + 1] == start[i] else i
    return {k: (int(start[k - 1]) + 1, int(end[k - 1]) + 1) for k in range(1, k_max + 1)}


def _solve_block(mu: np.ndarray, q: np.ndarray):
    try:
        lam, vec = sla.eigh(np.diag(mu).astype(complex), q)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteWeightError("weight form is not positive definite") from exc
    return lam, vec


def generalized_eigensolve(forms: QuadraticForms, k_max: int, cluster_tol: float = DEFAULT_CLUSTER_TOL,
                           keep: int | None = None) -> WeightedSpectrum:
    """Solve diag(mu) v = lambda Q v and index positive eigenvalues, skipping the kernel.

    Eigenvectors are kept for the first ``max(keep, I(k_max))`` positive
    eigenvalues (``keep`` defaults to all in the dense case).
    """
    basis = forms.basis
    mu = basis.mu
    M = basis.n_modes
    n_kernel = basis.kernel_dim
    lams, owners = [], []
    vec_store = []
    for b, (idx, q) in enumerate(forms.blocks):
        lam, vec = _solve_block(mu[idx], q)
        lams.append(lam)
        owners.append(np.column_stack([np.full(lam.size, b), np.arange(lam.size)]))
        vec_store.append(vec)
    lam_all = np.concatenate(lams)
    own = np.concatenate(owners)

    # The generalized problem has exactly as many zero eigenvalues as the basis has kernel modes.
    order_abs = np.argsort(np.abs(lam_all), kind="stable")
    kernel_idx = order_abs[:n_kernel]
    keep_mask = np.ones(lam_all.size, dtype=bool)
    keep_mask[kernel_idx] = False
    lam_nz = lam_all[keep_mask]
    own_nz = own[keep_mask]
    order = np.argsort(lam_nz, kind="stable")
    lam_nz, own_nz = lam_nz[order], own_nz[order]
    pos_mask = lam_nz > 0
    positive = lam_nz[pos_mask]
    own_pos = own_nz[pos_mask]
    if k_max < 1:
        raise ValueError("k_max must be positive")
    if k_max > positive.size:
        raise TruncationError(f"k_max={k_max} exceeds the {positive.size} positive discrete eigenvalues; "
                              "increase the cutoff")
    clusters_all = detect_clusters(positive, cluster_tol)
    needed = clusters_all[k_max][1]
    if keep is None:
        keep = positive.size if not forms.is_blocked else needed
    n_keep = min(positive.size, max(keep, needed))
    if clusters_all[n_keep][1] > n_keep:
        n_keep = clusters_all[n_keep][1]

    vecs = np.zeros((M, n_keep), dtype=complex)
    for col in range(n_keep):
        b, j = own_pos[col]
        idx = forms.blocks[b][0]
        vecs[idx, col] = vec_store[b][:, j]

    # residuals and B-orthonormality, per block to avoid dense products
    res = 0.0
    gram_err = 0.0
    for b, (idx, q) in enumerate(forms.blocks):
        cols = np.flatnonzero(own_pos[:n_keep, 0] == b)
        if cols.size == 0:
            continue
        v = vecs[np.ix_(idx, cols)]
        r = mu[idx, None] * v - (q @ v) * positive[cols][None, :]
        res = max(res, float(np.abs(r).max()))
        g = v.conj().T @ q @ v
        gram_err = max(gram_err, float(np.abs(g - np.eye(cols.size)).max()))

    return WeightedSpectrum(
        eigenvalues=lam_nz, positive=positive, eigenvectors=vecs,
        clusters={k: clusters_all[k] for k in range(1, k_max + 1)},
        residual=res, b_orthonormality_residual=gram_err, kernel_dim=n_kernel,
        k_max=k_max, cluster_tol=cluster_tol,
    )


def solve(basis: SpectralBasis, beta: ConformalFactor, k_max: int, **kw) -> WeightedSpectrum:
    return generalized_eigensolve(assemble_forms(basis, beta), k_max, **kw)


def rayleigh_value(forms: QuadraticForms, coefficients: np.ndarray) -> float:
    """F(beta)[phi] = int <D phi, phi> / int (1/beta) |D phi|^2."""
    v = np.asarray(coefficients, dtype=complex)
    mu = forms.basis.mu
    dv = mu * v
    if np.linalg.norm(dv) <= 1e-14 * max(np.linalg.norm(v), 1e-300):
        raise KernelInputError("D phi = 0: spinor lies in the discrete kernel")
    num = float(np.real(np.vdot(v, dv)))
    den = float(np.real(np.vdot(v, forms.inverse_weight_form @ v)))
    return num / den


def write_spectrum(spectrum: WeightedSpectrum, path: str | Path, header: dict | None = None,
                   include_vectors: bool = False) -> Path:
    """JSON dump of {k, lambda_k, cluster, residual} records with a version field."""
    path = Path(path)
    doc = {
        "format_version": SPECTRUM_FORMAT_VERSION,
        "header": dict(header or {}, kernel_dim=spectrum.kernel_dim,
                       b_orthonormality_residual=spectrum.b_orthonormality_residual),
        "records": spectrum.to_records(),
    }
    path.write_text(json.dumps(doc, indent=1))
    if include_vectors:
        vec_path = path.with_suffix(".vectors.npz")
        np.savez_compressed(vec_path, format_version=SPECTRUM_FORMAT_VERSION,
                            eigenvectors=spectrum.eigenvectors, positive=spectrum.positive)
    return path


def format_table(spectrum: WeightedSpectrum) -> str:
    lines = [f"# kernel_dim {spectrum.kernel_dim}", "# k lambda_k i(k) I(k) residual"]
    for rec in spectrum.to_records():
        i, I = rec["cluster"]
        lines.append(f"{rec['k']} {rec['lambda']:.17g} {i} {I} {rec['residual']:.17g}")
    return "\n".join(lines) + "\n"
