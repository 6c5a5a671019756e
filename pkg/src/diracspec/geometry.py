"""Spin surfaces, quadrature grids and truncated Dirac eigenbases.

Two surfaces are supported: the unit round sphere and flat tori with one of
the four spin structures. On both, the Dirac operator is diagonal in the
basis built here, so Galerkin discretizations only need the eigenvalues and
the pointwise spinor values on the quadrature grid.

The sphere realization uses spinor spherical harmonics, i.e. eigenspinors of
``sigma . L + 1`` acting on C^2-valued functions.  Its eigenvalues are
``+(l + 1)`` for ``j = l + 1/2`` and ``-l`` for ``j = l - 1/2``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import sph_harm_y

BASIS_FORMAT_VERSION = 1


class GeometryError(ValueError):
    """Invalid surface data or basis request."""


class ResolutionError(GeometryError):
    """Quadrature grid too coarse for the requested spectral cutoff."""


class SurfaceKind(str, enum.Enum):
    ROUND_SPHERE = "RoundSphere"
    FLAT_TORUS = "FlatTorus"


@dataclass(frozen=True)
class SurfaceSpec:
    kind: SurfaceKind
    genus: int
    area: float
    lattice: tuple[tuple[float, float], tuple[float, float]] | None = None
    spin_structure: tuple[float, float] | None = None

    @classmethod
    def round_sphere(cls) -> "SurfaceSpec":
        return cls(SurfaceKind.ROUND_SPHERE, genus=0, area=4.0 * np.pi)

    @classmethod
    def flat_torus(cls, lattice, spin_structure=(0.0, 0.0)) -> "SurfaceSpec":
        lat = np.asarray(lattice, dtype=float)
        if lat.shape != (2, 2) or not np.all(np.isfinite(lat)):
            raise GeometryError("lattice must be two finite 2-vectors")
        det = float(np.linalg.det(lat))
        scale = float(np.linalg.norm(lat[0]) * np.linalg.norm(lat[1]))
        if scale == 0.0 or abs(det) <= 1e-12 * scale:
            raise GeometryError("lattice vectors are linearly dependent")
        spin = tuple(float(s) for s in spin_structure)
        if len(spin) != 2 or any(s not in (0.0, 0.5) for s in spin):
            raise GeometryError("spin_structure entries must be 0 or 1/2")
        lat_t = (tuple(lat[0].tolist()), tuple(lat[1].tolist()))
        return cls(SurfaceKind.FLAT_TORUS, genus=1, area=abs(det), lattice=lat_t, spin_structure=spin)

    @property
    def is_sphere(self) -> bool:
        return self.kind is SurfaceKind.ROUND_SPHERE

    @property
    def min_scalar_curvature(self) -> float:
        return 2.0 if self.is_sphere else 0.0

    @property
    def gauss_curvature(self) -> float:
        return 1.0 if self.is_sphere else 0.0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "genus": self.genus,
            "area": self.area,
            "lattice": None if self.lattice is None else [list(v) for v in self.lattice],
            "spin_structure": None if self.spin_structure is None else list(self.spin_structure),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurfaceSpec":
        kind = SurfaceKind(d["kind"])
        if kind is SurfaceKind.ROUND_SPHERE:
            return cls.round_sphere()
        return cls.flat_torus(d["lattice"], d.get("spin_structure") or (0.0, 0.0))


@dataclass(frozen=True, eq=False)
class SphereProfiles:
    """Separable form of sphere modes: value_c(theta, phi) = profile_c(theta) e^{i order_c phi}."""

    theta: np.ndarray  # (nt,)
    theta_weights: np.ndarray  # (nt,) Gauss-Legendre weights in cos(theta)
    n_phi: int
    profiles: np.ndarray  # (M, nt, 2) real
    orders: np.ndarray  # (M, 2) integer azimuthal orders per component
    block: np.ndarray  # (M,) twice the total angular momentum projection, 2*m_j


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Truncated L^2-orthonormal Dirac eigenbasis tabulated on a quadrature grid.

    ``nodes`` holds grid coordinates: (theta, phi) on the sphere, Cartesian
    (x, y) on the torus. ``grid_shape`` is the logical product-grid shape
    used for neighbour queries.
    """

    surface: SurfaceSpec
    mu: np.ndarray
    labels: tuple
    cutoff: float
    nodes: np.ndarray
    weights: np.ndarray
    grid_shape: tuple[int, int]
    kernel_tol: float
    separable: SphereProfiles | None = field(default=None, repr=False)
    dense_values: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_modes(self) -> int:
        return int(self.mu.size)

    @property
    def n_nodes(self) -> int:
        return int(self.weights.size)

    @property
    def kernel_mask(self) -> np.ndarray:
        return np.abs(self.mu) <= self.kernel_tol

    @property
    def kernel_dim(self) -> int:
        return int(self.kernel_mask.sum())

    @cached_property
    def values(self) -> np.ndarray:
        """Spinor values, shape (n_modes, n_nodes, 2), complex."""
        if self.dense_values is not None:
            return self.dense_values
        return self.synthesize(np.eye(self.n_modes)).transpose(1, 0, 2)

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Evaluate spinors with coefficient columns ``coeffs`` (M, r) -> (N, r, 2)."""
        c = np.asarray(coeffs)
        squeeze = c.ndim == 1
        if squeeze:
            c = c[:, None]
        if self.separable is None:
            out = np.einsum("mns,mr->nrs", self.values, c)
        else:
            out = _synthesize_sphere(self.separable, c)
        return out[:, 0, :] if squeeze else out

    def density(self, coeffs: np.ndarray) -> np.ndarray:
        """Pointwise |phi|^2 for each coefficient column, shape (N, r)."""
        vals = self.synthesize(coeffs)
        return (np.abs(vals) ** 2).sum(axis=-1)

    def gram(self) -> np.ndarray:
        v = self.values
        return np.einsum("ans,n,bns->ab", v.conj(), self.weights, v)

    def integrate(self, f: np.ndarray) -> float:
        return float(np.dot(self.weights, f))

    def cartesian(self) -> np.ndarray:
        """Embedding coordinates of nodes (unit vectors on the sphere, plane points on the torus)."""
        if self.surface.is_sphere:
            th, ph = self.nodes[:, 0], self.nodes[:, 1]
            return np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
        return self.nodes.copy()

    def distances_from(self, centers: np.ndarray) -> np.ndarray:
        """Geodesic distances (len(centers), N) between selected nodes and all nodes."""
        if self.surface.is_sphere:
            x = self.cartesian()
            cosang = np.clip(x[centers] @ x.T, -1.0, 1.0)
            return np.arccos(cosang)
        lat = np.asarray(self.surface.lattice)
        diff = self.nodes[centers][:, None, :] - self.nodes[None, :, :]
        frac = diff @ np.linalg.inv(lat)
        frac -= np.round(frac)
        best = None
        for a in (-1, 0, 1):
            for b in (-1, 0, 1):
                d = np.linalg.norm((frac + np.array([a, b])) @ lat, axis=-1)
                best = d if best is None else np.minimum(best, d)
        return best

    def axisymmetric(self, values: np.ndarray, rtol: float = 1e-13) -> bool:
        """True when a grid function is constant along every latitude ring."""
        if self.separable is None:
            return False
        nt, nphi = self.grid_shape
        v = np.asarray(values).reshape(nt, nphi)
        scale = max(float(np.abs(v).max()), 1e-300)
        return bool(np.abs(v - v[:, :1]).max() <= rtol * scale)


def _synthesize_sphere(sep: SphereProfiles, c: np.ndarray) -> np.ndarray:
    nt = sep.theta.size
    nphi = sep.n_phi
    r = c.shape[1]
    phi = 2.0 * np.pi * np.arange(nphi) / nphi
    out = np.zeros((nt, nphi, r, 2), dtype=complex)
    for comp in range(2):
        orders = sep.orders[:, comp]
        live = np.any(c != 0, axis=1)
        for m in np.unique(orders[live]):
            sel = (orders == m) & live
            f = np.einsum("at,ar->tr", sep.profiles[sel, :, comp], c[sel])
            out[:, :, :, comp] += f[:, None, :] * np.exp(1j * m * phi)[None, :, None]
    return out.reshape(nt * nphi, r, 2)


def _theta_profile(l: int, m: int, theta: np.ndarray) -> np.ndarray:
    if abs(m) > l:
        return np.zeros_like(theta)
    return sph_harm_y(l, m, theta, np.zeros_like(theta)).real


def _spinor_coefficients(sign: int, l: int, m2: int):
    """Clebsch-Gordan weights (a, b) on Y_{l,lo} and Y_{l,hi}, lo/hi = m_j -/+ 1/2."""
    m = m2 / 2.0
    if sign > 0:
        a = np.sqrt((l + m + 0.5) / (2 * l + 1))
        b = np.sqrt((l - m + 0.5) / (2 * l + 1))
    else:
        a = -np.sqrt((l - m + 0.5) / (2 * l + 1))
        b = np.sqrt((l + m + 0.5) / (2 * l + 1))
    return a, b, int(round(m - 0.5)), int(round(m + 0.5))


def spinor_harmonic(label: tuple, theta, phi) -> np.ndarray:
    """Value (..., 2) of the sphere mode with label (sign, 2j, 2m_j) at arbitrary points."""
    sign, j2, m2 = label
    l = (j2 - 1) // 2 if sign > 0 else (j2 + 1) // 2
    a, b, lo, hi = _spinor_coefficients(sign, l, m2)
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(phi, dtype=float))
    up = a * sph_harm_y(l, lo, theta, phi) if abs(lo) <= l else np.zeros(theta.shape, complex)
    down = b * sph_harm_y(l, hi, theta, phi) if abs(hi) <= l else np.zeros(theta.shape, complex)
    return np.stack([up, down], axis=-1)


def sphere_grid(n_theta: int, n_phi: int | None = None):
    """Product Gauss-Legendre (in cos theta) x uniform (in phi) grid on the unit sphere."""
    n_phi = 2 * n_theta if n_phi is None else n_phi
    x, wx = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(x)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    nodes = np.stack([tt.ravel(), pp.ravel()], axis=-1)
    weights = np.outer(wx, np.full(n_phi, 2.0 * np.pi / n_phi)).ravel()
    return theta, wx, phi, nodes, weights


def build_sphere_basis(cutoff_degree: int, grid_resolution: int | None = None,
                       n_phi: int | None = None, kernel_tol: float | None = None) -> SpectralBasis:
    """Spinor spherical harmonics with |mu| <= cutoff_degree on a Gauss product grid.

    ``grid_resolution`` is the number of colatitude nodes; the longitude count
    defaults to twice that. Gram exactness needs at least ``cutoff_degree + 1``
    colatitudes and ``2 * cutoff_degree + 1`` longitudes.
    """
    if int(cutoff_degree) != cutoff_degree or cutoff_degree < 1:
        raise GeometryError("cutoff_degree must be a positive integer")
    D = int(cutoff_degree)
    nt = 2 * D + 2 if grid_resolution is None else int(grid_resolution)
    nphi = 2 * nt if n_phi is None else int(n_phi)
    if nt < D + 1 or nphi < 2 * D + 1:
        raise ResolutionError(
            f"grid {nt}x{nphi} too coarse for cutoff_degree={D}: "
            f"need >= {D + 1} colatitudes and >= {2 * D + 1} longitudes")
    theta, wx, _, nodes, weights = sphere_grid(nt, nphi)

    mus, labels, profiles, orders, blocks = [], [], [], [], []
    cache: dict[tuple[int, int], np.ndarray] = {}

    def prof(l, m):
        if (l, m) not in cache:
            cache[(l, m)] = _theta_profile(l, m, theta)
        return cache[(l, m)]

    for level in range(D):
        j2 = 2 * level + 1
        for sign in (1, -1):
            l = level if sign > 0 else level + 1
            for m2 in range(-j2, j2 + 1, 2):
                a, b, lo, hi = _spinor_coefficients(sign, l, m2)
                profiles.append(np.stack([a * prof(l, lo), b * prof(l, hi)], axis=-1))
                orders.append((lo, hi))
                blocks.append(m2)
                mus.append(sign * (level + 1))
                labels.append((sign, j2, m2))
    mu = np.asarray(mus, dtype=float)
    sep = SphereProfiles(theta=theta, theta_weights=wx, n_phi=nphi, profiles=np.asarray(profiles),
                         orders=np.asarray(orders, dtype=int), block=np.asarray(blocks, dtype=int))
    ktol = 1e-8 * D if kernel_tol is None else kernel_tol
    return SpectralBasis(surface=SurfaceSpec.round_sphere(), mu=mu, labels=tuple(labels), cutoff=float(D),
                         nodes=nodes, weights=weights, grid_shape=(nt, nphi), kernel_tol=ktol, separable=sep)


def torus_frequencies(lattice, spin_structure, cutoff: float):
    """Shifted dual-lattice points xi = A^{-1}(n + delta) with 2 pi |xi| <= cutoff."""
    lat = np.asarray(lattice, dtype=float)
    delta = np.asarray(spin_structure, dtype=float)
    radius = cutoff / (2.0 * np.pi)
    bound = [int(np.ceil(np.linalg.norm(lat[i]) * radius)) + 1 for i in range(2)]
    inv = np.linalg.inv(lat)
    out = []
    for n1 in range(-bound[0], bound[0] + 1):
        for n2 in range(-bound[1], bound[1] + 1):
            shifted = np.array([n1, n2], dtype=float) + delta
            xi = inv @ shifted
            if 2.0 * np.pi * np.linalg.norm(xi) <= cutoff * (1 + 1e-12):
                out.append((n1, n2, xi))
    return out


def build_torus_basis(lattice, spin_structure, cutoff: float, grid_resolution: int | None = None,
                      kernel_tol: float | None = None) -> SpectralBasis:
    """Fourier spinor modes of -i(sigma_1 d_1 + sigma_2 d_2) on the flat torus R^2 / lattice."""
    surface = SurfaceSpec.flat_torus(lattice, spin_structure)
    if not cutoff > 0:
        raise GeometryError("cutoff must be positive")
    lat = np.asarray(surface.lattice)
    freqs = torus_frequencies(lat, surface.spin_structure, cutoff)
    if not freqs:
        raise GeometryError(f"no Dirac modes with |mu| <= {cutoff}; increase the cutoff")
    nmax = max(max(abs(n1), abs(n2)) for n1, n2, _ in freqs) if freqs else 0
    ng = 2 * nmax + 2 if grid_resolution is None else int(grid_resolution)
    if ng < 2 * nmax + 1:
        raise ResolutionError(f"torus grid {ng} too coarse for cutoff {cutoff}: need >= {2 * nmax + 1}")

    s = np.arange(ng) / ng
    s1, s2 = np.meshgrid(s, s, indexing="ij")
    frac = np.stack([s1.ravel(), s2.ravel()], axis=-1)
    nodes = frac @ lat
    weights = np.full(ng * ng, surface.area / ng ** 2)
    delta = np.asarray(surface.spin_structure)

    mus, labels, vals = [], [], []
    norm = 1.0 / np.sqrt(surface.area)
    for n1, n2, xi in freqs:
        phase = np.exp(2j * np.pi * (frac @ (np.array([n1, n2]) + delta))) * norm
        k = np.linalg.norm(xi)
        if k * 2 * np.pi <= 1e-12:
            for comp in range(2):
                u = np.zeros(2, dtype=complex)
                u[comp] = 1.0
                mus.append(0.0)
                labels.append((0, n1, n2, comp))
                vals.append(phase[:, None] * u[None, :])
            continue
        e = (xi[0] + 1j * xi[1]) / k
        for sign in (1, -1):
            u = np.array([1.0, sign * e]) / np.sqrt(2.0)
            mus.append(sign * 2.0 * np.pi * k)
            labels.append((sign, n1, n2, 0))
            vals.append(phase[:, None] * u[None, :])
    mu = np.asarray(mus)
    order = np.lexsort((np.arange(mu.size), mu))
    mu = mu[order]
    labels = tuple(labels[i] for i in order)
    values = np.asarray(vals)[order]
    ktol = 1e-8 * cutoff if kernel_tol is None else kernel_tol
    return SpectralBasis(surface=surface, mu=mu, labels=labels, cutoff=float(cutoff), nodes=nodes,
                         weights=weights, grid_shape=(ng, ng), kernel_tol=ktol, dense_values=values)


@dataclass(frozen=True, eq=False)
class ConformalFactor:
    """Nonnegative grid function beta with floor and cached norms."""

    values: np.ndarray
    weights: np.ndarray = field(repr=False)
    floor: float = 0.0
    p: float = 2.0
    norm_l2: float = field(init=False)
    norm_p: float = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != np.shape(self.weights):
            raise GeometryError("conformal factor does not match the grid")
        if not np.all(np.isfinite(v)):
            raise GeometryError("conformal factor has non-finite values")
        if v.min() < 0:
            raise GeometryError(f"conformal factor is negative (min {v.min():.3e})")
        if self.floor < 0:
            raise GeometryError("floor must be nonnegative")
        if self.p < 2:
            raise GeometryError("p must be >= 2 (the surface dimension)")
        if self.floor > 0:
            v = np.maximum(v, self.floor)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "norm_l2", lp_norm(v, self.weights, 2.0))
        object.__setattr__(self, "norm_p", lp_norm(v, self.weights, self.p))

    def norm(self, q: float) -> float:
        return lp_norm(self.values, self.weights, q)

    def scaled(self, c: float) -> "ConformalFactor":
        return ConformalFactor(self.values * c, self.weights, self.floor * c, self.p)

    def with_p(self, p: float) -> "ConformalFactor":
        return ConformalFactor(self.values, self.weights, self.floor, p)

    def normalized(self, q: float | None = None) -> "ConformalFactor":
        q = self.p if q is None else q
        return self.scaled(1.0 / self.norm(q))

    def floored(self, rel: float) -> "ConformalFactor":
        """Floor at ``rel * max(beta)``."""
        return ConformalFactor(self.values, self.weights, rel * float(self.values.max()), self.p)


def lp_norm(values: np.ndarray, weights: np.ndarray, q: float) -> float:
    return float(np.dot(weights, np.abs(values) ** q) ** (1.0 / q))


def evaluate_factor(basis: SpectralBasis, closed_form: Callable[..., np.ndarray] | float,
                    floor: float = 0.0, p: float = 2.0) -> ConformalFactor:
    """Sample a closed-form factor on the basis grid.

    On the sphere ``closed_form(theta, phi)``; on the torus ``closed_form(x, y)``.
    A plain number gives a constant factor.
    """
    if callable(closed_form):
        vals = np.asarray(closed_form(basis.nodes[:, 0], basis.nodes[:, 1]), dtype=float)
        vals = np.broadcast_to(vals, (basis.n_nodes,)).copy()
    else:
        vals = np.full(basis.n_nodes, float(closed_form))
    if np.any(vals < 0):
        raise GeometryError("closed form is negative at some grid node")
    return ConformalFactor(vals, basis.weights, floor=floor, p=p)


def mobius_factor(dilation: float) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Conformal factor of the sphere dilation fixing the poles; beta^2 g is isometric to g."""
    a = float(dilation)

    def f(theta, phi):
        c = np.cos(theta)
        return 2.0 * a / ((1.0 + c) + a * a * (1.0 - c))

    return f


def export_basis(basis: SpectralBasis, path: str | Path) -> Path:
    """Write a self-describing table {mode, mu, node, weight, 4 spinor components} as .npz."""
    path = Path(path)
    vals = basis.values
    M, N = basis.n_modes, basis.n_nodes
    mode_idx = np.repeat(np.arange(M), N)
    node_idx = np.tile(np.arange(N), M)
    table = np.column_stack([
        mode_idx, basis.mu[mode_idx], node_idx, basis.weights[node_idx],
        vals[..., 0].real.ravel(), vals[..., 0].imag.ravel(),
        vals[..., 1].real.ravel(), vals[..., 1].imag.ravel(),
    ])
    header = {
        "format_version": BASIS_FORMAT_VERSION,
        "columns": ["mode", "mu", "node", "weight", "s0_re", "s0_im", "s1_re", "s1_im"],
        "surface": basis.surface.to_dict(),
        "cutoff": basis.cutoff,
        "grid_shape": list(basis.grid_shape),
        "kernel_tol": basis.kernel_tol,
        "labels": [list(map(float, lab)) for lab in basis.labels],
    }
    np.savez_compressed(path, header=np.array(json.dumps(header)), table=table, nodes=basis.nodes)
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def import_basis(path: str | Path) -> SpectralBasis:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        table = data["table"]
        nodes = data["nodes"]
    version = header.get("format_version")
    if version != BASIS_FORMAT_VERSION:
        raise GeometryError(f"unsupported basis format version {version!r}")
    M = int(table[:, 0].max()) + 1
    N = int(table[:, 2].max()) + 1
    mu = table[::N, 1].copy()
    weights = table[:N, 3].copy()
    vals = np.empty((M, N, 2), dtype=complex)
    vals[..., 0] = (table[:, 4] + 1j * table[:, 5]).reshape(M, N)
    vals[..., 1] = (table[:, 6] + 1j * table[:, 7]).reshape(M, N)
    labels = tuple(tuple(int(x) if float(x).is_integer() else x for x in lab) for lab in header["labels"])
    return SpectralBasis(surface=SurfaceSpec.from_dict(header["surface"]), mu=mu, labels=labels,
                         cutoff=float(header["cutoff"]), nodes=nodes, weights=weights,
                         grid_shape=tuple(header["grid_shape"]), kernel_tol=float(header["kernel_tol"]),
                         dense_values=vals)


def spectral_pairs(mu: Sequence[float], tol: float = 1e-12) -> bool:
    """Multiset {mu} equals {-mu}."""
    a = np.sort(np.asarray(mu, dtype=float))
    return bool(np.allclose(a, -a[::-1], atol=tol, rtol=0))
