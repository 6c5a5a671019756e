"""Variational layer: derivatives of lambda_k, Euler-Lagrange residual and the
damped fixed-point minimizer of lambda_k(beta) * ||beta||_{L^p}.

The minimizer runs a continuation over a decreasing sequence of exponents p
towards the critical value 2, warm-starting each stage from the previous one.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import nnls
from scipy.special import sph_harm_y

from .geometry import ConformalFactor, SpectralBasis, build_sphere_basis, build_torus_basis, ResolutionError
from .spectrum import DEFAULT_CLUSTER_TOL, WeightedSpectrum, solve

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SPHERE_LAMBDA1 = 2.0 * np.sqrt(np.pi)


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"
    CONCENTRATING = "Concentrating"
    DIVERGED = "Diverged"


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterWeights:
    """Convex weights d_r..d_k over the active part of the eigencluster."""

    d: np.ndarray
    start: int  # 1-based index r
    stop: int  # 1-based index k
    rule: str = "nnls"

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        if d.size != self.stop - self.start + 1:
            raise ValueError("weight count does not match the index range")
        if np.any(d < 0):
            raise ValueError("cluster weights must be nonnegative")
        s = d.sum()
        if not s > 0:
            raise ValueError("cluster weights sum to zero")
        object.__setattr__(self, "d", d / s)


@dataclass(eq=False)
class Evaluation:
    """A conformal factor together with its solved spectrum at index k."""

    beta: ConformalFactor
    spectrum: WeightedSpectrum
    k: int

    @property
    def lam(self) -> float:
        return self.spectrum.lam(self.k)

    @property
    def objective(self) -> float:
        return self.lam * self.beta.norm_p

    @property
    def lambda_bar_l2(self) -> float:
        return self.lam * self.beta.norm_l2


def evaluate(basis: SpectralBasis, beta: ConformalFactor, k: int,
             cluster_tol: float = DEFAULT_CLUSTER_TOL) -> Evaluation:
    return Evaluation(beta, solve(basis, beta, k, cluster_tol=cluster_tol), k)


def normalized_objective(basis: SpectralBasis, beta: ConformalFactor, k: int, p: float | None = None) -> float:
    p = beta.p if p is None else p
    return solve(basis, beta, k).lam(k) * beta.norm(p)


# ---------------------------------------------------------------- derivative


def cluster_derivatives(basis: SpectralBasis, beta: ConformalFactor, b: np.ndarray | ConformalFactor, k: int,
                        spectrum: WeightedSpectrum | None = None) -> np.ndarray:
    """Ascending eigenvalues of -lambda_k int b <.,.> on E_k(beta), Q(beta)-orthonormal."""
    spec = solve(basis, beta, k) if spectrum is None else spectrum
    bv = b.values if isinstance(b, ConformalFactor) else np.asarray(b, dtype=float)
    if np.any(bv < 0):
        raise ValueError("direction b must be nonnegative")
    vecs = spec.cluster_vectors(k)
    if vecs.shape[1] == 0:
        raise RuntimeError("empty eigencluster")
    phi = basis.synthesize(vecs)  # (N, r, 2)
    wb = basis.weights * bv
    bform = np.einsum("n,nis,njs->ij", wb, phi.conj(), phi)
    bform = 0.5 * (bform + bform.conj().T)
    return np.sort(np.linalg.eigvalsh(-spec.lam(k) * bform))


def directional_derivative(basis: SpectralBasis, beta: ConformalFactor, b, k: int,
                           spectrum: WeightedSpectrum | None = None) -> float:
    """Right derivative of lambda_k at beta in the direction b >= 0."""
    spec = solve(basis, beta, k) if spectrum is None else spectrum
    i_k, _ = spec.cluster(k)
    values = cluster_derivatives(basis, beta, b, k, spec)
    return float(values[k - i_k])


def finite_difference_derivative(basis: SpectralBasis, beta: ConformalFactor, b, k: int,
                                 steps: Sequence[float] = (1e-4, 1e-5)) -> float:
    """Forward differences of lambda_k(beta + t b), Richardson-extrapolated over two steps."""
    bv = b.values if isinstance(b, ConformalFactor) else np.asarray(b, dtype=float)
    lam0 = solve(basis, beta, k).lam(k)
    quotients = []
    for t in steps:
        bt = ConformalFactor(beta.values + t * bv, beta.weights, beta.floor, beta.p)
        quotients.append((solve(basis, bt, k).lam(k) - lam0) / t)
    if len(steps) == 1:
        return float(quotients[0])
    t1, t2 = steps[0], steps[1]
    ratio = t1 / t2
    return float((ratio * quotients[1] - quotients[0]) / (ratio - 1.0))


# ---------------------------------------------------------------- Euler-Lagrange


def active_densities(basis: SpectralBasis, spectrum: WeightedSpectrum, k: int,
                     start: int | None = None) -> tuple[np.ndarray, int]:
    """|phi_i|^2 for i = r..k (r defaults to i(k)); shape (N, k - r + 1)."""
    i_k, _ = spectrum.cluster(k)
    r = i_k if start is None else int(start)
    if not i_k <= r <= k:
        raise ValueError(f"active start r={r} outside [{i_k}, {k}]")
    vecs = spectrum.eigenvectors[:, r - 1:k]
    return basis.density(vecs), r


def fit_weights(basis: SpectralBasis, target: np.ndarray, dens: np.ndarray, start: int, stop: int,
                rule: str = "nnls") -> ClusterWeights:
    """Convex weights d minimizing || target - sum d_i dens_i ||_{L^2} (NNLS), uniform fallback."""
    r = dens.shape[1]
    uniform = ClusterWeights(np.full(r, 1.0 / r), start, stop, rule="uniform")
    if rule == "uniform" or r == 1:
        return uniform if r > 1 else ClusterWeights(np.ones(1), start, stop, rule=rule)
    if rule != "nnls":
        raise ValueError(f"unknown weight rule {rule!r}")
    sw = np.sqrt(basis.weights)
    a = dens * sw[:, None]
    norms = np.linalg.norm(a, axis=0)
    s = np.linalg.svd(a / norms, compute_uv=False)
    if s[-1] <= 1e-6 * s[0]:
        return uniform
    d, _ = nnls(a, target * sw)
    if not d.sum() > 0:
        return uniform
    return ClusterWeights(d, start, stop, rule="nnls")


def _lq_norm(f: np.ndarray, weights: np.ndarray, q: float) -> float:
    return float(np.dot(weights, np.abs(f) ** q) ** (1.0 / q))


def euler_lagrange_residual(basis: SpectralBasis, beta: ConformalFactor, k: int, p: float | None = None,
                            weights: ClusterWeights | None = None, rule: str = "nnls",
                            start: int | None = None, spectrum: WeightedSpectrum | None = None) -> float:
    """|| beta^{p-1} - sum d_i |phi_i|^2 ||_{L^{p/(p-1)}} with beta scaled to unit L^p norm."""
    p = beta.p if p is None else p
    bn = beta.with_p(p).normalized()
    spec = solve(basis, bn, k) if spectrum is None else spectrum
    if weights is not None:
        start = weights.start
    dens, r = active_densities(basis, spec, k, start)
    target = bn.values ** (p - 1)
    if weights is None:
        weights = fit_weights(basis, target, dens, r, k, rule)
    return _lq_norm(target - dens @ weights.d, basis.weights, p / (p - 1))


def _renormalize(values: np.ndarray, weights: np.ndarray, p: float, floor_rel: float) -> ConformalFactor:
    v = np.maximum(values, floor_rel * float(values.max()))
    v = v / float(np.dot(weights, v ** p) ** (1.0 / p))
    return ConformalFactor(v, weights, floor=floor_rel * float(v.max()), p=p)


def fixed_point_step(basis: SpectralBasis, beta: ConformalFactor, k: int, p: float | None = None,
                     theta: float = 0.5, weight_rule: str = "nnls", floor_rel: float = 1e-6,
                     start: int | None = None, spectrum: WeightedSpectrum | None = None):
    """One damped substitution beta^{p-1} <- (1-theta) beta^{p-1} + theta sum d_i |phi_i|^2.

    Returns the L^p-normalized, floored update and the weights used.
    """
    if not 0 < theta <= 1:
        raise ValueError("damping theta must lie in (0, 1]")
    p = beta.p if p is None else p
    bn = beta.with_p(p).normalized()
    spec = solve(basis, bn, k) if spectrum is None else spectrum
    dens, r = active_densities(basis, spec, k, start)
    target = bn.values ** (p - 1)
    w = fit_weights(basis, target, dens, r, k, weight_rule)
    mixed = (1.0 - theta) * target + theta * (dens @ w.d)
    return _renormalize(mixed ** (1.0 / (p - 1)), basis.weights, p, floor_rel), w


# ---------------------------------------------------------------- diagnostics


def concentration_threshold(lambda_estimate: float) -> float:
    """Mass threshold (1/4) (2 sqrt(pi) / Lambda)^{1/2} for surfaces."""
    return 0.25 * np.sqrt(SPHERE_LAMBDA1 / lambda_estimate)


@dataclass(eq=False)
class ConcentrationScan:
    radii: tuple
    threshold: float
    masses: np.ndarray  # (len(radii), N): normalized ball masses
    flagged: np.ndarray  # node indices whose ball mass exceeds the threshold at every radius

    @property
    def max_local_mass(self) -> float:
        """Largest normalized mass in a ball of the smallest radius."""
        return float(self.masses[0].max())


def concentration_scan(basis: SpectralBasis, beta: ConformalFactor | np.ndarray, lambda_estimate: float,
                       radii: Sequence[float] = (0.25, 0.5), chunk: int = 512) -> ConcentrationScan:
    """Normalized L^2 masses of beta in geodesic balls around every node."""
    radii = tuple(sorted(float(r) for r in radii))
    if any(r <= 0 for r in radii):
        raise ValueError("radii must be positive")
    vals = beta.values if isinstance(beta, ConformalFactor) else np.asarray(beta, dtype=float)
    dens = basis.weights * vals ** 2
    total = dens.sum()
    N = basis.n_nodes
    axisym = basis.axisymmetric(vals)
    if axisym:
        nt, nphi = basis.grid_shape
        centers = np.arange(nt) * nphi
    else:
        centers = np.arange(N)
    out = np.empty((len(radii), centers.size))
    for s in range(0, centers.size, chunk):
        c = centers[s:s + chunk]
        d = basis.distances_from(c)
        for i, r in enumerate(radii):
            out[i, s:s + chunk] = (d < r) @ dens / total
    if axisym:
        out = np.repeat(out, basis.grid_shape[1], axis=1)
    thr = concentration_threshold(lambda_estimate)
    flagged = np.flatnonzero(np.all(out > thr, axis=0))
    return ConcentrationScan(radii=radii, threshold=thr, masses=out, flagged=flagged)


def _grid_neighbors(basis: SpectralBasis, i: int, j: int):
    n0, n1 = basis.grid_shape
    if basis.surface.is_sphere:
        for di in (-1, 0, 1):
            ii = i + di
            if ii < 0 or ii >= n0:
                # across a pole every node of the polar ring is adjacent
                for jj in range(n1):
                    yield i, jj
                continue
            for dj in (-1, 0, 1):
                yield ii, (j + dj) % n1
    else:
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                yield (i + di) % n0, (j + dj) % n1


def zero_set_count(basis: SpectralBasis, beta: ConformalFactor | np.ndarray, zero_tol: float = 1e-2) -> int:
    """Number of separated near-zero regions {beta <= zero_tol * max beta} on the grid."""
    vals = beta.values if isinstance(beta, ConformalFactor) else np.asarray(beta, dtype=float)
    n0, n1 = basis.grid_shape
    mask = (vals <= zero_tol * vals.max()).reshape(n0, n1)
    seen = np.zeros_like(mask)
    count = 0
    for i0, j0 in zip(*np.nonzero(mask)):
        if seen[i0, j0]:
            continue
        count += 1
        stack = [(i0, j0)]
        seen[i0, j0] = True
        while stack:
            i, j = stack.pop()
            for ii, jj in _grid_neighbors(basis, i, j):
                if mask[ii, jj] and not seen[ii, jj]:
                    seen[ii, jj] = True
                    stack.append((ii, jj))
    return count


def grid_laplacian(basis: SpectralBasis, f: np.ndarray) -> np.ndarray:
    """Spectral Laplace-Beltrami of a grid function (sphere: SH transform; torus: FFT)."""
    n0, n1 = basis.grid_shape
    F = np.asarray(f, dtype=float).reshape(n0, n1)
    if basis.surface.is_sphere:
        sep = basis.separable
        theta, wx = sep.theta, sep.theta_weights
        L = min(n0 - 1, (n1 - 1) // 2)
        coef = np.fft.fft(F, axis=1) / n1  # coefficient of e^{i m phi} at index m mod n1
        out = np.zeros((n0, n1), dtype=complex)
        for m in range(-L, L + 1):
            fm = coef[:, m % n1]
            gm = np.zeros(n0, dtype=complex)
            for l in range(abs(m), L + 1):
                P = sph_harm_y(l, m, theta, np.zeros_like(theta)).real
                a = 2.0 * np.pi * np.dot(wx * P, fm)
                gm += -l * (l + 1) * a * P
            out[:, m % n1] += gm * n1
        return np.real(np.fft.ifft(out, axis=1)).ravel()
    lat = np.asarray(basis.surface.lattice)
    freq = np.fft.fftfreq(n0) * n0
    n_a, n_b = np.meshgrid(freq, np.fft.fftfreq(n1) * n1, indexing="ij")
    inv = np.linalg.inv(lat)
    xi = np.stack([n_a, n_b], axis=-1) @ inv.T
    symbol = -4.0 * np.pi ** 2 * (xi ** 2).sum(-1)
    return np.real(np.fft.ifft2(np.fft.fft2(F) * symbol)).ravel()


@dataclass(eq=False)
class CurvatureCheck:
    curvature: np.ndarray
    active: np.ndarray
    ok: np.ndarray
    bound: float

    @property
    def passed(self) -> bool:
        return bool(self.ok[self.active].all())


def curvature_bound_check(basis: SpectralBasis, beta: ConformalFactor, lam: float, tol: float = 0.05,
                          floor: float | None = None) -> CurvatureCheck:
    """Gauss curvature K = (K_g - Lap log beta) / beta^2 of beta^2 g against lam^2 (1 + tol)."""
    vals = beta.values
    delta = beta.floor if floor is None else floor
    active = vals >= delta
    if not np.any(active):
        raise ValueError("beta is below the floor on every node")
    lap = grid_laplacian(basis, np.log(np.maximum(vals, 1e-300)))
    K = (basis.surface.gauss_curvature - lap) / vals ** 2
    bound = lam ** 2 * (1.0 + tol)
    ok = K <= bound * (1.0 + 1e-12)
    return CurvatureCheck(curvature=K, active=active, ok=ok, bound=bound)


# ---------------------------------------------------------------- initial data


def random_smooth_factor(basis: SpectralBasis, rng: np.random.Generator, amplitude: float = 0.3,
                         degree: int = 3, axisymmetric: bool = False, p: float = 2.0) -> ConformalFactor:
    """exp of a random low-degree harmonic expansion, normalized to unit L^p norm."""
    if basis.surface.is_sphere:
        th, ph = basis.nodes[:, 0], basis.nodes[:, 1]
        u = np.zeros(basis.n_nodes)
        for l in range(1, degree + 1):
            for m in range(0, l + 1):
                if axisymmetric and m > 0:
                    continue
                c = rng.normal() + (1j * rng.normal() if m > 0 else 0.0)
                u += np.real(c * sph_harm_y(l, m, th, ph)) * np.sqrt(4 * np.pi) / (2 * l + 1)
    else:
        lat = np.asarray(basis.surface.lattice)
        frac = basis.nodes @ np.linalg.inv(lat)
        u = np.zeros(basis.n_nodes)
        for n1 in range(-degree, degree + 1):
            for n2 in range(0, degree + 1):
                if (n2 == 0 and n1 <= 0) or n1 * n1 + n2 * n2 > degree * degree:
                    continue
                c = (rng.normal() + 1j * rng.normal()) / (1 + n1 * n1 + n2 * n2)
                u += np.real(c * np.exp(2j * np.pi * (frac @ np.array([n1, n2]))))
    u = amplitude * u / max(np.abs(u).max(), 1e-300)
    return ConformalFactor(np.exp(u), basis.weights, p=p).normalized()


# ---------------------------------------------------------------- minimizer


DEFAULT_P_SCHEDULE = (2.5, 2.25, 2.125, 2.0625, 2.03125)


@dataclass
class MinimizeParams:
    theta: float = 0.5
    theta_max: float = 1.0
    theta_growth: float = 1.5
    theta_min: float = 1e-6
    el_tol: float = 1e-6
    val_tol: float = 1e-10
    max_iters: int = 300
    plateau_patience: int = 5
    floor_rel: float = 1e-6
    delta_schedule: tuple = (1e-4, 1e-5, 1e-6)
    weight_rule: str = "nnls"
    active_start: int | None = None
    cluster_tol: float = DEFAULT_CLUSTER_TOL
    radii: tuple = (0.25, 0.5)
    concentration_window: int = 50
    plateau_rtol: float = 0.02
    divergence_factor: float = 10.0
    zero_tol: float = 1e-2
    checkpoint_every: int = 0
    refine_error: bool = True


@dataclass
class IterationRecord:
    iter: int
    stage: int
    p: float
    lambda_bar: float
    lambda_bar_l2: float
    el_residual: float
    theta: float
    floor: float
    max_local_mass: float
    zero_count: int
    flagged: bool


@dataclass
class StageSummary:
    p: float
    iterations: int
    lambda_bar: float
    lambda_bar_l2: float
    el_residual: float
    reason: str


@dataclass(eq=False)
class OptimizationTrace:
    k: int
    p_schedule: tuple
    iterations: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    status: Status = Status.MAX_ITERS
    initial_max_local_mass: float = float("nan")
    initial_lambda_bar_l2: float = float("nan")
    initial_objective: float = float("nan")
    final_beta: ConformalFactor | None = field(default=None, repr=False)
    estimate: dict = field(default_factory=dict)

    @property
    def final(self) -> IterationRecord:
        return self.iterations[-1]

    def records(self) -> list[dict]:
        return [asdict(r) for r in self.iterations]

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")
        return path

    def summary(self) -> dict:
        return {
            "k": self.k,
            "status": self.status.value,
            "iterations": len(self.iterations),
            "initial_max_local_mass": self.initial_max_local_mass,
            "final": asdict(self.final) if self.iterations else None,
            "stages": [asdict(s) for s in self.stages],
            **self.estimate,
        }


@dataclass
class _LoopState:
    stage: int = 0
    stage_iter: int = 0
    global_iter: int = 0
    theta: float = 0.5
    plateau: int = 0
    fresh_stage: bool = True


def _validate_schedule(p_schedule: Sequence[float]) -> tuple:
    sched = tuple(float(p) for p in p_schedule)
    if not sched:
        raise ScheduleError("empty p schedule")
    if any(b >= a for a, b in zip(sched, sched[1:])):
        raise ScheduleError("p schedule must be strictly decreasing")
    if sched[-1] < 2.0:
        raise ScheduleError("p schedule must stay >= 2")
    return sched


def save_checkpoint(path: str | Path, trace: OptimizationTrace, beta: ConformalFactor, state: _LoopState,
                    seed: int | None = None) -> Path:
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "state": asdict(state),
        "k": trace.k,
        "p_schedule": list(trace.p_schedule),
        "p": beta.p,
        "iter": state.global_iter,
        "seed": seed,
        "initial_max_local_mass": trace.initial_max_local_mass,
        "initial_lambda_bar_l2": trace.initial_lambda_bar_l2,
        "initial_objective": trace.initial_objective,
        "records": trace.records(),
        "stages": [asdict(s) for s in trace.stages],
    }
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, meta=np.array(json.dumps(meta)), beta=beta.values, floor=np.array(beta.floor))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, basis: SpectralBasis):
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        values = data["beta"].copy()
        floor = float(data["floor"])
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint version")
    trace = OptimizationTrace(k=meta["k"], p_schedule=tuple(meta["p_schedule"]))
    trace.iterations = [IterationRecord(**r) for r in meta["records"]]
    trace.stages = [StageSummary(**s) for s in meta["stages"]]
    trace.initial_max_local_mass = meta["initial_max_local_mass"]
    trace.initial_lambda_bar_l2 = meta["initial_lambda_bar_l2"]
    trace.initial_objective = meta["initial_objective"]
    beta = ConformalFactor(values, basis.weights, floor=floor, p=meta["p"])
    return trace, beta, _LoopState(**meta["state"])


def _el_fit(basis: SpectralBasis, ev: Evaluation, p: float, prm: MinimizeParams):
    """(densities, beta^{p-1}, weights, residual) for an evaluated iterate."""
    dens, r = active_densities(basis, ev.spectrum, ev.k, prm.active_start)
    target = ev.beta.values ** (p - 1)
    w = fit_weights(basis, target, dens, r, ev.k, prm.weight_rule)
    return dens, target, w, _lq_norm(target - dens @ w.d, basis.weights, p / (p - 1))


def minimize(basis: SpectralBasis, beta0: ConformalFactor, k: int,
             p_schedule: Sequence[float] = DEFAULT_P_SCHEDULE, params: MinimizeParams | None = None,
             checkpoint_path: str | Path | None = None, resume: bool = False,
             seed: int | None = None, stop_after: int | None = None) -> OptimizationTrace:
    """Minimize lambda_k(beta) ||beta||_{L^p} with p-continuation and Armijo-style damping.

    ``stop_after`` interrupts the run after that many global iterations
    (used to exercise checkpoint/resume).
    """
    prm = MinimizeParams() if params is None else params
    sched = _validate_schedule(p_schedule)

    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        trace, beta, st = load_checkpoint(checkpoint_path, basis)
        if trace.k != k or trace.p_schedule != sched:
            raise ValueError("checkpoint does not match the requested run")
    else:
        trace = OptimizationTrace(k=k, p_schedule=sched)
        beta = ConformalFactor(beta0.values, basis.weights, floor=beta0.floor, p=sched[0])
        beta = _renormalize(beta.values, basis.weights, sched[0], prm.floor_rel)
        st = _LoopState(theta=prm.theta)
        ev0 = evaluate(basis, beta, k, prm.cluster_tol)
        scan0 = concentration_scan(basis, beta, ev0.lambda_bar_l2, prm.radii)
        trace.initial_max_local_mass = scan0.max_local_mass
        trace.initial_lambda_bar_l2 = ev0.lambda_bar_l2
        trace.initial_objective = ev0.objective

    diverged = False
    last_reason = "max_iters"
    while st.stage < len(sched):
        p = sched[st.stage]
        if st.fresh_stage:
            beta = _renormalize(beta.values, basis.weights, p, prm.floor_rel)
            st.theta, st.stage_iter, st.plateau, st.fresh_stage = prm.theta, 0, 0, False
        ev = evaluate(basis, beta, k, prm.cluster_tol)
        reason = "max_iters"
        el = float("nan")
        fit = None
        while st.stage_iter < prm.max_iters:
            if stop_after is not None and st.global_iter >= stop_after:
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, trace, beta, st, seed)
                trace.final_beta = beta
                return trace
            if fit is None:
                fit = _el_fit(basis, ev, p, prm)
            dens, target, w, el = fit
            th = st.theta
            accepted = None
            while th >= prm.theta_min:
                mixed = (1.0 - th) * target + th * (dens @ w.d)
                cand = _renormalize(mixed ** (1.0 / (p - 1)), basis.weights, p, prm.floor_rel)
                ev_c = evaluate(basis, cand, k, prm.cluster_tol)
                if ev_c.objective <= ev.objective * (1.0 + 1e-12):
                    accepted = ev_c
                    break
                th *= 0.5
            if accepted is None:
                reason = "stalled"
                break
            change = ev.objective - accepted.objective
            ev, beta = accepted, accepted.beta
            st.theta = min(prm.theta_max, th * prm.theta_growth)
            st.stage_iter += 1
            st.global_iter += 1

            fit = _el_fit(basis, ev, p, prm)
            el = fit[3]
            lbar2 = ev.lambda_bar_l2
            scan = concentration_scan(basis, beta, lbar2, prm.radii)
            trace.iterations.append(IterationRecord(
                iter=st.global_iter, stage=st.stage, p=p, lambda_bar=ev.objective, lambda_bar_l2=lbar2,
                el_residual=el, theta=th, floor=beta.floor, max_local_mass=scan.max_local_mass,
                zero_count=zero_set_count(basis, beta, prm.zero_tol), flagged=bool(scan.flagged.size)))

            if not np.isfinite(ev.objective) or ev.objective > prm.divergence_factor * trace.initial_objective:
                diverged = True
                reason = "diverged"
                break
            small = abs(change) <= prm.val_tol * ev.objective
            if small and el <= prm.el_tol:
                reason = "converged"
                break
            st.plateau = st.plateau + 1 if small else 0
            if st.plateau >= prm.plateau_patience:
                reason = "plateau"
                break
            if checkpoint_path is not None and prm.checkpoint_every and st.global_iter % prm.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, trace, beta, st, seed)
        trace.stages.append(StageSummary(p=p, iterations=st.stage_iter, lambda_bar=ev.objective,
                                         lambda_bar_l2=ev.lambda_bar_l2, el_residual=el, reason=reason))
        log.info("stage p=%.6g: %s after %d iterations, lambda_bar=%.10g (L2 %.10g)",
                 p, reason, st.stage_iter, ev.objective, ev.lambda_bar_l2)
        last_reason = reason
        if diverged:
            break
        st.stage += 1
        st.fresh_stage = True
        if checkpoint_path is not None and prm.checkpoint_every:
            save_checkpoint(checkpoint_path, trace, beta, st, seed)

    trace.final_beta = beta
    trace.status = _classify(trace, prm, last_reason, diverged)
    trace.estimate = estimate_lambda(basis, beta, k, trace, prm)
    return trace


def _classify(trace: OptimizationTrace, prm: MinimizeParams, last_reason: str, diverged: bool) -> Status:
    if diverged:
        return Status.DIVERGED
    recs = trace.iterations
    w = prm.concentration_window
    if len(recs) >= w and all(r.flagged for r in recs[-w:]):
        vals = np.array([r.lambda_bar_l2 for r in recs[-w:]])
        if vals.max() - vals.min() <= prm.plateau_rtol * vals[-1]:
            return Status.CONCENTRATING
    if last_reason == "converged":
        return Status.CONVERGED
    return Status.MAX_ITERS


def refined_basis(basis: SpectralBasis) -> SpectralBasis | None:
    """A basis with a larger cutoff on the same grid, or None when the grid cannot carry one."""
    if basis.surface.is_sphere:
        nt, nphi = basis.grid_shape
        D = int(basis.cutoff)
        target = min(2 * D, nt - 1, (nphi - 1) // 2)
        if target <= D:
            return None
        return build_sphere_basis(target, nt, nphi)
    ng = basis.grid_shape[0]
    for factor in (2.0, 1.5, 1.25):
        try:
            return build_torus_basis(basis.surface.lattice, basis.surface.spin_structure,
                                     basis.cutoff * factor, ng)
        except ResolutionError:
            continue
    return None


def estimate_lambda(basis: SpectralBasis, beta: ConformalFactor, k: int, trace: OptimizationTrace | None = None,
                    prm: MinimizeParams | None = None) -> dict:
    """Lambda_k estimate lambda_k(beta) ||beta||_{L^2} with a floor-spread plus cutoff-refinement error bar."""
    prm = MinimizeParams() if prm is None else prm
    lam = solve(basis, beta, k).lam(k)
    value = lam * beta.norm_l2
    floored = []
    for delta in prm.delta_schedule:
        bd = ConformalFactor(beta.values, basis.weights, floor=delta * float(beta.values.max()), p=beta.p)
        floored.append(solve(basis, bd, k).lam(k) * bd.norm_l2)
    spread = float(max(floored) - min(floored)) if floored else 0.0
    refine = None
    if prm.refine_error:
        fine = refined_basis(basis)
        if fine is not None:
            refine = solve(fine, ConformalFactor(beta.values, fine.weights, beta.floor, beta.p), k).lam(k) * beta.norm_l2
    err = spread + (abs(refine - value) if refine is not None else 0.0)
    out = {
        "Lambda": value,
        "error_bar": err,
        "floor_values": floored,
        "refined_value": refine,
    }
    if trace is not None and len(trace.stages) >= 2:
        (p1, v1), (p2, v2) = [(s.p, s.lambda_bar) for s in trace.stages[-2:]]
        slope = (v2 - v1) / (p2 - p1)
        out["extrapolated"] = v2 + slope * (2.0 - p2)
    if trace is not None and trace.iterations:
        out["zero_count"] = trace.final.zero_count
        out["max_local_mass"] = trace.final.max_local_mass
        scan = concentration_scan(basis, beta, value, prm.radii)
        out["concentration_flags"] = int(scan.flagged.size)
    return out
