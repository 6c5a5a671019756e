"""Acceptance suite: one function per criterion, sharing cached minimizer runs.

``run_acceptance`` is used both by ``diracspec verify`` and by the test suite.
"""

from __future__ import annotations

import dataclasses
import functools
import math
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import ConformalFactor, build_sphere_basis, build_torus_basis
from .invariants import (SOBOLEV_K2, SphereTable, aubin_bound, friedrich_check, gap_check, normalized_eigenvalue,
                         sobolev_probe, sobolev_sides, sphere_value)
from .spectrum import solve
from .variation import (MinimizeParams, Status, directional_derivative, finite_difference_derivative, minimize,
                        random_smooth_factor)

SQRT_PI = math.sqrt(math.pi)
UNIT_SQUARE = ((1.0, 0.0), (0.0, 1.0))


@dataclass
class CriterionResult:
    number: int
    key: str
    passed: bool
    detail: str
    seconds: float
    error: str | None = None

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.number:2d} {self.key}: {self.detail} ({self.seconds:.1f} s)"


@dataclass
class AcceptanceContext:
    """Settings and lazily computed runs shared by several criteria."""

    sphere_table: SphereTable = field(default_factory=SphereTable)
    k2_seeds: tuple = (0, 1, 2, 3, 4)
    k2_degree: int = 6
    k4_degree: int = 40
    k4_seed: int = 1
    k4_max_iters: int = 400
    torus_cutoff: float = 16.0
    _cache: dict = field(default_factory=dict, repr=False)
    _locks: dict = field(default_factory=dict, repr=False)
    _guard: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _cached(self, key: str, fn: Callable):
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key not in self._cache:
                self._cache[key] = fn()
            return self._cache[key]

    def sphere_k2_runs(self) -> list:
        def run():
            basis = build_sphere_basis(self.k2_degree)
            out = []
            for seed in self.k2_seeds:
                beta0 = random_smooth_factor(basis, np.random.default_rng(seed))
                out.append(minimize(basis, beta0, 2, seed=seed))
            return out
        return self._cached("sphere_k2", run)

    def sphere_k4_run(self):
        def run():
            basis = build_sphere_basis(self.k4_degree)
            beta0 = random_smooth_factor(basis, np.random.default_rng(self.k4_seed), axisymmetric=True)
            return minimize(basis, beta0, 4, params=MinimizeParams(max_iters=self.k4_max_iters), seed=self.k4_seed)
        return self._cached("sphere_k4", run)

    def torus_k2_run(self):
        def run():
            basis = build_torus_basis(UNIT_SQUARE, (0.5, 0.0), self.torus_cutoff)
            beta0 = random_smooth_factor(basis, np.random.default_rng(7))
            return minimize(basis, beta0, 2, seed=7)
        return self._cached("torus_k2", run)


def _rel(a: float, b: float) -> float:
    return abs(a - b) / abs(b)


def c01_sphere_ground_truth(ctx: AcceptanceContext):
    t0 = time.perf_counter()
    basis = build_sphere_basis(6)
    beta = ConformalFactor(np.full(basis.n_nodes, (4 * np.pi) ** -0.5), basis.weights)
    value = normalized_eigenvalue(basis, beta, 2, p=2.0)
    dt = time.perf_counter() - t0
    err = abs(value - 2 * SQRT_PI)
    return err <= 1e-9 and dt < 1.0, f"lambda_bar_2={value:.12f} |err|={err:.2e} runtime={dt:.3f}s"


def c02_minimizer_recovery(ctx: AcceptanceContext):
    ok, parts = True, []
    for tr in ctx.sphere_k2_runs():
        v = tr.final_beta.values
        cv = float(v.std() / v.mean())
        lam = tr.estimate["Lambda"]
        good = _rel(lam, 2 * SQRT_PI) <= 0.01 and cv <= 0.02
        ok &= good
        parts.append(f"{lam:.6f}/cv={cv:.1e}")
    return ok, "runs: " + ", ".join(parts)


def c03_non_attainment(ctx: AcceptanceContext):
    tr = ctx.sphere_k4_run()
    target = sphere_value(4)
    lam = tr.estimate["Lambda"]
    in_band = target * 0.98 <= lam <= target * 1.05
    ratio = tr.final.max_local_mass / tr.initial_max_local_mass
    ok = in_band and tr.status is Status.CONCENTRATING and ratio > 3
    return ok, (f"lambda_bar_4={lam:.6f} (+{100 * (lam / target - 1):.2f}%), status={tr.status.value}, "
                f"mass ratio={ratio:.2f}")


def _simple_pair_index(spec, k_max: int, rng) -> int | None:
    ks = [k for k in range(1, k_max + 1) if spec.cluster(k)[1] - spec.cluster(k)[0] == 1]
    return int(rng.choice(ks)) if ks else None


def c04_derivative(ctx: AcceptanceContext):
    rng = np.random.default_rng(2024)
    bases = [build_sphere_basis(6), build_torus_basis(UNIT_SQUARE, (0.5, 0.0), 12.0)]
    worst, count = 0.0, 0
    for basis in bases:
        n = 0
        while n < 10:
            beta = random_smooth_factor(basis, rng, amplitude=0.4)
            b = random_smooth_factor(basis, rng, amplitude=0.8)
            spec = solve(basis, beta, 6)
            k = _simple_pair_index(spec, 6, rng)
            if k is None:
                continue
            exact = directional_derivative(basis, beta, b, k, spectrum=spec)
            fd = finite_difference_derivative(basis, beta, b, k)
            worst = max(worst, _rel(exact, fd))
            n += 1
            count += 1
    return worst <= 1e-3, f"{count} pairs, max relative error {worst:.2e}"


def c05_scale_invariance(ctx: AcceptanceContext):
    rng = np.random.default_rng(5)
    worst = 0.0
    for basis in (build_sphere_basis(6), build_torus_basis(UNIT_SQUARE, (0.5, 0.0), 12.0)):
        for p in (2.0, 2.5):
            beta = random_smooth_factor(basis, rng, p=p)
            ref = solve(basis, beta, 6)
            for c in (0.1, 1.0, 7.0):
                scaled = solve(basis, beta.scaled(c), 6)
                for k in range(1, 7):
                    a = ref.lam(k) * beta.norm(p)
                    b = scaled.lam(k) * beta.scaled(c).norm(p)
                    worst = max(worst, _rel(b, a))
    return worst <= 1e-10, f"max relative deviation {worst:.2e}"


def c06_even_multiplicity(ctx: AcceptanceContext):
    rng = np.random.default_rng(6)
    bases = [build_sphere_basis(6), build_torus_basis(UNIT_SQUARE, (0.5, 0.0), 12.0),
             build_torus_basis(UNIT_SQUARE, (0.0, 0.0), 12.0)]
    odd, checked = 0, 0
    for basis, n in zip(bases, (10, 5, 5)):
        for _ in range(n):
            spec = solve(basis, random_smooth_factor(basis, rng, amplitude=0.6), 8, cluster_tol=1e-6)
            sizes = {spec.cluster(k) for k in range(1, 9)}
            checked += len(sizes)
            odd += sum((I - i + 1) % 2 for i, I in sizes)
    return odd == 0, f"{checked} clusters checked, {odd} of odd size"


def c07_kernel(ctx: AcceptanceContext):
    b0 = build_torus_basis(UNIT_SQUARE, (0.0, 0.0), 12.0)
    one0 = ConformalFactor(np.ones(b0.n_nodes), b0.weights)
    s0 = solve(b0, one0, 1)
    bh = build_torus_basis(UNIT_SQUARE, (0.5, 0.0), 12.0)
    lam1 = normalized_eigenvalue(bh, ConformalFactor(np.ones(bh.n_nodes), bh.weights), 1, p=2.0)
    ok = s0.kernel_dim == 2 and b0.kernel_dim == 2 and s0.lam(1) > 0 and abs(lam1 - np.pi) <= 1e-9
    return ok, f"kernel_dim={s0.kernel_dim}, lambda_1={s0.lam(1):.6f}; spin (1/2,0): lambda_bar_1-pi={lam1 - np.pi:.1e}"


@functools.lru_cache(maxsize=None)
def _partitions(m: int, largest: int | None = None) -> tuple:
    """Partitions of m into positive parts, nonincreasing."""
    largest = m if largest is None else largest
    if m == 0:
        return ((),)
    return tuple((part,) + rest for part in range(min(m, largest), 0, -1) for rest in _partitions(m - part, part))


def enumerate_aubin(k: int, m_values: dict, table: SphereTable, n: int = 2, restricted: bool = False) -> float:
    best = math.inf
    for l0, (value, attained) in m_values.items():
        if l0 >= k:
            continue
        if l0 > 0 and restricted and not attained:
            continue
        base = 0.0 if l0 == 0 else value ** n
        powers = {l: table.value(l) ** n for l in range(1, k + 1)}
        for parts in _partitions(k - l0):
            if restricted and not all(table.is_attained(l) for l in parts):
                continue
            best = min(best, base + sum(powers[l] for l in parts))
    return best ** (1.0 / n) if math.isfinite(best) else math.nan


def c08_aubin(ctx: AcceptanceContext):
    rng = np.random.default_rng(8)
    m_vals = np.sort(rng.uniform(2.0, 12.0, size=12))
    mismatches, configs = 0, 0
    for k in range(1, 13):
        for flag_bits in range(1 << k):
            table = SphereTable(attained=frozenset(l for l in range(1, k + 1) if flag_bits >> (l - 1) & 1))
            m_flags = (flag_bits * 2654435761) >> 3  # pseudo-random M attainment pattern
            m_values = {0: (0.0, True)}
            m_values.update({l: (float(m_vals[l - 1]), bool(m_flags >> l & 1)) for l in range(1, k + 1)})
            for restricted in (False, True):
                oracle = enumerate_aubin(k, m_values, table, restricted=restricted)
                try:
                    got = aubin_bound(k, m_values, sphere_table=table, restricted=restricted)
                    value = got.value
                    recomputed = sum(t.value ** 2 for t in got.terms) ** 0.5
                    if abs(recomputed - value) > 1e-12 * value:
                        mismatches += 1
                except ValueError:
                    value = math.nan
                configs += 1
                if not (math.isnan(value) and math.isnan(oracle)) and not abs(value - oracle) <= 1e-12 * oracle:
                    mismatches += 1
    s2 = aubin_bound(4, {0: (0.0, True), 2: (2 * SQRT_PI, True)})
    exact = abs(s2.value - 2 * math.sqrt(2 * math.pi)) <= 1e-12
    return mismatches == 0 and exact, (f"{configs} configurations, {mismatches} mismatches; "
                                       f"S^2 k=4 bound {s2.value:.12f} via {s2.partition}")


def c09_strict_gap(ctx: AcceptanceContext):
    table_report = gap_check({2: (ctx.sphere_table.value(2), 0.0), 4: (ctx.sphere_table.value(4), 0.0)})
    k2 = ctx.sphere_k2_runs()[0].estimate
    k4 = ctx.sphere_k4_run().estimate
    measured = gap_check({2: (k2["Lambda"], k2["error_bar"]), 4: (k4["Lambda"], k4["error_bar"])})
    ok = bool(table_report) and bool(measured)
    return ok, (f"table {table_report.verdict.value}; measured {k2['Lambda']:.6f}+-{k2['error_bar']:.1e} vs "
                f"{k4['Lambda']:.6f}+-{k4['error_bar']:.1e}: {measured.verdict.value}")


def c10_friedrich(ctx: AcceptanceContext):
    basis = build_sphere_basis(6)
    one = ConformalFactor(np.ones(basis.n_nodes), basis.weights)
    spec = solve(basis, one, 2)
    err = abs(spec.lam(1) ** 2 - 1.0)
    res = friedrich_check(spec, basis.surface, one)
    return err <= 1e-9 and bool(res), f"lambda_1^2-1={err:.1e}, check {res.result.value}"


def c11_sobolev(ctx: AcceptanceContext):
    basis = build_sphere_basis(6)
    eps = 0.1
    results = [sobolev_probe(basis, eps, 10_000, seed) for seed in (0, 1, 2)]
    one = ConformalFactor(np.ones(basis.n_nodes), basis.weights)
    first = solve(basis, one, 1).eigenvectors[:, :1]
    lhs, a, _ = sobolev_sides(basis, first)
    ratio = float(lhs[0] / a[0])
    ok = all(r.violations == 0 for r in results) and ratio <= SOBOLEV_K2 + eps
    return ok, (f"violations {[r.violations for r in results]}, B_eps {[round(r.b_eps, 6) for r in results]}, "
                f"first eigenspinor ratio {ratio:.6f} (K={SOBOLEV_K2:.6f})")


def c12_nodal_bound(ctx: AcceptanceContext):
    runs = [(tr, 0) for tr in ctx.sphere_k2_runs()] + [(ctx.sphere_k4_run(), 0), (ctx.torus_k2_run(), 1)]
    converged = [(tr, g) for tr, g in runs if tr.status is Status.CONVERGED]
    bad = [tr for tr, g in converged if tr.final.zero_count > g - 1 + tr.k / 2]
    counts = [tr.final.zero_count for tr, _ in converged]
    return bool(converged) and not bad, f"{len(converged)} converged runs, zero counts {counts}"


CRITERIA = {
    "sphere_ground_truth": (1, c01_sphere_ground_truth),
    "minimizer_recovery": (2, c02_minimizer_recovery),
    "non_attainment": (3, c03_non_attainment),
    "derivative": (4, c04_derivative),
    "scale_invariance": (5, c05_scale_invariance),
    "even_multiplicity": (6, c06_even_multiplicity),
    "kernel": (7, c07_kernel),
    "aubin": (8, c08_aubin),
    "strict_gap": (9, c09_strict_gap),
    "friedrich": (10, c10_friedrich),
    "sobolev": (11, c11_sobolev),
    "nodal_bound": (12, c12_nodal_bound),
}

INJECTIONS = {
    "wrong-sphere-table": lambda ctx: setattr(ctx, "sphere_table", SphereTable(overrides={4: sphere_value(2)})),
}


def run_criterion(key: str, ctx: AcceptanceContext) -> CriterionResult:
    number, fn = CRITERIA[key]
    t0 = time.perf_counter()
    try:
        passed, detail = fn(ctx)
        return CriterionResult(number, key, bool(passed), detail, time.perf_counter() - t0)
    except Exception as exc:  # collected, never short-circuits the suite
        return CriterionResult(number, key, False, f"error: {exc!r}", time.perf_counter() - t0,
                               error=traceback.format_exc())


def run_acceptance(only=None, inject: str | None = None, workers: int = 1,
                   ctx: AcceptanceContext | None = None) -> list:
    ctx = AcceptanceContext() if ctx is None else ctx
    if inject is not None:
        # the copy shares the run cache, so injected faults never leak back into ``ctx``
        ctx = dataclasses.replace(ctx)
        INJECTIONS[inject](ctx)
    keys = list(CRITERIA) if not only else list(only)
    unknown = [k for k in keys if k not in CRITERIA]
    if unknown:
        raise KeyError(f"unknown criteria {unknown}; choose from {list(CRITERIA)}")
    if workers <= 1:
        return [run_criterion(k, ctx) for k in keys]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda k: run_criterion(k, ctx), keys))


def format_matrix(results) -> str:
    lines = [r.line() for r in results]
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} criteria passed")
    return "\n".join(lines) + "\n"
