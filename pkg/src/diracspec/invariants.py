"""Conformal invariants of the Dirac spectrum: the round-sphere table, the
Aubin-type partition bound, strict-gap verdicts, the Friedrich check and an
empirical probe of the L^{4/3} Sobolev-type inequality.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import ConformalFactor, SpectralBasis, SurfaceSpec
from .spectrum import WeightedSpectrum, solve

SOBOLEV_K2 = 1.0 / (2.0 * math.sqrt(math.pi))


def sphere_value(k: int) -> float:
    """Lambda_k of the round 2-sphere: 2 sqrt(ceil(k/2) pi)."""
    if int(k) != k or k < 1:
        raise ValueError(f"sphere index must be a positive integer, got {k!r}")
    return 2.0 * math.sqrt(math.ceil(k / 2) * math.pi)


@dataclass(frozen=True)
class SphereTable:
    """Lambda_k(S^2) with attainment flags; ``overrides`` replaces individual values."""

    attained: frozenset = frozenset({1, 2})
    overrides: Mapping[int, float] = field(default_factory=dict)

    def value(self, k: int) -> float:
        return float(self.overrides.get(k, sphere_value(k)))

    def is_attained(self, k: int) -> bool:
        return k in self.attained

    def as_dict(self, k_max: int) -> dict:
        return {k: (self.value(k), self.is_attained(k)) for k in range(1, k_max + 1)}


@dataclass(frozen=True)
class AubinTerm:
    source: str  # "M" or "S^n"
    index: int
    value: float


@dataclass(frozen=True)
class AubinBound:
    k: int
    n: int
    value: float
    l0: int
    parts: tuple
    terms: tuple
    restricted: bool = False

    @property
    def partition(self) -> tuple:
        return (self.l0, *self.parts)


def _better(a: tuple, b: tuple | None, rtol: float = 1e-12) -> bool:
    """Lexicographic (power sum, -part count, l0) with a relative tie tolerance on the sum."""
    if b is None:
        return True
    if a[0] < b[0] - rtol * max(abs(b[0]), 1.0):
        return True
    if a[0] > b[0] + rtol * max(abs(b[0]), 1.0):
        return False
    return a[1:] < b[1:]


def aubin_bound(k: int, m_values: Mapping[int, tuple], n: int = 2, sphere_table: SphereTable | None = None,
                restricted: bool = False) -> AubinBound:
    """Minimize Lambda_{l0}(M)^n + sum_i Lambda_{l_i}(S^n)^n over l0 + l_1 + ... + l_r = k, l0 < k.

    ``m_values`` maps l0 to (Lambda_{l0}(M) estimate, attained flag) and must
    contain l0 = 0. With ``restricted`` the M term must be l0 = 0 or attained,
    and only attained sphere indices may be used.
    """
    if 0 not in m_values:
        raise ValueError("m_values must contain the l0 = 0 entry")
    if k < 1:
        raise ValueError("k must be positive")
    table = SphereTable() if sphere_table is None else sphere_table
    allowed = [l for l in range(1, k + 1) if not restricted or table.is_attained(l)]

    # best[m] = (power sum, -parts, 0) and the part used last
    best: list = [None] * (k + 1)
    last = [0] * (k + 1)
    best[0] = (0.0, 0, 0)
    for m in range(1, k + 1):
        for l in allowed:
            if l > m or best[m - l] is None:
                continue
            prev = best[m - l]
            cand = (table.value(l) ** n + prev[0], prev[1] - 1, 0)
            if _better(cand, best[m]):
                best[m], last[m] = cand, l

    choice = None
    for l0, entry in sorted(m_values.items()):
        value, attained = (entry if isinstance(entry, tuple) else (entry, False))
        if l0 >= k or best[k - l0] is None:
            continue
        if l0 == 0:
            value = 0.0
        elif restricted and not attained:
            continue
        rest = best[k - l0]
        cand = (value ** n + rest[0], rest[1], l0)
        if _better(cand, choice):
            choice = cand
    if choice is None:
        raise ValueError("no admissible partition")

    l0 = choice[2]
    parts = []
    m = k - l0
    while m > 0:
        parts.append(last[m])
        m -= last[m]
    parts = tuple(sorted(parts))
    terms = []
    if l0 > 0:
        v = m_values[l0]
        terms.append(AubinTerm("M", l0, float(v[0] if isinstance(v, tuple) else v)))
    terms += [AubinTerm("S^n", l, table.value(l)) for l in parts]
    return AubinBound(k=k, n=n, value=choice[0] ** (1.0 / n), l0=l0, parts=parts, terms=tuple(terms),
                      restricted=restricted)


def aubin_variants(k: int, m_values: Mapping[int, tuple], n: int = 2,
                   sphere_table: SphereTable | None = None) -> dict:
    """Both the plain upper bound and the attained-restricted existence threshold."""
    out = {"plain": aubin_bound(k, m_values, n, sphere_table, restricted=False)}
    try:
        out["restricted"] = aubin_bound(k, m_values, n, sphere_table, restricted=True)
    except ValueError:
        out["restricted"] = None
    return out


class GapVerdict(str, enum.Enum):
    STRICT = "Strict"
    INCONCLUSIVE = "Inconclusive"
    VIOLATED = "Violated"


@dataclass
class GapReport:
    pairs: list  # (k, k_next, verdict)
    verdict: GapVerdict

    def __bool__(self) -> bool:
        return self.verdict is GapVerdict.STRICT


def gap_check(estimates: Mapping[int, tuple]) -> GapReport:
    """Compare consecutive even-index estimates (value, error bar) for a strict increase."""
    even = sorted(k for k in estimates if k % 2 == 0)
    if len(even) < 2:
        raise ValueError("gap_check needs at least two even indices")
    pairs = []
    for a, b in zip(even, even[1:]):
        va, ea = estimates[a]
        vb, eb = estimates[b]
        if va + ea < vb - eb:
            v = GapVerdict.STRICT
        elif va - ea > vb + eb:
            v = GapVerdict.VIOLATED
        else:
            v = GapVerdict.INCONCLUSIVE
        pairs.append((a, b, v))
    verdicts = {v for _, _, v in pairs}
    if GapVerdict.VIOLATED in verdicts:
        overall = GapVerdict.VIOLATED
    elif GapVerdict.INCONCLUSIVE in verdicts:
        overall = GapVerdict.INCONCLUSIVE
    else:
        overall = GapVerdict.STRICT
    return GapReport(pairs, overall)


class CheckResult(str, enum.Enum):
    PASS = "Pass"
    FAIL = "Fail"
    NOT_APPLICABLE = "NotApplicable"


@dataclass
class FriedrichResult:
    result: CheckResult
    bound: float
    min_lambda_sq: float

    def __bool__(self) -> bool:
        return self.result is not CheckResult.FAIL


def friedrich_check(spectrum: WeightedSpectrum, surface: SurfaceSpec, beta: ConformalFactor | None = None,
                    tol: float = 1e-9, n: int = 2) -> FriedrichResult:
    """lambda^2 >= n/(4(n-1)) min S for the metric beta^2 g; only constant beta has a known min S."""
    lam_sq = float(np.min(spectrum.eigenvalues ** 2))
    scale = 1.0
    if beta is not None:
        v = beta.values
        if v.max() - v.min() > 1e-12 * v.max():
            return FriedrichResult(CheckResult.NOT_APPLICABLE, float("nan"), lam_sq)
        scale = float(v.mean()) ** 2
    bound = n / (4.0 * (n - 1)) * surface.min_scalar_curvature / scale
    ok = lam_sq >= bound - tol * max(bound, 1.0)
    return FriedrichResult(CheckResult.PASS if ok else CheckResult.FAIL, bound, lam_sq)


def normalized_eigenvalue(basis: SpectralBasis, beta: ConformalFactor, k: int, p: float | None = None) -> float:
    """lambda_k(beta) ||beta||_{L^p}."""
    p = beta.p if p is None else p
    return solve(basis, beta, k).lam(k) * beta.norm(p)


@dataclass
class SobolevResult:
    samples: int
    b_eps: float
    violations: int
    max_ratio: float  # max |int <D phi, phi>| / ||D phi||^2_{4/3} over samples


def sobolev_sides(basis: SpectralBasis, coeffs: np.ndarray):
    """(|int <D phi, phi>|, ||D phi||^2_{L^{4/3}}, ||phi||^2_{L^{4/3}}) per column of coeffs."""
    c = np.atleast_2d(np.asarray(coeffs).T).T
    lhs = np.abs(np.einsum("m,mr->r", basis.mu, np.abs(c) ** 2))

    def l43_sq(field):
        pt = np.sqrt(np.sum(np.abs(field) ** 2, axis=-1))
        return np.dot(basis.weights, pt ** (4.0 / 3.0)) ** 1.5

    dphi = basis.synthesize(basis.mu[:, None] * c)
    phi = basis.synthesize(c)
    return lhs, l43_sq(dphi), l43_sq(phi)


def sobolev_probe(basis: SpectralBasis, eps: float, sample_count: int, seed: int,
                  K: float = SOBOLEV_K2, batch: int = 500) -> SobolevResult:
    """Calibrate B_eps on random spinors and recount violations at 1.01 B_eps."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    M = basis.n_modes
    sides = []
    for s in range(0, sample_count, batch):
        r = min(batch, sample_count - s)
        # random spectral decay so that low modes dominate a fair share of samples
        decay = rng.uniform(0.0, 3.0, size=r)
        amp = (1.0 + np.abs(basis.mu))[:, None] ** (-decay[None, :])
        c = (rng.normal(size=(M, r)) + 1j * rng.normal(size=(M, r))) * amp
        # half the samples live on the positive spectrum, where the left side cannot cancel
        one_sided = rng.random(r) < 0.5
        c[np.ix_(basis.mu < 0, one_sided)] = 0.0
        sides.append(sobolev_sides(basis, c))
    lhs = np.concatenate([x[0] for x in sides])
    a = np.concatenate([x[1] for x in sides])
    b = np.concatenate([x[2] for x in sides])
    need = (lhs - (K + eps) * a) / b
    b_eps = max(0.0, float(need.max()))
    violations = int(np.count_nonzero(lhs > (K + eps) * a + 1.01 * b_eps * b))
    ratio = lhs / np.where(a > 0, a, np.inf)
    return SobolevResult(samples=int(lhs.size), b_eps=b_eps, violations=violations, max_ratio=float(ratio.max()))


@dataclass
class ReportRow:
    k: int
    Lambda: float
    error_bar: float
    aubin: float | None = None
    gap: str | None = None


def emit_report(rows: Sequence[ReportRow], path: str | Path | None = None, run_id: str | None = None) -> str:
    """Plain-text table at 17 significant digits; also writes a JSON summary next to ``path``."""
    lines = ["# k Lambda error_bar aubin gap"]
    for r in rows:
        aub = "nan" if r.aubin is None else "%.17g" % r.aubin
        lines.append("%d %.17g %.17g %s %s" % (r.k, r.Lambda, r.error_bar, aub, r.gap or "-"))
    text = "\n".join(lines) + "\n"
    if path is not None:
        path = Path(path)
        path.write_text(text)
        summary = {"run_id": run_id, "rows": [asdict(r) for r in rows]}
        path.with_suffix(".json").write_text(json.dumps(summary, indent=2))
    return text
