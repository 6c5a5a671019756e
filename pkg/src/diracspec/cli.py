"""Command-line front end: ``diracspec spectrum | minimize | verify | plotdata``.

Runs are described by a single JSON config; ``--set path=value`` overrides
individual fields. Artifacts land in ``$DIRACSPEC_OUTPUT_ROOT/<run_id>``
(default root ``./runs``).

Exit codes: 0 success, 1 acceptance failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import (ConformalFactor, GeometryError, SpectralBasis, SurfaceSpec, build_sphere_basis,
                       build_torus_basis)
from .spectrum import format_table, solve, write_spectrum
from .variation import DEFAULT_P_SCHEDULE, MinimizeParams, minimize, random_smooth_factor

OUTPUT_ROOT_ENV = "DIRACSPEC_OUTPUT_ROOT"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("diracspec")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class SurfaceConfig:
    kind: str = "RoundSphere"
    lattice: list | None = None
    spin_structure: list | None = None


@dataclass
class BasisConfig:
    cutoff: float = 6
    grid_resolution: int | None = None


@dataclass
class InitialConfig:
    kind: str = "random"  # random | constant | bump
    amplitude: float = 0.3
    degree: int = 3
    axisymmetric: bool = False


@dataclass
class OptimizerConfig:
    theta: float = 0.5
    el_tol: float = 1e-6
    val_tol: float = 1e-10
    max_iters: int = 300
    floor_rel: float = 1e-6
    delta_schedule: list = field(default_factory=lambda: [1e-4, 1e-5, 1e-6])
    weight_rule: str = "nnls"
    concentration_window: int = 50
    checkpoint_every: int = 10
    seed: int = 0


@dataclass
class OutputConfig:
    run_id: str | None = None
    formats: list = field(default_factory=lambda: ["json", "txt"])


@dataclass
class RunConfig:
    surface: SurfaceConfig = field(default_factory=SurfaceConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    k: int = 2
    p_schedule: list = field(default_factory=lambda: list(DEFAULT_P_SCHEDULE))
    initial: InitialConfig = field(default_factory=InitialConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = _build(cls, data, "")
        validate(cfg)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def run_id(self) -> str:
        if self.output.run_id:
            return self.output.run_id
        body = {k: v for k, v in self.to_dict().items() if k != "output"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]


_NESTED = {"surface": SurfaceConfig, "basis": BasisConfig, "initial": InitialConfig,
           "optimizer": OptimizerConfig, "output": OutputConfig}


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}{key}", "unknown field")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(key) if cls is RunConfig else None
        kwargs[key] = _build(sub, value, f"{key}.") if sub is not None else value
    return cls(**kwargs)


def _require(cond: bool, path: str, message: str):
    if not cond:
        raise ConfigError(path, message)


def _positive(value, path: str, integer: bool = False):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value) and value > 0
    if integer:
        ok = ok and float(value).is_integer()
    _require(ok, path, "must be a positive " + ("integer" if integer else "number"))


def validate(cfg: RunConfig) -> None:
    s = cfg.surface
    _require(s.kind in ("RoundSphere", "FlatTorus"), "surface.kind", "must be RoundSphere or FlatTorus")
    if s.kind == "FlatTorus":
        _require(s.lattice is not None, "surface.lattice", "required for FlatTorus")
        try:
            SurfaceSpec.flat_torus(s.lattice, s.spin_structure or (0.0, 0.0))
        except (GeometryError, ValueError, TypeError) as exc:
            path = "surface.spin_structure" if "spin" in str(exc) else "surface.lattice"
            raise ConfigError(path, str(exc)) from exc
    _positive(cfg.basis.cutoff, "basis.cutoff", integer=s.kind == "RoundSphere")
    if cfg.basis.grid_resolution is not None:
        _positive(cfg.basis.grid_resolution, "basis.grid_resolution", integer=True)
    _positive(cfg.k, "k", integer=True)
    ps = cfg.p_schedule
    _require(isinstance(ps, list) and len(ps) > 0, "p_schedule", "must be a nonempty list")
    _require(all(isinstance(p, (int, float)) and p >= 2 for p in ps), "p_schedule", "entries must be >= 2")
    _require(all(b < a for a, b in zip(ps, ps[1:])), "p_schedule", "must be strictly decreasing")
    _require(cfg.initial.kind in ("random", "constant", "bump"), "initial.kind", "must be random, constant or bump")
    o = cfg.optimizer
    _require(isinstance(o.theta, (int, float)) and 0 < o.theta <= 1, "optimizer.theta", "must lie in (0, 1]")
    for name in ("el_tol", "val_tol", "floor_rel"):
        _positive(getattr(o, name), f"optimizer.{name}")
    _positive(o.max_iters, "optimizer.max_iters", integer=True)
    _positive(o.concentration_window, "optimizer.concentration_window", integer=True)
    _require(isinstance(o.delta_schedule, list) and o.delta_schedule, "optimizer.delta_schedule", "must be a nonempty list")
    for i, d in enumerate(o.delta_schedule):
        _positive(d, f"optimizer.delta_schedule[{i}]")
    _require(o.weight_rule in ("nnls", "uniform"), "optimizer.weight_rule", "must be nnls or uniform")
    _require(isinstance(o.seed, int) and not isinstance(o.seed, bool), "optimizer.seed", "must be an integer")
    _require(isinstance(o.checkpoint_every, int) and o.checkpoint_every >= 0, "optimizer.checkpoint_every",
             "must be a nonnegative integer")


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` (value parsed as JSON, else kept as a string) to a config dict."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like path=value")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    keys = path.split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(path, "cannot descend into a scalar")
    node[keys[-1]] = value


def load_config(path: str | None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError("<config>", f"file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("<config>", f"invalid JSON: {exc}") from exc
    for a in overrides:
        apply_override(data, a)
    return RunConfig.from_dict(data)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def build_basis(cfg: RunConfig) -> SpectralBasis:
    s = cfg.surface
    if s.kind == "RoundSphere":
        return build_sphere_basis(int(cfg.basis.cutoff), cfg.basis.grid_resolution)
    return build_torus_basis(s.lattice, s.spin_structure or (0.0, 0.0), float(cfg.basis.cutoff),
                             cfg.basis.grid_resolution)


def initial_factor(cfg: RunConfig, basis: SpectralBasis) -> ConformalFactor:
    ini = cfg.initial
    if ini.kind == "constant":
        return ConformalFactor(np.ones(basis.n_nodes), basis.weights).normalized()
    if ini.kind == "bump":
        if basis.surface.is_sphere:
            v = 1.0 + ini.amplitude * np.cos(basis.nodes[:, 0])
        else:
            frac = basis.nodes @ np.linalg.inv(np.asarray(basis.surface.lattice))
            v = 1.0 + ini.amplitude * np.cos(2 * np.pi * frac[:, 0])
        return ConformalFactor(v, basis.weights).normalized()
    rng = np.random.default_rng(cfg.optimizer.seed)
    return random_smooth_factor(basis, rng, ini.amplitude, ini.degree, ini.axisymmetric)


def minimize_params(cfg: RunConfig) -> MinimizeParams:
    o = cfg.optimizer
    return MinimizeParams(theta=o.theta, el_tol=o.el_tol, val_tol=o.val_tol, max_iters=int(o.max_iters),
                          floor_rel=o.floor_rel, delta_schedule=tuple(o.delta_schedule), weight_rule=o.weight_rule,
                          concentration_window=int(o.concentration_window), checkpoint_every=o.checkpoint_every)


def _run_dir(cfg: RunConfig, out: str | None) -> Path:
    d = Path(out) if out else output_root() / cfg.run_id()
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(cfg.to_json())
    return d


def cmd_spectrum(cfg: RunConfig, out: str | None = None) -> int:
    basis = build_basis(cfg)
    beta = ConformalFactor(np.ones(basis.n_nodes), basis.weights).normalized()
    spec = solve(basis, beta, int(cfg.k))
    d = _run_dir(cfg, out)
    write_spectrum(spec, d / "spectrum.json", header={"run_id": cfg.run_id(), "surface": basis.surface.to_dict()})
    table = format_table(spec)
    (d / "spectrum.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def _summary(trace, cfg: RunConfig) -> dict:
    est = trace.estimate
    return {
        "run_id": cfg.run_id(),
        "seed": cfg.optimizer.seed,
        "k": trace.k,
        "Lambda": est.get("Lambda"),
        "error_bar": est.get("error_bar"),
        "extrapolated": est.get("extrapolated"),
        "status": trace.status.value,
        "zero_count": est.get("zero_count"),
        "concentration_flags": est.get("concentration_flags"),
        "max_local_mass": est.get("max_local_mass"),
        "initial_max_local_mass": trace.initial_max_local_mass,
        "iterations": len(trace.iterations),
    }


def cmd_minimize(cfg: RunConfig, out: str | None = None, resume: bool = False, stop_after: int | None = None) -> int:
    basis = build_basis(cfg)
    beta0 = initial_factor(cfg, basis)
    d = _run_dir(cfg, out)
    ckpt = d / "checkpoint.npz"
    trace = minimize(basis, beta0, int(cfg.k), cfg.p_schedule, minimize_params(cfg), checkpoint_path=ckpt,
                     resume=resume, seed=cfg.optimizer.seed, stop_after=stop_after)
    trace.write_jsonl(d / "trace.jsonl")
    if stop_after is not None and not trace.estimate:
        sys.stdout.write(f"interrupted after {len(trace.iterations)} iterations; checkpoint {ckpt}\n")
        return EXIT_OK
    np.savez(d / "beta.npz", nodes=basis.nodes, beta=trace.final_beta.values, weights=basis.weights)
    summary = _summary(trace, cfg)
    (d / "summary.json").write_text(json.dumps(summary, indent=2))
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def cmd_verify(only=None, inject=None, workers: int = 1, out: str | None = None, ctx=None) -> int:
    from .acceptance import format_matrix, run_acceptance

    results = run_acceptance(only=only, inject=inject, workers=workers, ctx=ctx)
    text = format_matrix(results)
    sys.stdout.write(text)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "verify.txt").write_text(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def _write_columns(path: Path, header: str, rows) -> None:
    with path.open("w") as fh:
        fh.write("# " + header + "\n")
        for row in rows:
            fh.write(" ".join("%.17g" % v if isinstance(v, float) else str(v) for v in row) + "\n")


def cmd_plotdata(run_id: str, root: str | None = None) -> int:
    d = (Path(root) if root else output_root()) / run_id
    if not d.is_dir():
        raise FileNotFoundError(f"no run directory for run id {run_id!r} under {d.parent}")
    written = []
    if (d / "beta.npz").exists():
        with np.load(d / "beta.npz") as data:
            nodes, beta = data["nodes"], data["beta"]
        _write_columns(d / "beta.dat", "x0 x1 beta", ((float(a), float(b), float(v)) for (a, b), v in zip(nodes, beta)))
        written.append("beta.dat")
    if (d / "trace.jsonl").exists():
        recs = [json.loads(line) for line in (d / "trace.jsonl").read_text().splitlines() if line]
        _write_columns(d / "trace.dat", "iter p lambda_bar lambda_bar_l2 el_residual max_local_mass",
                       ((r["iter"], float(r["p"]), float(r["lambda_bar"]), float(r["lambda_bar_l2"]),
                         float(r["el_residual"]), float(r["max_local_mass"])) for r in recs))
        written.append("trace.dat")
    if (d / "spectrum.json").exists():
        spec = json.loads((d / "spectrum.json").read_text())
        _write_columns(d / "spectrum.dat", "k lambda",
                       ((r["k"], float(r["lambda"])) for r in spec["records"]))
        written.append("spectrum.dat")
    if not written:
        raise FileNotFoundError(f"run {run_id!r} has no artifacts")
    sys.stdout.write("\n".join(str(d / w) for w in written) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diracspec", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE", help="override a config field")
        p.add_argument("--out", help="output directory (default: output root / run id)")

    p = sub.add_parser("spectrum", help="solve the spectrum for the normalized constant factor")
    config_args(p)
    p = sub.add_parser("minimize", help="run the normalized-eigenvalue minimizer")
    config_args(p)
    p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    p.add_argument("--stop-after", type=int, help="interrupt after this many iterations")
    p = sub.add_parser("verify", help="run the acceptance suite")
    p.add_argument("--only", action="append", help="criterion key (repeatable)")
    p.add_argument("--inject", choices=["wrong-sphere-table"], help="fault injection")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p = sub.add_parser("plotdata", help="export columnar plot data for a run")
    p.add_argument("run_id")
    p.add_argument("--root", help="output root (default: $%s or ./runs)" % OUTPUT_ROOT_ENV)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "spectrum":
            return cmd_spectrum(load_config(args.config, args.set), args.out)
        if args.command == "minimize":
            return cmd_minimize(load_config(args.config, args.set), args.out, args.resume, args.stop_after)
        if args.command == "verify":
            return cmd_verify(args.only, args.inject, args.workers, args.out)
        return cmd_plotdata(args.run_id, args.root)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
