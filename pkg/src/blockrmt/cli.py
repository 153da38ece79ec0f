"""Command-line front end.

Configuration is a YAML file with the sections ``model``, ``density``,
``quantiles``, ``ensemble``, ``local_law``, ``loop``, ``flow``, ``output``
and ``parallel``. Command-line flags override the file; the environment
variables ``BLOCKRMT_OUT`` and ``BLOCKRMT_WORKERS`` override the output
directory and worker count (flags still win).

Exit codes: 0 success, 2 configuration error, 3 solver error, 4 failed
verification.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, checks, dyson, ensemble, flow, tw
from .errors import (ArgumentError, BlockRMTError, ConstructionError, DomainError, EnsembleError,
                     InputError, SolverError)
from .model import DISTRIBUTIONS, CouplingSpec

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class ModelSection:
    N: int = 100
    D: int = 2
    coupling: dict = field(default_factory=lambda: {"kind": "scalar", "lam": 0.1})
    dist: str = "complex_gaussian"
    seed: int = 0


@dataclass
class DensitySection:
    E_min: float | None = None
    E_max: float | None = None
    points: int = 101
    method: str = "curve"


@dataclass
class QuantileSection:
    k: list | None = None


@dataclass
class EnsembleSection:
    n_samples: int = 100
    eigenvectors: str = "none"
    k_select: list = field(default_factory=lambda: [1])
    eigs_H: bool = False
    paired_k_max: int = 20
    sidecar: bool = False


@dataclass
class LocalLawSection:
    energies: list = field(default_factory=lambda: [0.0])
    etas: list = field(default_factory=lambda: [0.1, 0.01])
    n_samples: int = 20


@dataclass
class LoopSection:
    k: list = field(default_factory=lambda: [1, 8])
    eps: float = 0.1
    n_samples: int = 100


@dataclass
class FlowSection:
    z0: list = field(default_factory=lambda: [[0.5, 0.3]])
    t_end: float = 3.0
    scaling: str = "linear"


@dataclass
class OutputSection:
    directory: str = "out"
    format: str = "csv"


@dataclass
class ParallelSection:
    workers: int = 1


SECTIONS = {
    "model": ModelSection, "density": DensitySection, "quantiles": QuantileSection,
    "ensemble": EnsembleSection, "local_law": LocalLawSection, "loop": LoopSection,
    "flow": FlowSection, "output": OutputSection, "parallel": ParallelSection,
}


@dataclass
class RunConfig:
    """Complete, explicit configuration of a CLI run."""

    model: ModelSection = field(default_factory=ModelSection)
    density: DensitySection = field(default_factory=DensitySection)
    quantiles: QuantileSection = field(default_factory=QuantileSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    local_law: LocalLawSection = field(default_factory=LocalLawSection)
    loop: LoopSection = field(default_factory=LoopSection)
    flow: FlowSection = field(default_factory=FlowSection)
    output: OutputSection = field(default_factory=OutputSection)
    parallel: ParallelSection = field(default_factory=ParallelSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = {} if d is None else d
        if not isinstance(d, dict):
            raise InputError("configuration must be a mapping of sections")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise InputError(f"unknown config sections {sorted(unknown)}")
        kwargs = {}
        for name, section in SECTIONS.items():
            raw = d.get(name)
            raw = {} if raw is None else raw
            if not isinstance(raw, dict):
                raise InputError(f"section {name!r} must be a mapping")
            names = {f.name for f in dataclasses.fields(section)}
            extra = set(raw) - names
            if extra:
                raise InputError(f"unknown fields {sorted(extra)} in section {name!r}")
            kwargs[name] = section(**raw)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise InputError(f"cannot parse config: {exc}") from None
        return cls.from_dict(data)

    def coupling_spec(self) -> CouplingSpec:
        d = dict(self.model.coupling)
        d.setdefault("N", self.model.N)
        if d["N"] != self.model.N:
            raise InputError(f"coupling N={d['N']} differs from model N={self.model.N}")
        return CouplingSpec.from_dict(d)

    def validate(self) -> None:
        m = self.model
        for name, val in (("N", m.N), ("D", m.D)):
            if not isinstance(val, int) or val < 1:
                raise InputError(f"model.{name} must be a positive integer, got {val!r}")
        if m.dist not in DISTRIBUTIONS:
            raise InputError(f"model.dist must be one of {DISTRIBUTIONS}, got {m.dist!r}")
        self.coupling_spec()
        if self.output.format not in ("csv", "jsonl"):
            raise InputError(f"output.format must be csv or jsonl, got {self.output.format!r}")
        if self.parallel.workers < 1:
            raise InputError("parallel.workers must be >= 1")
        if self.ensemble.eigenvectors not in ("none", "selected", "all"):
            raise InputError("ensemble.eigenvectors must be none, selected or all")
        if self.density.method not in ("curve", "ladder"):
            raise InputError("density.method must be curve or ladder")
        if self.flow.scaling not in flow.SCALINGS:
            raise InputError(f"flow.scaling must be one of {sorted(flow.SCALINGS)}")
        if self.density.points < 2:
            raise InputError("density.points must be >= 2")

    def ensemble_config(self, **overrides) -> ensemble.EnsembleConfig:
        e, m = self.ensemble, self.model
        kw = dict(N=m.N, D=m.D, coupling=self.coupling_spec(), dist=m.dist, seed=m.seed,
                  n_samples=e.n_samples, eigenvectors=e.eigenvectors, k_select=tuple(e.k_select),
                  eigs_H=e.eigs_H, paired_k_max=e.paired_k_max, workers=self.parallel.workers)
        kw.update(overrides)
        return ensemble.EnsembleConfig(**kw)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    return RunConfig.from_yaml(text)


def apply_overrides(cfg: RunConfig, args, environ=None) -> RunConfig:
    """Environment first, then explicit flags."""
    environ = os.environ if environ is None else environ
    if environ.get("BLOCKRMT_OUT"):
        cfg.output.directory = environ["BLOCKRMT_OUT"]
    if environ.get("BLOCKRMT_WORKERS"):
        try:
            cfg.parallel.workers = int(environ["BLOCKRMT_WORKERS"])
        except ValueError:
            raise InputError(f"BLOCKRMT_WORKERS must be an integer, got {environ['BLOCKRMT_WORKERS']!r}") from None
    if getattr(args, "seed", None) is not None:
        cfg.model.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.parallel.workers = args.workers
    if getattr(args, "out", None) is not None:
        cfg.output.directory = args.out
    if getattr(args, "format", None) is not None:
        cfg.output.format = args.format
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------

class Output:
    """Writes tables, JSON documents and plot descriptions into one directory."""

    def __init__(self, cfg: RunConfig):
        self.dir = Path(cfg.output.directory)
        self.fmt = cfg.output.format
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written = []

    def path(self, name: str) -> Path:
        return self.dir / name

    def table(self, stem: str, columns: dict) -> Path:
        cols = {k: np.asarray(v) for k, v in columns.items()}
        n = len(next(iter(cols.values())))
        if self.fmt == "csv":
            p = self.path(stem + ".csv")
            with open(p, "w") as fh:
                fh.write(",".join(cols) + "\n")
                for i in range(n):
                    fh.write(",".join(_fmt(cols[k][i]) for k in cols) + "\n")
        else:
            p = self.path(stem + ".jsonl")
            with open(p, "w") as fh:
                for i in range(n):
                    fh.write(json.dumps({k: _py(cols[k][i]) for k in cols}) + "\n")
        self.written.append(str(p))
        return p

    def json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(ensemble._jsonable(obj), indent=2, sort_keys=True) + "\n")
        self.written.append(str(p))
        return p

    def plot(self, stem: str, data: Path, x: str, series: list, title: str, references=(),
             markers=()) -> Path:
        """Declarative plot description next to a data table."""
        spec = {"data": data.name, "format": self.fmt, "title": title, "x": {"column": x},
                "series": [{"column": s} for s in series],
                "references": [{"column": r} for r in references], "markers": list(markers)}
        return self.json(stem + ".plot.json", spec)


def _py(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def _fmt(v) -> str:
    v = _py(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _spectrum(cfg: RunConfig):
    """Deterministic context (spectrum, edges, quantiles) of the configured model."""
    ctx = ensemble.Context(cfg.ensemble_config(n_samples=1, workers=1))
    return ctx, None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_density(cfg: RunConfig, out: Output) -> int:
    ctx, _ = _spectrum(cfg)
    d = cfg.density
    lo = d.E_min if d.E_min is not None else ctx.edge.E_minus - 0.1
    hi = d.E_max if d.E_max is not None else ctx.edge.E_plus + 0.1
    grid = np.linspace(lo, hi, d.points)
    prof = dyson.density_profile(grid, ctx.spectrum, method=d.method, curve=ctx.curve)
    cols = {"E": prof.grid, "rho": prof.rho}
    if ctx.lam.is_zero:
        cols["rho_sc"] = np.sqrt(np.clip(4 - grid ** 2, 0, None)) / (2 * np.pi)
    p = out.table("density", cols)
    out.plot("density", p, "E", ["rho"], "deterministic density",
             references=["rho_sc"] if "rho_sc" in cols else [])
    print(json.dumps({"points": int(d.points), "E_min": lo, "E_max": hi, "method": d.method}))
    return EXIT_OK


def _edge_summary(ctx) -> dict:
    e = ctx.edge
    hs = ctx.hs_norm
    return {"E_minus": e.E_minus, "E_plus": e.E_plus, "gamma_minus": e.gamma_minus,
            "gamma_plus": e.gamma_plus, "w_minus": e.w_minus, "w_plus": e.w_plus,
            "perturbative": e.perturbative, "op_norm": ctx.a_norm, "hs_norm": hs,
            "kappa_threshold": (hs ** -2) if hs > 0 else None}


def cmd_edges(cfg: RunConfig, out: Output) -> int:
    ctx, _ = _spectrum(cfg)
    summary = _edge_summary(ctx)
    out.json("edges.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_quantiles(cfg: RunConfig, out: Output) -> int:
    ctx, _ = _spectrum(cfg)
    n = ctx.dim
    ks = np.arange(1, n + 1) if cfg.quantiles.k is None else np.asarray(cfg.quantiles.k, dtype=int)
    if np.any((ks < 1) | (ks > n)):
        raise InputError(f"quantile indices must lie in 1..{n}")
    out.table("quantiles", {"k": ks, "gamma_k": ctx.qt.gamma[ks - 1], "gamma_k_sc": ctx.qt.gamma_sc[ks - 1]})
    print(json.dumps({"rows": int(ks.size)}))
    return EXIT_OK


def cmd_ensemble(cfg: RunConfig, out: Output) -> int:
    ecfg = cfg.ensemble_config()
    side = out.path("eigs.bin") if cfg.ensemble.sidecar else None
    res = ensemble.run_ensemble(ecfg, records_path=out.path("records.jsonl"), sidecar_path=side)
    out.written.append(str(out.path("records.jsonl")))
    out.path("result.json").write_text(res.to_json() + "\n")
    out.json("timings.json", {"timings": res.timings, "workers": ecfg.workers})
    if res.edge_samples:
        p = out.table("edge_stats", res.edge_samples)
        out.plot("edge_stats", p, "top_tw", ["top_tw", "top", "top_paired"], "rescaled largest eigenvalue")
    print(json.dumps({"n_samples": res.aggregates["n_samples"], "n_failed": res.aggregates["n_failed"],
                      "ks": res.ks}))
    return EXIT_OK


def cmd_mobility(cfg: RunConfig, out: Output) -> int:
    ecfg = cfg.ensemble_config(eigenvectors="all", eigs_H=False)
    res = ensemble.run_ensemble(ecfg)
    mc = res.aggregates["mobility"]
    ctx, _ = _spectrum(cfg)
    ks = mc["k"]
    energy = ctx.qt.gamma[ks - 1]
    kappa = np.minimum(ctx.edge.E_plus - energy, energy - ctx.edge.E_minus)
    p = out.table("mobility", {"k": ks, "gamma_k": energy, "kappa": kappa, "median": mc["median"],
                               "q25": mc["q25"], "q75": mc["q75"], "frac_gt_0.5": mc["frac_gt_0.5"],
                               "frac_gt_0.9": mc["frac_gt_0.9"]})
    markers = []
    if ctx.hs_norm > 0:
        ks_star = ctx.hs_norm ** -2
        for label, colour, factor in (("localized_side", "red", 0.25), ("delocalized_side", "green", 4.0)):
            for side, idx in (("top", np.argmax(kappa >= factor * ks_star)),
                              ("bottom", len(kappa) - 1 - np.argmax(kappa[::-1] >= factor * ks_star))):
                markers.append({"label": f"{label}_{side}", "color": colour, "kappa": factor * ks_star,
                                "k": int(ks[idx])})
    out.plot("mobility", p, "k", ["median", "q25", "q75"], "max block mass of v_k", markers=markers)
    out.path("result.json").write_text(res.to_json() + "\n")
    print(json.dumps({"n_samples": ecfg.n_samples, "kappa_threshold": _edge_summary(ctx)["kappa_threshold"],
                      "markers": markers}))
    return EXIT_OK


def cmd_local_law(cfg: RunConfig, out: Output) -> int:
    ll = cfg.local_law
    zs = [complex(E, eta) for E in ll.energies for eta in ll.etas]
    ecfg = cfg.ensemble_config(n_samples=ll.n_samples, eigenvectors="none")
    per_sample = ensemble.probe_ensemble(ecfg, zs)
    rows = {"sample": [], "E": [], "eta": [], "aniso_ratio": [], "averaged_max": [], "ward_error": []}
    for i, probes in enumerate(per_sample):
        for p in probes:
            rows["sample"].append(i)
            rows["E"].append(p.z.real)
            rows["eta"].append(p.z.imag)
            rows["aniso_ratio"].append(p.aniso_ratio)
            rows["averaged_max"].append(float(p.averaged.max()))
            rows["ward_error"].append(p.ward_error)
    p = out.table("local_law", rows)
    out.plot("local_law", p, "eta", ["aniso_ratio", "averaged_max"], "local law ratios")
    summary = []
    for z in zs:
        sel = [j for j in range(len(rows["E"])) if rows["E"][j] == z.real and rows["eta"][j] == z.imag]
        summary.append({"E": z.real, "eta": z.imag,
                        "median_aniso": float(np.median([rows["aniso_ratio"][j] for j in sel])),
                        "median_averaged": float(np.median([rows["averaged_max"][j] for j in sel])),
                        "max_ward": float(max(rows["ward_error"][j] for j in sel))})
    out.json("local_law_summary.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_flow_check(cfg: RunConfig, out: Output) -> int:
    ctx, _ = _spectrum(cfg)
    sp = ctx.spectrum
    results = []
    for z in cfg.flow.z0:
        z0 = complex(z[0], z[1])
        traj = flow.integrate_flow(z0, sp, t_span=(0.0, cfg.flow.t_end))
        for r in flow.flow_invariants(traj):
            results.append({"z0": [z0.real, z0.imag], "t_c": traj.t_c, **r.to_dict()})
    if not ctx.lam.is_zero:
        pts = flow.edge_velocity_check(sp, cfg.flow.scaling)
        worst = max(p.rel_error for p in pts)
        results.append({"name": "edge_velocity", "max_residual": worst, "threshold": 1e-5, "pass": worst <= 1e-5})
    p = out.path("flow_check.jsonl")
    p.write_text("".join(json.dumps(ensemble._jsonable(r)) + "\n" for r in results))
    out.written.append(str(p))
    ok = all(r["pass"] for r in results)
    print(json.dumps({"pass": ok, "n_checks": len(results)}))
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_loop(cfg: RunConfig, out: Output) -> int:
    lp = cfg.loop
    ecfg = cfg.ensemble_config(n_samples=lp.n_samples, eigenvectors="none")
    ctx, _ = _spectrum(cfg)
    res = ensemble.loop_ensemble(ecfg, [int(k) for k in lp.k], lp.eps, ctx=ctx)
    ks = sorted(res)
    p = out.table("loop", {"k": ks, "eta": [ensemble.loop_eta(ecfg.N, k, lp.eps) for k in ks],
                           "mean": [res[k]["mean"] for k in ks], "stderr": [res[k]["stderr"] for k in ks],
                           "envelope": [res[k]["envelope"] for k in ks], "ratio": [res[k]["ratio"] for k in ks]})
    out.plot("loop", p, "k", ["mean"], "two-resolvent loop", references=["envelope"])
    print(json.dumps({str(k): res[k] for k in ks}))
    return EXIT_OK


def cmd_tw(cfg: RunConfig, out: Output, dump: str | None = None) -> int:
    table = tw.default_table()
    mean, var = table.moments()
    if dump is not None:
        table.to_csv(dump)
    print(json.dumps({"mean": mean, "variance": var, "normalization": table.normalization(),
                      "grid_points": int(table.s_grid.size)}))
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out: Output) -> int:
    results = checks.identity_suite()
    doc = {"pass": all(c.passed for c in results), "checks": [c.to_dict() for c in results]}
    out.json("verify.json", doc)
    for c in results:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} value={c.value:.3e} threshold={c.threshold:.1e}")
    return EXIT_OK if doc["pass"] else EXIT_VERIFY


COMMANDS = {
    "density": cmd_density, "edges": cmd_edges, "quantiles": cmd_quantiles, "ensemble": cmd_ensemble,
    "mobility": cmd_mobility, "local-law": cmd_local_law, "loop": cmd_loop, "flow-check": cmd_flow_check, "tw": cmd_tw,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML configuration file")
    common.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    common.add_argument("--workers", type=int, help="worker process count")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--format", choices=("csv", "jsonl"), help="tabular output format")
    common.add_argument("--dry-run", action="store_true", help="validate and print the resolved plan")
    parser = argparse.ArgumentParser(prog="blockrmt", description="random block matrix laboratory")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "tw":
            p.add_argument("--dump", metavar="PATH", help="write the tabulated law as CSV")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise InputError("seed must be an unsigned 64-bit integer")
    except (InputError, ArgumentError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run:
        plan = {"command": args.command, "output_directory": cfg.output.directory, "config": cfg.to_dict()}
        print(yaml.safe_dump(plan, sort_keys=False), end="")
        return EXIT_OK
    out = None
    try:
        out = Output(cfg)
        (out.dir / "PARTIAL.json").unlink(missing_ok=True)
        (out.dir / "config.resolved.yaml").write_text(cfg.to_yaml())
        fn = COMMANDS[args.command]
        code = fn(cfg, out, args.dump) if args.command == "tw" else fn(cfg, out)
        if code != EXIT_OK:
            _flag_partial(out, code, "acceptance check failed")
        return code
    except (InputError, ArgumentError, DomainError) as exc:
        code, message = EXIT_CONFIG, f"config error: {exc}"
    except (SolverError, ConstructionError, EnsembleError) as exc:
        code, message = EXIT_SOLVER, f"solver error: {exc}"
    except BlockRMTError as exc:
        code, message = EXIT_SOLVER, f"error: {exc}"
    print(message, file=sys.stderr)
    if out is not None:
        _flag_partial(out, code, message)
    return code


def _flag_partial(out: Output, code: int, message: str) -> None:
    """Mark the files of an unsuccessful run as partial."""
    doc = {"status": "partial", "exit_code": code, "error": message, "written": list(out.written)}
    (out.dir / "PARTIAL.json").write_text(json.dumps(doc, indent=2) + "\n")


if __name__ == "__main__":
    sys.exit(main())
