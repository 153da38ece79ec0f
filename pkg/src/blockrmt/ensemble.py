"""Monte Carlo ensembles of ``H + Lambda`` and their diagnostics.

Each sample is generated from counter-based streams keyed by
``(seed, sample index, block)`` and processed independently, so aggregates
do not depend on how samples are distributed over worker processes. All
BLAS/LAPACK calls run single-threaded inside a sample to keep results
bitwise reproducible.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg as sla
from threadpoolctl import threadpool_limits

from . import dyson, tw
from .errors import ArgumentError, EnsembleError
from .model import (CouplingSpec, InteractionMatrix, LambdaSpectrum, WignerDraw, assemble,
                    block_slice, build_lambda, lambda_spectrum, make_coupling, sample_wigner, stream)

RECORD_SCHEMA = "blockrmt.sample-record/1"
RESULT_SCHEMA = "blockrmt.ensemble-result/1"


# --------------------------------------------------------------------------
# configuration and shared context
# --------------------------------------------------------------------------

@dataclass
class EnsembleConfig:
    """Parameters of a Monte Carlo run.

    Parameters
    ----------
    N, D : int
        Block size and number of blocks. ``D = 1`` requires zero coupling.
    coupling : CouplingSpec
    dist : str
        Entry distribution of the Wigner blocks.
    seed : int
        Global seed.
    n_samples : int
    eigenvectors : {'none', 'selected', 'all'}
        Which block masses ``||E_a v_k||^2`` to keep.
    k_select : tuple of int
        1-based indices (descending order) for ``eigenvectors='selected'``.
    eigs_H : bool
        Also diagonalize the uncoupled ``H`` (needed for paired shifts).
    quantiles : bool
        Compute ``gamma_k`` for rigidity diagnostics.
    paired_k_max : int
        Largest ``k`` entering the paired-shift aggregate.
    workers : int
        Process count; 1 runs in-process.
    """

    N: int
    D: int
    coupling: CouplingSpec
    dist: str = "complex_gaussian"
    seed: int = 0
    n_samples: int = 100
    eigenvectors: str = "none"
    k_select: tuple = (1,)
    eigs_H: bool = False
    quantiles: bool = True
    paired_k_max: int = 20
    workers: int = 1

    def __post_init__(self):
        if self.n_samples < 1:
            raise ArgumentError("sample count must be >= 1")
        if self.eigenvectors not in ("none", "selected", "all"):
            raise ArgumentError(f"eigenvectors must be none/selected/all, got {self.eigenvectors!r}")
        if self.coupling.N != self.N:
            raise ArgumentError(f"coupling N={self.coupling.N} differs from model N={self.N}")
        self.k_select = tuple(int(k) for k in self.k_select)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coupling"] = self.coupling.to_dict()
        d["k_select"] = list(self.k_select)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleConfig":
        d = dict(d)
        d["coupling"] = CouplingSpec.from_dict(d["coupling"])
        d["k_select"] = tuple(d.get("k_select", (1,)))
        return cls(**d)


class Context:
    """Deterministic objects shared by all samples of a run."""

    def __init__(self, config: EnsembleConfig):
        self.config = config
        N, D = config.N, config.D
        coup = make_coupling(config.coupling)
        self.A = coup.A
        self.a_norm = coup.op_norm
        self.hs_norm = coup.hs_norm
        if D == 1 or coup.hs_norm == 0:
            self.lam = InteractionMatrix.zero(N, D)
            self.spectrum = LambdaSpectrum.zero(N, D)
        else:
            self.lam = build_lambda(coup.A, D)
            self.spectrum = lambda_spectrum(coup.A, D)
        if D == 1 and coup.hs_norm != 0:
            raise ArgumentError("D = 1 is only defined for zero coupling")
        self.curve = dyson.SpectralCurve(self.spectrum)
        self.edge = self.curve.edge
        self.qt = dyson.quantiles(N, D, self.spectrum, self.curve) if config.quantiles else None

    @property
    def dim(self) -> int:
        return self.config.N * self.config.D


# --------------------------------------------------------------------------
# per-sample records
# --------------------------------------------------------------------------

@dataclass
class SampleRecord:
    """Eigen-data and diagnostics of one draw."""

    sample_id: int
    seed: int
    eigs_HL: np.ndarray | None = None
    eigs_H: np.ndarray | None = None
    block_masses: dict = field(default_factory=dict)
    edge_stats: dict = field(default_factory=dict)
    eig_residual: float = 0.0
    mass_error: float = 0.0
    failed: bool = False
    error: str = ""
    seconds: float = 0.0

    def to_dict(self, sidecar: dict | None = None) -> dict:
        out = {"schema": RECORD_SCHEMA, "sample_id": self.sample_id, "seed": self.seed,
               "failed": self.failed, "error": self.error}
        for name in ("eigs_HL", "eigs_H"):
            arr = getattr(self, name)
            if arr is None:
                out[name] = None
            elif sidecar is not None and name in sidecar:
                out[name] = sidecar[name]
            else:
                out[name] = arr.tolist()
        out["block_masses"] = {str(k): v.tolist() for k, v in self.block_masses.items()}
        out["edge_stats"] = dict(self.edge_stats)
        out["eig_residual"] = self.eig_residual
        out["mass_error"] = self.mass_error
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        arr = lambda v: None if v is None else np.asarray(v, dtype=float)
        return cls(d["sample_id"], d["seed"], arr(d["eigs_HL"]), arr(d["eigs_H"]),
                   {int(k): np.asarray(v) for k, v in d["block_masses"].items()}, dict(d["edge_stats"]),
                   d["eig_residual"], d["mass_error"], d["failed"], d["error"])


def eigh_desc(H: np.ndarray, vectors: bool):
    """Full Hermitian eigendecomposition, eigenvalues in decreasing order."""
    if vectors:
        w, V = sla.eigh(H, driver="evr", check_finite=False)
        return w[::-1], V[:, ::-1]
    w = sla.eigh(H, eigvals_only=True, driver="evr", check_finite=False)
    return w[::-1], None


def edge_statistics(eigs: np.ndarray, ctx: Context) -> dict:
    """Rescaled extreme eigenvalues under both centerings.

    ``top``       : (DN)^{2/3} (lambda_1 - E^+)
    ``top_tw``    : gamma_+ * top
    ``top_paired``: (DN)^{2/3} (lambda_1 - gamma_1 + gamma_1^sc - 2)
    and the mirrored quantities at the lower edge.
    """
    n = ctx.dim
    s = n ** (2.0 / 3.0)
    e = ctx.edge
    out = {
        "top": s * (eigs[0] - e.E_plus),
        "top_tw": e.gamma_plus * s * (eigs[0] - e.E_plus),
        "bottom": s * (e.E_minus - eigs[-1]),
        "bottom_tw": e.gamma_minus * s * (e.E_minus - eigs[-1]),
    }
    if ctx.qt is not None:
        g, gsc = ctx.qt.gamma, ctx.qt.gamma_sc
        out["top_paired"] = s * (eigs[0] - g[0] + gsc[0] - 2.0)
        out["bottom_paired"] = s * (-2.0 - gsc[-1] + g[-1] - eigs[-1])
    return {k: float(v) for k, v in out.items()}


def process_sample(ctx: Context, i: int) -> SampleRecord:
    """Run the per-sample pipeline for sample ``i``."""
    cfg = ctx.config
    t_start = time.perf_counter()
    rec = SampleRecord(i, cfg.seed)
    try:
        with threadpool_limits(1):
            draw = sample_wigner(cfg.N, cfg.D, cfg.dist, cfg.seed, sample=i)
            H = assemble(draw, ctx.lam, 1.0)
            vectors = cfg.eigenvectors != "none"
            w, V = eigh_desc(H, vectors)
            if not np.all(np.isfinite(w)):
                raise np.linalg.LinAlgError("non-finite eigenvalues")
            rec.eigs_HL = w
            if vectors:
                n = ctx.dim
                ks = np.arange(1, n + 1) if cfg.eigenvectors == "all" else np.asarray(cfg.k_select)
                if np.any((ks < 1) | (ks > n)):
                    raise ArgumentError(f"k_select out of range 1..{n}")
                Vk = V[:, ks - 1]
                masses = (np.abs(Vk) ** 2).reshape(cfg.D, cfg.N, len(ks)).sum(axis=1)
                rec.mass_error = float(np.max(np.abs(masses.sum(axis=0) - 1.0)))
                rec.block_masses = {int(k): masses[:, j] for j, k in enumerate(ks)}
                # spot check of eigenpair residuals
                probe = np.unique(np.concatenate([[0, n // 2, n - 1], ks[:29] - 1]))
                R = H @ V[:, probe] - V[:, probe] * w[probe]
                hn = max(abs(w[0]), abs(w[-1]))
                rec.eig_residual = float(np.max(np.linalg.norm(R, axis=0)) / hn)
            if cfg.eigs_H:
                eh = np.concatenate([np.linalg.eigvalsh(draw.blocks[a]) for a in range(cfg.D)])
                rec.eigs_H = np.sort(eh)[::-1]
            rec.edge_stats = edge_statistics(w, ctx)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        if isinstance(exc, ArgumentError):
            raise
        rec.failed = True
        rec.error = f"{type(exc).__name__}: {exc}"
    rec.seconds = time.perf_counter() - t_start
    return rec


# --------------------------------------------------------------------------
# worker pool plumbing
# --------------------------------------------------------------------------

_WORKER = {}


def _init_worker(config_dict: dict, builder: Callable | None):
    cfg = EnsembleConfig.from_dict(config_dict)
    _WORKER["ctx"] = Context(cfg) if builder is None else builder(cfg)


def _run_task(args):
    fn, i = args
    return fn(_WORKER["ctx"], i)


def map_samples(config: EnsembleConfig, fn: Callable, indices: Iterable[int] | None = None,
                ctx: Context | None = None, workers: int | None = None):
    """Yield ``fn(ctx, i)`` for each sample index, in index order.

    ``fn`` must be a module-level function so it can be shipped to worker
    processes. Each worker builds its own :class:`Context`.
    """
    indices = list(range(config.n_samples)) if indices is None else list(indices)
    workers = config.workers if workers is None else workers
    if workers <= 1:
        ctx = ctx if ctx is not None else Context(config)
        for i in indices:
            yield fn(ctx, i)
        return
    env = {k: os.environ.get(k) for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")}
    for k in env:
        os.environ[k] = "1"
    try:
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn"),
                                 initializer=_init_worker, initargs=(config.to_dict(), None)) as pool:
            chunk = max(1, len(indices) // (4 * workers))
            yield from pool.map(_run_task, [(fn, i) for i in indices], chunksize=chunk)
    finally:
        for k, v in env.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v


# --------------------------------------------------------------------------
# diagnostics on eigenvalues
# --------------------------------------------------------------------------

def _r(n: int) -> np.ndarray:
    k = np.arange(1, n + 1)
    return np.minimum(k, n + 1 - k)


def rigidity_report(eigs: np.ndarray, qt: dyson.QuantileTable) -> dict:
    """Scaled residuals ``N^{2/3} r(k)^{1/3} |lambda_k - gamma_k|`` and their max."""
    eigs = np.asarray(eigs, dtype=float)
    n = qt.N * qt.D
    if eigs.shape != (n,):
        raise ArgumentError(f"expected {n} eigenvalues, got {eigs.shape}")
    scaled = qt.N ** (2.0 / 3.0) * _r(n) ** (1.0 / 3.0) * np.abs(eigs - qt.gamma)
    return {"scaled": scaled, "max": float(scaled.max()), "argmax": int(np.argmax(scaled)) + 1}


def paired_shift_check(eigs_H, eigs_HL, qt: dyson.QuantileTable) -> dict:
    """Residual ``(lambda_k - gamma_k) - (lambda_k(H) - gamma_k^sc)`` per ``k``."""
    if eigs_H is None:
        raise ArgumentError("paired shift check needs the eigenvalues of H")
    eigs_H = np.asarray(eigs_H, dtype=float)
    eigs_HL = np.asarray(eigs_HL, dtype=float)
    n = qt.N * qt.D
    if eigs_H.shape != (n,) or eigs_HL.shape != (n,):
        raise ArgumentError("eigenvalue arrays must both have length DN")
    raw = (eigs_HL - qt.gamma) - (eigs_H - qt.gamma_sc)
    scaled = np.abs(raw) * qt.N ** (2.0 / 3.0) * _r(n) ** (1.0 / 3.0)
    return {"raw": raw, "scaled": scaled, "small": scaled < 1.0}


def mobility_curve(masses, k_range: Sequence[int] | None = None) -> dict:
    """Per-``k`` summary of ``max_a ||E_a v_k||^2`` over samples.

    Parameters
    ----------
    masses : list of SampleRecord or ndarray of shape (S, D, K)
        Block masses; records must hold every ``k`` in ``k_range``.
    k_range : sequence of int, optional
        1-based indices; defaults to all stored indices.
    """
    if isinstance(masses, np.ndarray):
        arr = masses
        ks = np.arange(1, arr.shape[2] + 1) if k_range is None else np.asarray(k_range)
        arr = arr[:, :, ks - 1]
    else:
        recs = [r for r in masses if not r.failed]
        ks = np.asarray(sorted(recs[0].block_masses) if k_range is None else k_range)
        arr = np.stack([np.stack([r.block_masses[int(k)] for k in ks], axis=1) for r in recs])
    mx = arr.max(axis=1)  # (S, K)
    q25, med, q75 = np.percentile(mx, [25, 50, 75], axis=0)
    return {"k": ks, "median": med, "q25": q25, "q75": q75,
            "frac_gt_0.5": (mx > 0.5).mean(axis=0), "frac_gt_0.9": (mx > 0.9).mean(axis=0)}


# --------------------------------------------------------------------------
# ensemble driver
# --------------------------------------------------------------------------

@dataclass
class EnsembleResult:
    config: dict
    records: list
    aggregates: dict
    edge_samples: dict
    ks: dict
    timings: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = False) -> dict:
        # worker count is an execution detail; it lives with the timings
        config = {k: v for k, v in self.config.items() if k != "workers"}
        out = {"schema": RESULT_SCHEMA, "config": config, "aggregates": _jsonable(self.aggregates),
               "edge_samples": _jsonable(self.edge_samples), "ks": _jsonable(self.ks)}
        if timings:
            out["timings"] = _jsonable(self.timings)
            out["workers"] = self.config.get("workers", 1)
        return out

    def to_json(self, timings: bool = False) -> str:
        return json.dumps(self.to_dict(timings), sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def aggregate(records: list, ctx: Context) -> tuple[dict, dict, dict]:
    """Deterministic fold of sample records in index order."""
    cfg = ctx.config
    good = [r for r in records if not r.failed]
    agg = {"n_samples": len(records), "n_failed": len(records) - len(good),
           "edges": {"E_minus": ctx.edge.E_minus, "E_plus": ctx.edge.E_plus,
                     "gamma_minus": ctx.edge.gamma_minus, "gamma_plus": ctx.edge.gamma_plus,
                     "perturbative": ctx.edge.perturbative},
           "norms": {"op": ctx.a_norm, "hs": ctx.hs_norm}}
    if not good:
        return agg, {}, {}
    keys = list(good[0].edge_stats)
    edge = {k: np.array([r.edge_stats[k] for r in good]) for k in keys}
    table = tw.default_table()
    D = cfg.D
    ks = {}
    maxd = lambda s: tw.max_of_d_cdf(s, D, table)
    if len(good) >= 2:  # KS needs at least two samples
        if "top_tw" in edge:
            ks["top_tw_vs_tw2"] = tw.ks_distance(edge["top_tw"], table.cdf)
            ks["bottom_tw_vs_tw2"] = tw.ks_distance(edge["bottom_tw"], table.cdf)
        ks["top_vs_maxD"] = tw.ks_distance(edge["top"], maxd)
        ks["bottom_vs_maxD"] = tw.ks_distance(edge["bottom"], maxd)
        if "top_paired" in edge:
            ks["top_paired_vs_maxD"] = tw.ks_distance(edge["top_paired"], maxd)
            ks["bottom_paired_vs_maxD"] = tw.ks_distance(edge["bottom_paired"], maxd)
    if ctx.qt is not None:
        rig = np.array([rigidity_report(r.eigs_HL, ctx.qt)["max"] for r in good])
        agg["rigidity_max"] = rig
        agg["rigidity_frac_le_10"] = float(np.mean(rig <= 10.0))
        if cfg.eigs_H:
            kmax = min(cfg.paired_k_max, ctx.dim)
            sc = np.array([paired_shift_check(r.eigs_H, r.eigs_HL, ctx.qt)["scaled"][:kmax] for r in good])
            raw = np.array([rigidity_report(r.eigs_HL, ctx.qt)["scaled"][:kmax] for r in good])
            agg["paired"] = {"k": np.arange(1, kmax + 1), "median_scaled": np.median(sc, axis=0),
                             "median_rigidity": np.median(raw, axis=0)}
    if good[0].block_masses:
        mc = mobility_curve(good)
        agg["mobility"] = mc
        agg["max_mass_error"] = float(max(r.mass_error for r in good))
        agg["max_eig_residual"] = float(max(r.eig_residual for r in good))
    return agg, edge, ks


def run_ensemble(config: EnsembleConfig, records_path: str | Path | None = None,
                 sidecar_path: str | Path | None = None, progress: Callable | None = None,
                 max_fail_frac: float = 0.01) -> EnsembleResult:
    """Sample, diagonalize and summarize ``config.n_samples`` draws.

    Parameters
    ----------
    config : EnsembleConfig
    records_path : path, optional
        JSON-lines file receiving one record per sample as it completes.
    sidecar_path : path, optional
        When given, eigenvalue arrays are written there as little-endian
        float64 and records hold offsets instead of inline lists.
    progress : callable, optional
        Called with each finished record.
    max_fail_frac : float
        Fraction of failed samples above which :class:`EnsembleError` is raised.
    """
    t0 = time.perf_counter()
    ctx = Context(config)
    t_ctx = time.perf_counter() - t0
    records = []
    fh = open(records_path, "w") if records_path is not None else None
    side = open(sidecar_path, "wb") if sidecar_path is not None else None
    offset = 0
    try:
        for rec in map_samples(config, process_sample, ctx=ctx):
            records.append(rec)
            if fh is not None:
                meta = None
                if side is not None:
                    meta = {}
                    for name in ("eigs_HL", "eigs_H"):
                        arr = getattr(rec, name)
                        if arr is not None:
                            side.write(np.asarray(arr, dtype="<f8").tobytes())
                            meta[name] = {"sidecar": Path(sidecar_path).name, "dtype": "<f8",
                                          "offset": offset, "count": int(arr.size)}
                            offset += arr.size * 8
                fh.write(json.dumps(rec.to_dict(meta)) + "\n")
                fh.flush()
            if progress is not None:
                progress(rec)
    finally:
        if fh is not None:
            fh.close()
        if side is not None:
            side.close()
    t_samples = time.perf_counter() - t0 - t_ctx
    agg, edge, ks = aggregate(records, ctx)
    timings = {"context_s": t_ctx, "samples_s": t_samples, "aggregate_s": time.perf_counter() - t0 - t_ctx - t_samples,
               "per_sample_s": float(np.mean([r.seconds for r in records]))}
    result = EnsembleResult(config.to_dict(), records, agg, edge, ks, timings)
    n_failed = agg["n_failed"]
    if n_failed > max_fail_frac * len(records):
        raise EnsembleError(f"{n_failed} of {len(records)} samples failed")
    return result


def read_records(path: str | Path) -> list[SampleRecord]:
    """Load a JSON-lines record stream (resolving sidecar references)."""
    path = Path(path)
    out = []
    cache = {}
    for line in path.read_text().splitlines():
        d = json.loads(line)
        for name in ("eigs_HL", "eigs_H"):
            v = d.get(name)
            if isinstance(v, dict) and "sidecar" in v:
                f = path.parent / v["sidecar"]
                if f not in cache:
                    cache[f] = f.read_bytes()
                d[name] = np.frombuffer(cache[f], dtype="<f8", count=v["count"], offset=v["offset"]).copy()
        out.append(SampleRecord.from_dict(d))
    return out


# --------------------------------------------------------------------------
# resolvent diagnostics
# --------------------------------------------------------------------------

class Sample:
    """One draw together with the deterministic objects of its ensemble.

    Eigendecompositions are computed lazily and cached.
    """

    def __init__(self, ctx: Context, index: int):
        self.ctx = ctx
        cfg = ctx.config
        self.index = index
        self.draw = sample_wigner(cfg.N, cfg.D, cfg.dist, cfg.seed, sample=index)
        self._cache = {}

    @property
    def N(self) -> int:
        return self.ctx.config.N

    @property
    def D(self) -> int:
        return self.ctx.config.D

    def matrix(self, t: float = 1.0) -> np.ndarray:
        return assemble(self.draw, self.ctx.lam, t)

    def eig(self):
        """Eigenpairs of ``H + Lambda`` (descending)."""
        if "HL" not in self._cache:
            self._cache["HL"] = eigh_desc(self.matrix(), True)
        return self._cache["HL"]

    def eig_H(self):
        """Eigenpairs of ``H`` computed block by block (descending)."""
        if "H" not in self._cache:
            N, D = self.N, self.D
            w = np.empty(N * D)
            V = np.zeros((N * D, N * D), dtype=complex)
            for a in range(D):
                wa, Va = np.linalg.eigh(self.draw.blocks[a])
                w[a * N:(a + 1) * N] = wa
                V[block_slice(a, N), a * N:(a + 1) * N] = Va
            order = np.argsort(w, kind="stable")[::-1]
            self._cache["H"] = (w[order], V[:, order])
        return self._cache["H"]


@dataclass
class ResolventProbe:
    z: complex
    im_m: float
    aniso_ratio: float
    averaged: np.ndarray
    ward_error: float


def local_law_probe(sample: Sample, z: complex, n_pairs: int = 20, n_B: int = 5, n_ward: int = 10,
                    tau: float = 0.1) -> ResolventProbe:
    """Compare ``G = (H + Lambda - z)^{-1}`` with ``M(z)``.

    Isotropic entries and the Ward identity use LU solves with ``H - z``;
    the normalized traces ``<(G - M) B>`` for diagonal ``B`` use the
    spectral decomposition.

    Returns
    -------
    ResolventProbe
        ``aniso_ratio`` is the max over random unit pairs of
        ``|(G - M)_uv| / (sqrt(Im m/(N eta)) + 1/(N eta))``; ``averaged``
        holds ``|<(G - M) B>| N eta`` for ``B`` = identity, the first block
        projection and random nonnegative diagonal matrices with norm <= 1;
        ``ward_error`` is the max relative deviation in
        ``sum_x |G_xy|^2 = Im G_yy / eta``.
    """
    z = complex(z)
    N, D = sample.N, sample.D
    n = N * D
    eta = z.imag
    if eta < N ** (-1 + tau):
        raise ArgumentError(f"eta = {eta:.3g} below N^(-1+tau) = {N ** (-1 + tau):.3g}")
    sp = sample.ctx.spectrum
    sol = dyson.stieltjes(z, sp)
    d = dyson.m_diag(z, sp, sol.m)
    U = sp.basis()
    rng = stream(sample.ctx.config.seed, sample.index, 1_000_003, int(round(1e6 * eta)))
    with threadpool_limits(1):
        H = sample.matrix()
        lu = sla.lu_factor(H - z * np.eye(n), check_finite=False)
        # Ward identity
        cols = rng.choice(n, size=min(n_ward, n), replace=False)
        E = np.zeros((n, cols.size), dtype=complex)
        E[cols, np.arange(cols.size)] = 1.0
        G_cols = sla.lu_solve(lu, E, check_finite=False)
        lhs = np.sum(np.abs(G_cols) ** 2, axis=0)
        rhs = G_cols[cols, np.arange(cols.size)].imag / eta
        ward = float(np.max(np.abs(lhs - rhs) / np.abs(rhs)))
        # anisotropic entries
        u = rng.standard_normal((n, n_pairs)) + 1j * rng.standard_normal((n, n_pairs))
        v = rng.standard_normal((n, n_pairs)) + 1j * rng.standard_normal((n, n_pairs))
        u /= np.linalg.norm(u, axis=0)
        v /= np.linalg.norm(v, axis=0)
        Gv = sla.lu_solve(lu, v, check_finite=False)
        Mv = U @ (d[:, None] * (U.conj().T @ v))
        diff = np.abs(np.sum(u.conj() * (Gv - Mv), axis=0))
        ctrl = np.sqrt(sol.im_m / (N * eta)) + 1.0 / (N * eta)
        aniso = float(diff.max() / ctrl)
        # averaged law with diagonal observables
        w, V = sample.eig()
        absV2 = np.abs(V) ** 2
        g = 1.0 / (w - z)
        M_diag = (np.abs(U) ** 2) @ d
        Bs = [np.ones(n)]
        e1 = np.zeros(n)
        e1[:N] = 1.0
        Bs.append(e1)
        while len(Bs) < n_B:
            Bs.append(rng.uniform(size=n))
        avg = []
        for b in Bs[:n_B]:
            trG = np.dot(b, absV2 @ g) / n
            trM = np.dot(b, M_diag) / n
            avg.append(abs(trG - trM) * N * eta)
    return ResolventProbe(z, sol.im_m, aniso, np.asarray(avg), ward)


def loop_eta(N: int, k: int, eps: float) -> float:
    """``eta = N^{-2/3 + eps} k^{-1/3}``."""
    return N ** (-2.0 / 3.0 + eps) * k ** (-1.0 / 3.0)


def loop_envelope(N: int, k: int, hs_norm: float) -> float:
    """``N^{-5/3} k^{2/3} ||A||_HS^2``."""
    return N ** (-5.0 / 3.0) * k ** (2.0 / 3.0) * hs_norm ** 2


def two_resolvent_loop(sample: Sample, k: int, eps: float) -> float:
    """``<Im G0 Lt Im G1 Lt>`` with ``Lt = Lambda - Delta_ev``.

    ``z1 = gamma_k + i eta`` with ``eta = N^{-2/3+eps} k^{-1/3}``,
    ``z0 = z1 - Delta_ev(z1)``, ``G0`` the resolvent of ``H`` at ``z0`` and
    ``G1`` that of ``H + Lambda`` at ``z1``; both come from spectral data.
    """
    ctx = sample.ctx
    if ctx.lam.is_zero:
        return 0.0
    N, n = sample.N, ctx.dim
    eta = loop_eta(N, k, eps)
    z1 = ctx.qt.gamma[k - 1] + 1j * eta
    dev = dyson.shift_ev(z1, ctx.spectrum)
    z0 = z1 - dev
    with threadpool_limits(1):
        w1, V1 = sample.eig()
        w0, V0 = sample.eig_H()
        a = eta / ((w0 - z0.real) ** 2 + eta ** 2)
        b = eta / ((w1 - z1.real) ** 2 + eta ** 2)
        LV1 = ctx.lam.assembled @ V1 - dev * V1
        C = V0.conj().T @ LV1
        val = np.einsum("i,ij,j->", a, np.abs(C) ** 2, b) / n
    return float(val)


def el_minus_k_check(samples: Sequence[Sample], z1: complex, z2: complex, min_samples: int = 200) -> dict:
    """Scaled deviation ``||mean(L) - K||_max N eta^2`` for the four pairings.

    ``L_ab = D <G(z1) E_a G(z2) E_b>`` is averaged over ``samples``; ``K``
    comes from :func:`blockrmt.dyson.loop_algebra`, and ``eta^2`` is
    ``|Im z1| |Im z2|``.
    """
    if len(samples) < min_samples:
        raise ArgumentError(f"need at least {min_samples} samples, got {len(samples)}")
    ctx = samples[0].ctx
    N, D = ctx.config.N, ctx.config.D
    pairs = {"(z1,z2)": (z1, z2), "(z1,z2bar)": (z1, np.conj(z2)),
             "(z1bar,z2)": (np.conj(z1), z2), "(z1bar,z2bar)": (np.conj(z1), np.conj(z2))}
    sums = {key: np.zeros((D, D), dtype=complex) for key in pairs}
    with threadpool_limits(1):
        for smp in samples:
            w, V = smp.eig()
            P = [V[block_slice(a, N)].conj().T @ V[block_slice(a, N)] for a in range(D)]
            for key, (za, zb) in pairs.items():
                ga, gb = 1.0 / (w - za), 1.0 / (w - zb)
                for a in range(D):
                    for b in range(D):
                        sums[key][a, b] += np.einsum("i,ij,ji,j->", ga, P[a], P[b], gb) / N
    eta2 = abs(np.imag(z1)) * abs(np.imag(z2))
    out = {}
    for key, (za, zb) in pairs.items():
        K = dyson.loop_algebra(za, zb, ctx.spectrum).K
        L = sums[key] / len(samples)
        out[key] = float(np.max(np.abs(L - K)) * N * eta2)
    return out


def make_samples(config: EnsembleConfig, ctx: Context | None = None,
                 indices: Iterable[int] | None = None) -> list[Sample]:
    ctx = ctx if ctx is not None else Context(config)
    indices = range(config.n_samples) if indices is None else indices
    return [Sample(ctx, i) for i in indices]


def _loop_task(ctx: Context, i: int, ks=None, eps=None):
    smp = Sample(ctx, i)
    return [two_resolvent_loop(smp, k, eps) for k in ks]


class _LoopTask:
    """Picklable per-sample loop evaluation."""

    def __init__(self, ks, eps):
        self.ks = tuple(ks)
        self.eps = eps

    def __call__(self, ctx, i):
        return _loop_task(ctx, i, self.ks, self.eps)


class _ProbeTask:
    def __init__(self, zs):
        self.zs = tuple(complex(z) for z in zs)

    def __call__(self, ctx, i):
        smp = Sample(ctx, i)
        return [local_law_probe(smp, z) for z in self.zs]


def loop_ensemble(config: EnsembleConfig, ks: Sequence[int], eps: float, ctx: Context | None = None) -> dict:
    """Sample means of the two-resolvent loop against its envelope."""
    ctx = ctx if ctx is not None else Context(config)
    vals = np.array(list(map_samples(config, _LoopTask(ks, eps), ctx=ctx)))
    out = {}
    for j, k in enumerate(ks):
        env = loop_envelope(config.N, k, ctx.hs_norm)
        mean = float(vals[:, j].mean())
        out[int(k)] = {"mean": mean, "envelope": env, "ratio": mean / env if env > 0 else float("nan"),
                       "stderr": float(vals[:, j].std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0}
    return out


def probe_ensemble(config: EnsembleConfig, zs: Sequence[complex], ctx: Context | None = None) -> list:
    """Local-law probes at each ``z`` for every sample; returns per-sample lists."""
    return list(map_samples(config, _ProbeTask(zs), ctx=ctx))
