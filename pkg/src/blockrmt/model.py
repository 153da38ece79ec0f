"""Coupling matrices, the block interaction Lambda and Wigner sampling.

The model lives on ``C^{DN}`` split into ``D`` consecutive blocks of size
``N``. ``H`` is block diagonal with independent Wigner blocks and
``Lambda`` couples neighbouring blocks through a fixed ``N x N`` matrix
``A``::

    Lambda[a, a+1] = A,   Lambda[a, a-1] = A^*      (indices mod D)

For ``D = 2`` there is a single coupling, ``[[0, A], [A^*, 0]]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ArgumentError, InputError

COUPLING_KINDS = ("scalar", "diagonal", "dense", "random_fixed")
DISTRIBUTIONS = ("complex_gaussian", "complex_rademacher")


# --------------------------------------------------------------------------
# coupling A
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CouplingSpec:
    """Description of the deterministic coupling ``A``.

    Parameters
    ----------
    kind : {'scalar', 'diagonal', 'dense', 'random_fixed'}
        How ``A`` is produced.
    N : int
        Block dimension.
    lam : float
        Scalar for ``kind='scalar'`` (``A = lam * I``).
    values : tuple of float
        Diagonal for ``kind='diagonal'``; its length must equal ``N``.
    path : str, optional
        Text file of ``re im`` pairs for ``kind='dense'``.
    scale, seed : float, int
        For ``kind='random_fixed'``: ``A = scale * G`` with ``G`` a fixed
        complex Gaussian matrix with ``E|G_ij|^2 = 1/N`` drawn from ``seed``.
    """

    kind: str
    N: int
    lam: float = 0.0
    values: tuple = ()
    path: str | None = None
    scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in COUPLING_KINDS:
            raise InputError(f"unknown coupling kind {self.kind!r}; expected one of {COUPLING_KINDS}")
        if int(self.N) != self.N or self.N < 1:
            raise InputError(f"block dimension N must be a positive integer, got {self.N!r}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @classmethod
    def scalar(cls, lam: float, N: int) -> "CouplingSpec":
        return cls("scalar", N, lam=float(lam))

    @classmethod
    def diagonal(cls, values: Sequence[float]) -> "CouplingSpec":
        return cls("diagonal", len(values), values=tuple(values))

    @classmethod
    def dense(cls, path: str | Path, N: int) -> "CouplingSpec":
        return cls("dense", N, path=str(path))

    @classmethod
    def random_fixed(cls, scale: float, seed: int, N: int) -> "CouplingSpec":
        return cls("random_fixed", N, scale=float(scale), seed=int(seed))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "N": int(self.N)}
        if self.kind == "scalar":
            out["lam"] = self.lam
        elif self.kind == "diagonal":
            out["values"] = list(self.values)
        elif self.kind == "dense":
            out["path"] = self.path
        else:
            out["scale"] = self.scale
            out["seed"] = self.seed
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CouplingSpec":
        d = dict(d)
        try:
            kind = d.pop("kind")
            N = d.pop("N")
        except KeyError as exc:
            raise InputError(f"coupling section missing field {exc.args[0]!r}") from None
        allowed = {"lam", "values", "path", "scale", "seed"}
        extra = set(d) - allowed
        if extra:
            raise InputError(f"unknown coupling fields {sorted(extra)}")
        return cls(kind, int(N), **d)


class Coupling(NamedTuple):
    A: np.ndarray
    op_norm: float
    hs_norm: float


def read_coupling_file(path: str | Path, N: int) -> np.ndarray:
    """Parse an ``N x N`` complex matrix stored as rows of ``re im`` pairs.

    Blank lines and lines starting with ``#`` are skipped.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read coupling file {path}: {exc}") from None
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if len(rows) != N:
        raise InputError(f"coupling file has {len(rows)} rows, expected {N}")
    A = np.empty((N, N), dtype=complex)
    for i, line in enumerate(rows):
        tokens = line.split()
        if len(tokens) != 2 * N:
            raise InputError(f"expected {2 * N} numbers ({N} re/im pairs), found {len(tokens)}", row=i + 1)
        for j in range(N):
            try:
                re, im = float(tokens[2 * j]), float(tokens[2 * j + 1])
            except ValueError:
                raise InputError(f"unparsable entry {tokens[2 * j]!r} {tokens[2 * j + 1]!r}",
                                 row=i + 1, col=j + 1) from None
            A[i, j] = complex(re, im)
    return A


def write_coupling_file(path: str | Path, A: np.ndarray) -> None:
    """Inverse of :func:`read_coupling_file` (round-trips exactly via ``repr``)."""
    lines = []
    for row in np.asarray(A, dtype=complex):
        lines.append(" ".join(f"{float(v.real)!r} {float(v.imag)!r}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def make_coupling(spec: CouplingSpec) -> Coupling:
    """Resolve a :class:`CouplingSpec` to the matrix ``A`` and its norms."""
    N = int(spec.N)
    if spec.kind == "scalar":
        A = float(spec.lam) * np.eye(N, dtype=complex)
    elif spec.kind == "diagonal":
        if len(spec.values) != N:
            raise InputError(f"diagonal coupling has {len(spec.values)} values, expected N={N}")
        A = np.diag(np.asarray(spec.values, dtype=complex))
    elif spec.kind == "dense":
        if spec.path is None:
            raise InputError("dense coupling requires a path")
        A = read_coupling_file(spec.path, N)
    else:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(spec.seed))))
        G = (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) / np.sqrt(2 * N)
        A = float(spec.scale) * G
    if not np.all(np.isfinite(A)):
        raise InputError("coupling matrix contains NaN or infinite entries")
    op = float(np.linalg.norm(A, 2)) if N > 0 else 0.0
    hs = float(np.linalg.norm(A, "fro"))
    return Coupling(A, op, hs)


# --------------------------------------------------------------------------
# interaction Lambda
# --------------------------------------------------------------------------

def block_slice(a: int, N: int) -> slice:
    """Index range ``I_a`` of block ``a`` (0-based)."""
    return slice(a * N, (a + 1) * N)


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """The block interaction ``Lambda`` built from ``A``.

    Attributes
    ----------
    D : int
        Number of blocks.
    A : ndarray, shape (N, N)
        Coupling between neighbouring blocks.
    """

    D: int
    A: np.ndarray

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.D * self.N

    @cached_property
    def assembled(self) -> np.ndarray:
        N, D = self.N, self.D
        L = np.zeros((D * N, D * N), dtype=complex)
        AH = self.A.conj().T
        pairs = [(0, 1)] if D == 2 else [(a, (a + 1) % D) for a in range(D)] if D > 2 else []
        for a, b in pairs:
            L[block_slice(a, N), block_slice(b, N)] = self.A
            L[block_slice(b, N), block_slice(a, N)] = AH
        L.setflags(write=False)
        return L

    @property
    def is_zero(self) -> bool:
        return not np.any(self.A)

    @classmethod
    def zero(cls, N: int, D: int) -> "InteractionMatrix":
        """Vanishing interaction; unlike :func:`build_lambda` this allows ``D = 1``."""
        if D < 1 or N < 1:
            raise ArgumentError("zero interaction needs N >= 1 and D >= 1")
        return cls(int(D), np.zeros((N, N), dtype=complex))


def build_lambda(A: np.ndarray, D: int) -> InteractionMatrix:
    """Assemble ``Lambda`` for ``D >= 2`` blocks coupled by ``A``."""
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ArgumentError(f"A must be square, got shape {A.shape}")
    if int(D) != D or D < 2:
        raise ArgumentError(f"number of blocks D must be an integer >= 2, got {D!r}")
    A = A.copy()
    A.setflags(write=False)
    return InteractionMatrix(int(D), A)


# --------------------------------------------------------------------------
# spectrum of Lambda
# --------------------------------------------------------------------------

def _compress(values: np.ndarray, rtol: float = 8 * np.finfo(float).eps):
    """Merge numerically equal sorted values; returns (unique, weights)."""
    if values.size == 0:
        return values, values
    tol = rtol * max(1.0, float(np.max(np.abs(values))))
    breaks = np.flatnonzero(np.diff(values) > tol) + 1
    groups = np.split(values, breaks)
    uniq = np.array([g.mean() for g in groups])
    w = np.array([g.size for g in groups], dtype=float) / values.size
    return uniq, w


class LambdaSpectrum:
    """Sorted eigenvalues of ``Lambda`` together with a lazy eigenbasis.

    Scalar traces ``<f(Lambda)>`` reduce to weighted sums over
    :attr:`atoms` / :attr:`weights`, the distinct eigenvalues and their
    relative multiplicities.

    Parameters
    ----------
    values : ndarray
        Eigenvalues in increasing order.
    N, D : int
        Block dimension and block count.
    basis_factory : callable, optional
        Returns the unitary whose columns are eigenvectors in the order of
        ``values``. Called at most once and shared by rescaled copies.
    a_norm : float, optional
        Operator norm of the underlying coupling ``A``.
    """

    def __init__(self, values, N, D, basis_factory=None, a_norm=None, *, _reversed=False, _cache=None):
        self.values = np.asarray(values, dtype=float)
        self.a_norm = a_norm
        self.N = int(N)
        self.D = int(D)
        self._factory = basis_factory
        self._reversed = _reversed
        self._cache = {} if _cache is None else _cache
        self.atoms, self.weights = _compress(self.values)

    @property
    def dim(self) -> int:
        return self.N * self.D

    def _base_basis(self) -> np.ndarray:
        if "U" not in self._cache:
            U = np.eye(self.dim, dtype=complex) if self._factory is None else self._factory()
            U.setflags(write=False)
            self._cache["U"] = U
        return self._cache["U"]

    def basis(self) -> np.ndarray:
        """Unitary ``U`` with ``Lambda = U diag(values) U^*``."""
        U = self._base_basis()
        return U[:, ::-1] if self._reversed else U

    def block_weights(self) -> np.ndarray:
        """Array ``P[a, j] = ||E_a u_j||^2`` of eigenvector block masses."""
        if "P" not in self._cache:
            U = self._base_basis()
            self._cache["P"] = (np.abs(U) ** 2).reshape(self.D, self.N, self.dim).sum(axis=1)
        P = self._cache["P"]
        return P[:, ::-1] if self._reversed else P

    def scaled(self, s: float) -> "LambdaSpectrum":
        """Spectrum of ``s * Lambda``, sharing the eigenbasis."""
        s = float(s)
        vals = s * self.values
        rev = self._reversed
        if s < 0:
            vals = vals[::-1]
            rev = not rev
        a_norm = None if self.a_norm is None else abs(s) * self.a_norm
        return LambdaSpectrum(vals, self.N, self.D, self._factory, a_norm, _reversed=rev, _cache=self._cache)

    @property
    def norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    @property
    def second_moment(self) -> float:
        """``<Lambda^2>``."""
        return float(np.dot(self.weights, self.atoms ** 2))

    def trace(self, f) -> complex:
        """Normalized trace ``<f(Lambda)>`` for a vectorized ``f``."""
        return np.dot(self.weights, f(self.atoms))

    @classmethod
    def zero(cls, N: int, D: int) -> "LambdaSpectrum":
        """Spectrum of the vanishing interaction (any ``D >= 1``)."""
        return cls(np.zeros(N * D), N, D, None, 0.0)


def lambda_spectrum(A: np.ndarray, D: int) -> LambdaSpectrum:
    """Diagonalize ``Lambda`` through its block-circulant structure.

    For ``D >= 3`` the spectrum is the union over ``k`` of the spectra of
    ``w^k A + w^-k A^*`` with ``w = exp(2 pi i / D)``; the eigenvector with
    mode vector ``phi`` has block ``a`` equal to ``w^{ka} phi / sqrt(D)``.
    For ``D = 2`` the eigenvalues are the signed singular values of ``A``.

    Parameters
    ----------
    A : ndarray, shape (N, N)
    D : int
        Must be at least 2.

    Returns
    -------
    LambdaSpectrum
    """
    lam = A if isinstance(A, InteractionMatrix) else build_lambda(A, D)
    A, D, N = lam.A, lam.D, lam.N

    if D == 2:
        Uu, s, Vh = np.linalg.svd(A)
        a_norm = float(s.max()) if s.size else 0.0
        vals = np.concatenate([-s, s])
        order = np.argsort(vals, kind="stable")

        def factory():
            V = Vh.conj().T
            top = np.concatenate([Uu, Uu], axis=1)
            bot = np.concatenate([-V, V], axis=1)
            return (np.concatenate([top, bot], axis=0) / np.sqrt(2.0))[:, order]
    else:
        a_norm = float(np.linalg.norm(A, 2))
        omegas = np.exp(2j * np.pi * np.arange(D) / D)
        modes = []
        for w in omegas:
            B = w * A + np.conj(w) * A.conj().T
            B = 0.5 * (B + B.conj().T)
            modes.append(np.linalg.eigh(B))
        vals = np.concatenate([m[0] for m in modes])
        order = np.argsort(vals, kind="stable")

        def factory():
            cols = []
            phase = omegas[:, None] ** np.arange(D)[None, :]  # [k, a]
            for k, (_, phi) in enumerate(modes):
                cols.append(np.concatenate([phase[k, a] * phi for a in range(D)], axis=0))
            return (np.concatenate(cols, axis=1) / np.sqrt(D))[:, order]

    return LambdaSpectrum(vals[order], N, D, factory, a_norm)


# --------------------------------------------------------------------------
# Wigner sampling
# --------------------------------------------------------------------------

def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *key)``.

    Streams for different keys are statistically independent and do not
    depend on the order in which they are created.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class WignerDraw:
    """``D`` independent Hermitian ``N x N`` Wigner blocks."""

    blocks: np.ndarray  # shape (D, N, N)
    seed: int
    dist: str
    sample: int = 0

    @property
    def D(self) -> int:
        return self.blocks.shape[0]

    @property
    def N(self) -> int:
        return self.blocks.shape[1]

    def dense(self) -> np.ndarray:
        """Block-diagonal ``H`` as a ``DN x DN`` matrix."""
        N, D = self.N, self.D
        H = np.zeros((D * N, D * N), dtype=complex)
        for a in range(D):
            H[block_slice(a, N), block_slice(a, N)] = self.blocks[a]
        return H


def _wigner_block(rng: np.random.Generator, N: int, dist: str) -> np.ndarray:
    if dist == "complex_gaussian":
        Z = (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) / np.sqrt(2 * N)
        diag = rng.standard_normal(N) / np.sqrt(N)
    elif dist == "complex_rademacher":
        signs = rng.integers(0, 2, size=(2, N, N)) * 2.0 - 1.0
        Z = (signs[0] + 1j * signs[1]) / np.sqrt(2 * N)
        diag = (rng.integers(0, 2, size=N) * 2.0 - 1.0) / np.sqrt(N)
    else:
        raise ArgumentError(f"unknown distribution {dist!r}; expected one of {DISTRIBUTIONS}")
    U = np.triu(Z, 1)
    H = U + U.conj().T
    H[np.diag_indices(N)] = diag
    return H


def sample_wigner(N: int, D: int, dist: str = "complex_gaussian", seed: int = 0,
                  sample: int = 0) -> WignerDraw:
    """Draw ``D`` independent Wigner blocks.

    Block ``a`` of sample ``sample`` uses the stream keyed by
    ``(seed, sample, a)``, so draws are reproducible whatever the order or
    process in which samples are generated.

    Parameters
    ----------
    N, D : int
        Block size and number of blocks.
    dist : {'complex_gaussian', 'complex_rademacher'}
        ``complex_gaussian`` is GUE with ``E|h_ij|^2 = 1/N``;
        ``complex_rademacher`` has off-diagonal entries ``(+-1 +- i)/sqrt(2N)``
        and diagonal ``+-1/sqrt(N)``.
    seed : int
        Global seed.
    sample : int
        Sample index inside an ensemble.
    """
    if N < 1 or D < 1:
        raise ArgumentError("N and D must be positive")
    if dist not in DISTRIBUTIONS:
        raise ArgumentError(f"unknown distribution {dist!r}; expected one of {DISTRIBUTIONS}")
    blocks = np.empty((D, N, N), dtype=complex)
    for a in range(D):
        blocks[a] = _wigner_block(stream(seed, sample, a), N, dist)
    blocks.setflags(write=False)
    return WignerDraw(blocks, int(seed), dist, int(sample))


def assemble(draw: WignerDraw, lam: InteractionMatrix | None, t: float = 1.0) -> np.ndarray:
    """Return the Hermitian matrix ``H + t * Lambda``.

    ``lam=None`` is treated as the zero interaction.
    """
    H = draw.dense()
    if lam is None or t == 0:
        return H
    if lam.N != draw.N or lam.D != draw.D:
        raise ArgumentError(
            f"dimension mismatch: draw has (N, D) = ({draw.N}, {draw.D}), "
            f"interaction has ({lam.N}, {lam.D})")
    return H + float(t) * lam.assembled
