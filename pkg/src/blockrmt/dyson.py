"""Self-consistent spectral theory of ``H + Lambda``.

Everything is driven by the scalar equation

    m(z) = g(z + m(z)),     g(w) = <(Lambda - w)^{-1}>,

whose solution in the upper half plane is the Stieltjes transform of the
deterministic density rho. ``M(z) = (Lambda - z - m)^{-1}`` is diagonal in
Lambda's eigenbasis, so scalar traces reduce to weighted sums over the
distinct eigenvalues of Lambda.

On the real axis the support is parametrized by the subordination point
``w = x + i y``. For ``x`` between the edge points ``w_-`` and ``w_+`` the
height ``y > 0`` solves ``<|Lambda - w|^{-2}> = 1`` (monotone in ``y``),
and then ``E = x - Re g(w)`` and ``rho(E) = y / pi``. Tail masses and
quantiles are computed from Chebyshev interpolants in the angle ``theta``
with ``x = w_+ - (w_+ - w_-)(1 - cos theta)/2``, which makes the square-root
edges smooth.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial import Chebyshev
from scipy.optimize import brentq

from .errors import (AccuracyWarning, BranchError, DomainError, NearSingularError,
                     SingularityError, SolverError)
from .model import LambdaSpectrum, block_slice

TOL = 1e-12
DEFAULT_LADDER = 1e-3 * 2.0 ** -np.arange(7)


# --------------------------------------------------------------------------
# scalar resolvent traces
# --------------------------------------------------------------------------

def m_sc(z):
    """Semicircle Stieltjes transform ``(-z + sqrt(z^2 - 4)) / 2``.

    The branch is the one with ``Im m > 0`` for ``Im z > 0`` (limits from
    above on the real axis).
    """
    z = np.asarray(z, dtype=complex)
    # sqrt(z-2) sqrt(z+2) has its cut on [-2, 2] and behaves like z at infinity
    root = np.sqrt(z - 2) * np.sqrt(z + 2)
    out = 0.5 * (-z + root)
    return out[()] if out.ndim == 0 else out


def g_moments(w, spectrum: LambdaSpectrum, powers: Sequence[int] = (1,)):
    """Return ``<(Lambda - w)^{-p}>`` for each ``p`` in ``powers``."""
    w = np.asarray(w, dtype=complex)
    inv = 1.0 / (spectrum.atoms - w[..., None])
    return [(inv ** p) @ spectrum.weights for p in powers]


# --------------------------------------------------------------------------
# stieltjes solver
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MSolution:
    """Solution of the self-consistent equation at one spectral parameter."""

    z: complex
    m: complex
    residual: float
    iterations: int

    @property
    def im_m(self) -> float:
        return float(self.m.imag)

    @property
    def eta(self) -> float:
        return float(self.z.imag)


def _solve(z, spectrum, m, tol=TOL, max_iter=500, branch_tol=1e-10):
    """Vectorized hybrid Newton / damped fixed-point solver.

    ``z`` must satisfy ``Im z >= 0``. Returns (m, residual, iterations).
    """
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    m = np.atleast_1d(np.asarray(m, dtype=complex)).copy()
    upper = z.imag > 0
    alpha = np.full(z.shape, 0.5)

    def evaluate(mm):
        g0, g1 = g_moments(z + mm, spectrum, (1, 2))
        return mm - g0, g0, g1

    F, g0, g1 = evaluate(m)
    res = np.abs(F)
    it = 0
    with np.errstate(all="ignore"):
        while it < max_iter:
            active = ~(res <= tol)
            if not active.any():
                break
            it += 1
            # Newton proposal
            m_nt = m - F / (1.0 - g1)
            F_nt, g0_nt, g1_nt = evaluate(m_nt)
            r_nt = np.abs(F_nt)
            ok = active & np.isfinite(r_nt) & (r_nt < res) & (m_nt.imag >= np.where(upper, 0.0, -branch_tol))
            # damped fixed point for the rest
            m_fp = (1 - alpha) * m + alpha * g0
            F_fp, g0_fp, g1_fp = evaluate(m_fp)
            r_fp = np.abs(F_fp)
            fp = active & ~ok
            worse = fp & ~(r_fp < res)
            alpha = np.where(worse, alpha * 0.5, alpha)
            take_fp = fp & ~worse
            for arr, a_nt, a_fp in ((m, m_nt, m_fp), (F, F_nt, F_fp), (g0, g0_nt, g0_fp), (g1, g1_nt, g1_fp)):
                arr[ok] = a_nt[ok]
                arr[take_fp] = a_fp[take_fp]
            res = np.abs(F)
            if np.any(fp & (alpha < 1e-12)):
                # damping exhausted: accept the fixed-point step anyway
                stuck = fp & (alpha < 1e-12)
                m[stuck] = m_fp[stuck]
                F, g0, g1 = evaluate(m)
                res = np.abs(F)
                alpha[stuck] = 0.5
    return m, res, it


def stieltjes(z: complex, spectrum: LambdaSpectrum, guess: complex | None = None,
              tol: float = TOL, max_iter: int = 500) -> MSolution:
    """Solve ``m = <(Lambda - z - m)^{-1}>`` at a single ``z``.

    Parameters
    ----------
    z : complex
        Spectral parameter. ``Im z < 0`` is handled by conjugation, so
        ``stieltjes(conj(z))`` is exactly the conjugate solution.
    spectrum : LambdaSpectrum
    guess : complex, optional
        Starting point. For real ``z`` it defines the continuation branch;
        without it an internal ladder ``z + i 10^{-j}`` is followed down to
        the real axis.
    tol : float
        Residual tolerance on ``|m - g(z + m)|``.

    Raises
    ------
    SolverError
        No convergence within ``max_iter`` iterations.
    BranchError
        The converged solution has ``Im m < 0``.
    """
    z = complex(z)
    if z.imag < 0:
        sol = stieltjes(z.conjugate(), spectrum, None if guess is None else complex(guess).conjugate(),
                        tol, max_iter)
        return MSolution(z, sol.m.conjugate(), sol.residual, sol.iterations)
    iters = 0
    if z.imag == 0 and guess is None:
        m0 = complex(m_sc(z + 1j))
        for eta in 10.0 ** -np.arange(0, 9):
            m_arr, r, k = _solve(z + 1j * eta, spectrum, m0, tol, max_iter)
            m0 = complex(m_arr[0])
            iters += k
        guess = m0
    m0 = complex(m_sc(z) if guess is None else guess)
    m_arr, r, k = _solve(z, spectrum, m0, tol, max_iter)
    m, res = complex(m_arr[0]), float(r[0])
    iters += k
    if not res <= tol and z.imag > 0:
        # continuation in eta from far above the spectrum
        top = max(1.0, 2.0 * z.imag)
        etas = np.geomspace(top, z.imag, max(2, int(np.ceil(np.log2(top / z.imag))) + 1))
        m0 = complex(m_sc(complex(z.real, top)))
        for eta in etas:
            m_arr, r, k = _solve(complex(z.real, eta), spectrum, m0, tol, max_iter)
            m0 = complex(m_arr[0])
            iters += k
        m, res = m0, float(r[0])
    if not res <= tol:
        raise SolverError(f"self-consistent equation did not converge at z={z}", res)
    if m.imag < -1e-10:
        raise BranchError(f"solution left the upper half plane at z={z} (Im m={m.imag:.3e})", res)
    return MSolution(z, m, res, iters)


def stieltjes_many(z, spectrum: LambdaSpectrum, guess=None, tol: float = TOL,
                   max_iter: int = 500) -> np.ndarray:
    """Vectorized :func:`stieltjes` for ``Im z > 0`` (or conjugates thereof)."""
    z = np.asarray(z, dtype=complex)
    flat = z.ravel()
    lower = flat.imag < 0
    zz = np.where(lower, flat.conj(), flat)
    if np.any(zz.imag == 0):
        raise DomainError("stieltjes_many needs Im z != 0; use stieltjes for real z")
    m0 = m_sc(zz) if guess is None else np.where(lower, np.conj(guess).ravel(), np.asarray(guess).ravel())
    m, res, _ = _solve(zz, spectrum, m0, tol, max_iter)
    if not np.all(res <= tol):
        raise SolverError("self-consistent equation did not converge on the whole grid", float(np.nanmax(res)))
    m = np.where(lower, m.conj(), m)
    return m.reshape(z.shape)


def m_diag(z: complex, spectrum: LambdaSpectrum, m: complex | None = None) -> np.ndarray:
    """Eigenvalues ``1/(mu_j - z - m)`` of ``M(z)`` in Lambda's eigenbasis."""
    if m is None:
        m = stieltjes(z, spectrum).m
    return 1.0 / (spectrum.values - z - m)


def m_matrix(z: complex, spectrum: LambdaSpectrum, m: complex | None = None) -> np.ndarray:
    """Dense ``M(z) = (Lambda - z - m(z))^{-1}`` of size ``DN x DN``."""
    d = m_diag(z, spectrum, m)
    U = spectrum.basis()
    return (U * d) @ U.conj().T


def m_matrix_d2(z: complex, A: np.ndarray, m: complex) -> np.ndarray:
    """Closed-form ``M`` for two blocks ``[[0, A], [A^*, 0]]``.

    With ``w = z + m``::

        M11 = w (A A^* - w^2)^{-1}      M12 = A (A^* A - w^2)^{-1}
        M21 = A^* (A A^* - w^2)^{-1}    M22 = w (A^* A - w^2)^{-1}
    """
    A = np.asarray(A, dtype=complex)
    N = A.shape[0]
    w = z + m
    I = np.eye(N)
    R1 = np.linalg.inv(A @ A.conj().T - w ** 2 * I)
    R2 = np.linalg.inv(A.conj().T @ A - w ** 2 * I)
    M = np.empty((2 * N, 2 * N), dtype=complex)
    M[:N, :N] = w * R1
    M[:N, N:] = A @ R2
    M[N:, :N] = A.conj().T @ R1
    M[N:, N:] = w * R2
    return M


# --------------------------------------------------------------------------
# edges
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeData:
    """Spectral edges, subordination points and curvatures.

    ``perturbative`` records whether ``||A|| < 1/4``; outside that range
    the numbers are still computed but the single-interval theory is not
    guaranteed.
    """

    E_minus: float
    E_plus: float
    w_minus: float
    w_plus: float
    gamma_minus: float
    gamma_plus: float
    residual_minus: float = 0.0
    residual_plus: float = 0.0
    perturbative: bool = True

    @property
    def width(self) -> float:
        return self.E_plus - self.E_minus


def _edge_point(spectrum: LambdaSpectrum, side: int) -> float:
    mu = spectrum.atoms
    if side > 0:
        top, p = mu[-1], spectrum.weights[-1]
        h = lambda w: g_moments(w, spectrum, (2,))[0].real - 1.0
        lo, hi = top + 0.5 * np.sqrt(p), top + 1.0
    else:
        top, p = mu[0], spectrum.weights[0]
        h = lambda w: g_moments(w, spectrum, (2,))[0].real - 1.0
        lo, hi = top - 1.0, top - 0.5 * np.sqrt(p)
    flo, fhi = h(lo), h(hi)
    if not (np.sign(flo) != np.sign(fhi)):
        raise DomainError(f"edge bracket failure on side {side:+d} (h={flo:.3e}, {fhi:.3e})")
    return brentq(h, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)


def _check_single_interval(spectrum: LambdaSpectrum, chunk: int = 256) -> None:
    mu = spectrum.atoms
    if mu.size < 2:
        return
    mids = 0.5 * (mu[1:] + mu[:-1])
    for i in range(0, mids.size, chunk):
        gp = g_moments(mids[i:i + chunk], spectrum, (2,))[0].real
        if np.any(gp <= 1.0):
            x = mids[i:i + chunk][np.argmin(gp)]
            raise DomainError(f"density support has a gap near subordination point x={x:.6g}")


def edges(spectrum: LambdaSpectrum, a_norm: float | None = None, strict: bool = False) -> EdgeData:
    """Locate ``E^-`` and ``E^+`` and the curvatures ``gamma_-+``.

    The edge subordination points solve ``<(Lambda - w)^{-2}> = 1`` outside
    the spectrum of Lambda; the edges are ``E = w - g(w)``. Since
    ``z(w) = w - g(w)`` has a critical point there, the density behaves as
    ``sqrt(2 kappa / |g''(w)|) / pi`` and ``gamma = (2/|g''(w)|)^{1/3}``.

    Parameters
    ----------
    spectrum : LambdaSpectrum
    a_norm : float, optional
        Operator norm of ``A``; defaults to the value stored on the spectrum.
    strict : bool
        Raise :class:`DomainError` when ``||A|| >= 1/4`` instead of flagging.
    """
    if a_norm is None:
        a_norm = getattr(spectrum, "a_norm", None)
    if a_norm is None:
        a_norm = spectrum.norm
    perturbative = a_norm < 0.25
    if strict and not perturbative:
        raise DomainError(f"||A|| = {a_norm:.4g} outside the perturbative range ||A|| < 1/4")
    _check_single_interval(spectrum)
    out = {}
    for side, tag in ((1, "plus"), (-1, "minus")):
        w = _edge_point(spectrum, side)
        g1, g2, g3 = g_moments(w, spectrum, (1, 2, 3))
        E = w - g1.real
        gamma = (2.0 / abs(2.0 * g3.real)) ** (1.0 / 3.0)
        out[tag] = (float(E), float(w), float(gamma), float(abs(g2.real - 1.0)))
    return EdgeData(out["minus"][0], out["plus"][0], out["minus"][1], out["plus"][1],
                    out["minus"][2], out["plus"][2], out["minus"][3], out["plus"][3], perturbative)


# --------------------------------------------------------------------------
# real-axis density through the subordination curve
# --------------------------------------------------------------------------

def _height(x, spectrum: LambdaSpectrum, n_bisect: int = 48, n_newton: int = 6) -> np.ndarray:
    """Solve ``<((Lambda - x)^2 + s)^{-1}> = 1`` for ``s = y^2`` in [0, 1]."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a = (spectrum.atoms[None, :] - x[:, None]) ** 2
    wts = spectrum.weights

    def phi(s):
        with np.errstate(divide="ignore"):
            return (1.0 / (a + s[:, None])) @ wts - 1.0

    inside = phi(np.zeros_like(x)) > 0
    lo = np.zeros_like(x)
    hi = np.ones_like(x)
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        pos = phi(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    # Newton from the left is monotone for this convex decreasing function
    s = lo
    with np.errstate(divide="ignore", invalid="ignore"):
        for _ in range(n_newton):
            inv = 1.0 / (a + s[:, None])
            f = inv @ wts - 1.0
            fp = -(inv ** 2) @ wts
            s_new = s - f / fp
            s = np.where(np.isfinite(s_new), np.clip(s_new, lo, hi), s)
    s = np.where(inside, s, 0.0)
    return np.sqrt(s)


class SpectralCurve:
    """Real-axis density, tail masses and quantiles for a given Lambda.

    Parameters
    ----------
    spectrum : LambdaSpectrum
    edge : EdgeData, optional
        Precomputed edges.
    tol : float
        Target size of the trailing Chebyshev coefficients.
    max_degree : int
        Upper limit for the adaptive Chebyshev degree.
    """

    def __init__(self, spectrum: LambdaSpectrum, edge: EdgeData | None = None,
                 tol: float = 1e-14, max_degree: int = 8192):
        self.spectrum = spectrum
        self.edge = edge if edge is not None else edges(spectrum)
        self.tol = tol
        self._build(max_degree)

    # -- parametrization -------------------------------------------------
    def x_of_theta(self, theta):
        wl, wr = self.edge.w_minus, self.edge.w_plus
        return wr - (wr - wl) * (1.0 - np.cos(theta)) / 2.0

    def point(self, x):
        """Return ``(y, E, weight)`` with ``weight = y dE/dx``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = _height(x, self.spectrum)
        w = x + 1j * y
        g1, g2 = g_moments(w, self.spectrum, (1, 2))
        E = x - g1.real
        d = (self.spectrum.atoms[None, :] - x[:, None]) ** 2 + y[:, None] ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            S2 = (1.0 / d ** 2) @ self.spectrum.weights
            Fx = (2.0 * (self.spectrum.atoms[None, :] - x[:, None]) / d ** 2) @ self.spectrum.weights
            weight = y * (1.0 - g2.real) + np.where(y > 0, y * Fx ** 2 / (2.0 * S2), 0.0)
        return y, E, weight

    def _integrand(self, theta):
        theta = np.asarray(theta, dtype=float)
        x = self.x_of_theta(theta)
        y, E, wgt = self.point(x)
        dx = (self.edge.w_plus - self.edge.w_minus) * np.sin(theta) / 2.0
        return wgt * dx / np.pi, E

    def _build(self, max_degree):
        deg = 32
        prev_total = None
        while True:
            nodes = Chebyshev.basis(deg + 1, domain=[0, np.pi]).roots()
            f, E = self._integrand(nodes)
            cf = Chebyshev.fit(nodes, f, deg, domain=[0, np.pi])
            ce = Chebyshev.fit(nodes, E, deg, domain=[0, np.pi])
            tail_f = np.max(np.abs(cf.coef[-8:])) / max(np.max(np.abs(cf.coef)), 1e-300)
            tail_e = np.max(np.abs(ce.coef[-8:])) / max(np.max(np.abs(ce.coef)), 1e-300)
            total = cf.integ(lbnd=0)(np.pi)
            converged = tail_f < self.tol and tail_e < self.tol
            if prev_total is not None and converged and abs(total - prev_total) < 1e-13:
                break
            if 2 * deg > max_degree:
                if not converged:
                    warnings.warn(f"Chebyshev tail mass not converged at degree {deg} "
                                  f"(trailing ratio {max(tail_f, tail_e):.2e})", AccuracyWarning, stacklevel=3)
                break
            prev_total = total
            deg *= 2
        self.degree = deg
        self._f = cf
        self._T = cf.integ(lbnd=0)
        self._E = ce
        self._dE = ce.deriv()
        self.total_mass = float(self._T(np.pi))

    # -- inversions ------------------------------------------------------
    def theta_of_energy(self, E) -> np.ndarray:
        """Angle with ``E(theta) = E`` (E decreasing in theta); clipped to [0, pi]."""
        E = np.atleast_1d(np.asarray(E, dtype=float))
        lo = np.zeros_like(E)
        hi = np.full_like(E, np.pi)
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            above = self._E(mid) > E
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        th = 0.5 * (lo + hi)
        for _ in range(3):
            d = self._dE(th)
            step = np.where(np.abs(d) > 1e-300, (self._E(th) - E) / np.where(d == 0, 1, d), 0.0)
            th = np.clip(th - step, lo, hi)
        return th

    def theta_of_tail(self, p) -> np.ndarray:
        """Angle with tail mass ``T(theta) = p``."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        lo = np.zeros_like(p)
        hi = np.full_like(p, np.pi)
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            below = self._T(mid) < p
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        th = 0.5 * (lo + hi)
        for _ in range(3):
            f = self._f(th)
            step = np.where(f > 0, (self._T(th) - p) / np.where(f > 0, f, 1), 0.0)
            th = np.clip(th - step, lo, hi)
        return th

    # -- public evaluators -------------------------------------------------
    def density(self, E) -> np.ndarray:
        """``rho(E)``, zero outside ``[E^-, E^+]``."""
        E = np.atleast_1d(np.asarray(E, dtype=float))
        out = np.zeros_like(E)
        inside = (E > self.edge.E_minus) & (E < self.edge.E_plus)
        if inside.any():
            th = self.theta_of_energy(E[inside])
            y, _, _ = self.point(self.x_of_theta(th))
            out[inside] = y / np.pi
        return out

    def tail_mass(self, E) -> np.ndarray:
        """Mass of rho above ``E``."""
        E = np.atleast_1d(np.asarray(E, dtype=float))
        out = np.where(E >= self.edge.E_plus, 0.0, self.total_mass)
        inside = (E > self.edge.E_minus) & (E < self.edge.E_plus)
        if inside.any():
            out[inside] = self._T(self.theta_of_energy(E[inside]))
        return out

    def cdf(self, E) -> np.ndarray:
        """Mass of rho below ``E``."""
        return self.total_mass - self.tail_mass(E)

    def energy_at_tail(self, p) -> np.ndarray:
        """Energy with tail mass ``p`` (``p`` in ``[0, 1]``)."""
        return self._E(self.theta_of_tail(p))


# --------------------------------------------------------------------------
# density front ends
# --------------------------------------------------------------------------

def richardson(values: np.ndarray, ratio: float) -> tuple[float, float]:
    """Extrapolate ``values[j] = f(h0 ratio^j)`` to ``h = 0``.

    Assumes an expansion in integer powers of ``h``. Returns the estimate
    and the difference between the last two table diagonals.
    """
    T = [np.asarray(values, dtype=float)]
    for k in range(1, len(values)):
        prev = T[-1]
        fac = ratio ** -k
        T.append((fac * prev[1:] - prev[:-1]) / (fac - 1.0))
    best = T[-1][0]
    err = abs(T[-1][0] - T[-2][-1]) if len(T) > 1 else np.inf
    return float(best), float(err)


def density_ladder(E: float, spectrum: LambdaSpectrum, ladder=DEFAULT_LADDER) -> tuple[float, float]:
    """``rho(E)`` by Richardson extrapolation of ``Im m(E + i eta) / pi``.

    Returns the value and the extrapolation disagreement.
    """
    ladder = np.asarray(ladder, dtype=float)
    if np.any(np.diff(ladder) >= 0):
        raise ValueError("eta ladder must be strictly decreasing")
    ms = stieltjes_many(E + 1j * ladder, spectrum)
    ratio = ladder[1] / ladder[0]
    if not np.allclose(ladder[1:] / ladder[:-1], ratio):
        raise ValueError("eta ladder must be geometric")
    val, err = richardson(ms.imag / np.pi, ratio)
    return max(val, 0.0), err


def density(E, spectrum: LambdaSpectrum, ladder=None, curve: SpectralCurve | None = None,
            method: str = "curve"):
    """Deterministic density ``rho(E)``.

    Parameters
    ----------
    E : float or array
    spectrum : LambdaSpectrum
    ladder : sequence of float, optional
        Decreasing geometric ``eta`` ladder for ``method='ladder'``.
    curve : SpectralCurve, optional
        Reused for ``method='curve'``.
    method : {'curve', 'ladder'}
        ``curve`` evaluates the exact real-axis solution; ``ladder``
        extrapolates from the upper half plane and warns with
        :class:`AccuracyWarning` if the extrapolation disagreement exceeds
        ``1e-5``.
    """
    scalar = np.ndim(E) == 0
    E_arr = np.atleast_1d(np.asarray(E, dtype=float))
    if method == "curve":
        curve = curve if curve is not None else SpectralCurve(spectrum)
        out = curve.density(E_arr)
    elif method == "ladder":
        ladder = DEFAULT_LADDER if ladder is None else ladder
        out = np.empty_like(E_arr)
        worst = 0.0
        for i, e in enumerate(E_arr):
            out[i], err = density_ladder(e, spectrum, ladder)
            worst = max(worst, err)
        if worst > 1e-5:
            warnings.warn(f"eta-ladder extrapolation disagreement {worst:.2e} > 1e-5", AccuracyWarning,
                          stacklevel=2)
    else:
        raise ValueError(f"unknown density method {method!r}")
    return float(out[0]) if scalar else out


@dataclass
class DensityProfile:
    grid: np.ndarray
    rho: np.ndarray
    eta_ladder: np.ndarray = field(default_factory=lambda: np.array([]))
    method: str = "curve"

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.grid, self.rho]), delimiter=",", header="E,rho",
                   comments="", fmt="%.17g")


def density_profile(grid, spectrum: LambdaSpectrum, method: str = "curve", ladder=None,
                    curve: SpectralCurve | None = None) -> DensityProfile:
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("density grid must be strictly increasing")
    rho = density(grid, spectrum, ladder=ladder, curve=curve, method=method)
    lad = np.asarray(DEFAULT_LADDER if ladder is None else ladder) if method == "ladder" else np.array([])
    return DensityProfile(grid, np.asarray(rho), lad, method)


def curvature_extrapolated(curve: SpectralCurve, side: int = 1,
                           offsets=(1e-2, 1e-3, 1e-4)) -> float:
    """Curvature from the square-root ratio ``(pi rho / sqrt(kappa))^{2/3}``.

    The ratio is analytic in ``kappa`` near the edge, so the three samples
    are combined by polynomial (Neville) extrapolation to ``kappa = 0``.
    """
    e = curve.edge
    kappas = np.asarray(offsets) * e.width
    E = e.E_plus - kappas if side > 0 else e.E_minus + kappas
    rho = curve.density(E)
    r = (np.pi * rho / np.sqrt(kappas)) ** (2.0 / 3.0)
    # Neville at 0
    P = list(r)
    k = list(kappas)
    n = len(P)
    for lvl in range(1, n):
        for i in range(n - lvl):
            P[i] = (k[i + lvl] * P[i] - k[i] * P[i + 1]) / (k[i + lvl] - k[i])
    return float(P[0])


# --------------------------------------------------------------------------
# quantiles
# --------------------------------------------------------------------------

def semicircle_tail_angle(p) -> np.ndarray:
    """Angle ``phi`` with semicircle mass above ``2 cos(phi)`` equal to ``p``."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    tail = lambda ph: (ph - np.sin(ph) * np.cos(ph)) / np.pi
    lo = np.zeros_like(p)
    hi = np.full_like(p, np.pi)
    for _ in range(45):
        mid = 0.5 * (lo + hi)
        below = tail(mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    ph = 0.5 * (lo + hi)
    for _ in range(3):
        d = 2.0 * np.sin(ph) ** 2 / np.pi
        ph = np.clip(ph - np.where(d > 0, (tail(ph) - p) / np.where(d > 0, d, 1), 0), lo, hi)
    return ph


def semicircle_quantiles(n: int) -> np.ndarray:
    """``gamma_k^sc`` for ``k = 1..n``: mass ``(k - 1/2)/n`` above each."""
    p = (np.arange(1, n + 1) - 0.5) / n
    return 2.0 * np.cos(semicircle_tail_angle(p))


def semicircle_tail(x) -> np.ndarray:
    """Semicircle mass above ``x``."""
    x = np.clip(np.asarray(x, dtype=float), -2.0, 2.0)
    ph = np.arccos(x / 2.0)
    return (ph - np.sin(ph) * np.cos(ph)) / np.pi


@dataclass
class QuantileTable:
    """Quantiles ``gamma_1 >= ... >= gamma_{DN}`` of rho and of the semicircle."""

    N: int
    D: int
    gamma: np.ndarray
    gamma_sc: np.ndarray
    edge: EdgeData | None = None

    def r(self) -> np.ndarray:
        k = np.arange(1, self.N * self.D + 1)
        return np.minimum(k, self.N * self.D + 1 - k)

    def to_csv(self, path, ks=None) -> None:
        n = self.N * self.D
        ks = np.arange(1, n + 1) if ks is None else np.asarray(ks, dtype=int)
        data = np.column_stack([ks, self.gamma[ks - 1], self.gamma_sc[ks - 1]])
        np.savetxt(path, data, delimiter=",", header="k,gamma_k,gamma_k_sc", comments="",
                   fmt=["%d", "%.17g", "%.17g"])


def quantiles(N: int, D: int, spectrum: LambdaSpectrum, curve: SpectralCurve | None = None) -> QuantileTable:
    """Quantiles ``gamma_k`` with mass ``(k - 1/2)/(DN)`` of rho above them."""
    if N * D != spectrum.dim:
        raise ValueError(f"N*D = {N * D} does not match the spectrum dimension {spectrum.dim}")
    curve = curve if curve is not None else SpectralCurve(spectrum)
    n = N * D
    p = (np.arange(1, n + 1) - 0.5) / n
    gamma = curve.energy_at_tail(p)
    gamma = np.clip(np.minimum.accumulate(gamma), curve.edge.E_minus, curve.edge.E_plus)
    return QuantileTable(N, D, gamma, semicircle_quantiles(n), curve.edge)


# --------------------------------------------------------------------------
# shifts and cancellation checks
# --------------------------------------------------------------------------

def shift_ev(z1: complex, spectrum: LambdaSpectrum, m: complex | None = None) -> float:
    """``Delta_ev = Re(z1 + m + 1/m)``; exactly 0 on the semicircle."""
    if m is None:
        m = stieltjes(z1, spectrum).m
    if abs(m) < 1e-8:
        raise SingularityError(f"|m(z1)| = {abs(m):.2e} too small for the shift", abs(m))
    if spectrum.norm == 0:
        return 0.0
    return float((z1 + m + 1.0 / m).real)


def delta_t(t: float, k: int, eta: float, spectrum: LambdaSpectrum) -> float:
    """``Delta(t) = <M_t Lambda M_t^*> / <M_t M_t^*>`` at ``z_t = gamma_k(t) + i eta``.

    ``M_t`` is built from ``t Lambda`` and ``gamma_k(t)`` is the quantile of
    the density of ``H + t Lambda``.
    """
    if spectrum.norm == 0 or t == 0:
        return 0.0
    sp_t = spectrum.scaled(t)
    curve = SpectralCurve(sp_t)
    g = float(curve.energy_at_tail([(k - 0.5) / spectrum.dim])[0])
    z = g + 1j * eta
    m = stieltjes(z, sp_t).m
    d2 = np.abs(1.0 / (sp_t.atoms - z - m)) ** 2
    return float(np.dot(spectrum.weights, spectrum.atoms * d2) / np.dot(spectrum.weights, d2))


def shift_e(k: int, eta: float, spectrum: LambdaSpectrum, n0: int = 16, tol: float = 1e-9,
            max_nodes: int = 256) -> float:
    """``Delta_e = int_0^1 Delta(t) dt`` by Gauss-Legendre with node doubling."""
    if spectrum.norm == 0:
        return 0.0
    n = n0
    prev = None
    while True:
        x, w = np.polynomial.legendre.leggauss(n)
        t = 0.5 * (x + 1.0)
        val = 0.5 * sum(wi * delta_t(ti, k, eta, spectrum) for ti, wi in zip(t, w))
        if prev is not None and abs(val - prev) < tol:
            return float(val)
        if 2 * n > max_nodes:
            warnings.warn(f"shift_e quadrature not converged (change {abs(val - prev):.2e})",
                          AccuracyWarning, stacklevel=2)
            return float(val)
        prev = val
        n *= 2


def regularity_check(z1: complex, spectrum: LambdaSpectrum) -> dict:
    """Size of ``<M0 Lt M1 E_a>`` relative to ``Im m(z1) <Lambda^2>``.

    ``M0`` runs over ``{m_sc(z0), conj(m_sc(z0))} * I`` with
    ``z0 = z1 - Delta_ev``, ``M1`` over ``{M(z1), M(z1)^*}``, ``a`` over all
    blocks and ``Lt = Lambda - Delta_ev``.
    """
    sol = stieltjes(z1, spectrum)
    dev = shift_ev(z1, spectrum, sol.m)
    z0 = z1 - dev
    m0 = complex(m_sc(z0))
    d = 1.0 / (spectrum.values - z1 - sol.m)
    P = spectrum.block_weights()
    lt = spectrum.values - dev
    lam2 = spectrum.second_moment
    numer = []
    for M0 in (m0, m0.conjugate()):
        for dd in (d, d.conj()):
            for a in range(spectrum.D):
                numer.append(abs(M0 * np.sum(lt * dd * P[a]) / spectrum.dim))
    numer = np.asarray(numer)
    denom = sol.im_m * lam2
    ratio = numer / denom if denom > 0 else np.where(numer == 0, 0.0, np.inf)
    return {"z1": z1, "z0": z0, "delta_ev": dev, "max_numerator": float(numer.max()),
            "im_m": sol.im_m, "lambda2": lam2, "max_ratio": float(np.max(ratio))}


def stability_ratio(z: complex, spectrum: LambdaSpectrum, edge: EdgeData) -> float:
    """``|1 - <M^2>| / sqrt(kappa + eta)`` with ``kappa`` the distance to the nearest edge."""
    sol = stieltjes(z, spectrum)
    m2 = g_moments(z + sol.m, spectrum, (2,))[0]
    kappa = min(abs(edge.E_plus - z.real), abs(z.real - edge.E_minus))
    return float(abs(1.0 - m2) / np.sqrt(kappa + z.imag))


# --------------------------------------------------------------------------
# D x D loop algebra
# --------------------------------------------------------------------------

@dataclass
class DeterministicLoopAlgebra:
    """``M_hat``, ``K = (1 - M_hat)^{-1} M_hat`` and optionally the 3-tensor ``K3``."""

    z1: complex
    z2: complex
    M_hat: np.ndarray
    K: np.ndarray
    z3: complex | None = None
    K3: np.ndarray | None = None
    cond: float = 1.0


def _blocks(M: np.ndarray, D: int) -> np.ndarray:
    N = M.shape[0] // D
    return M.reshape(D, N, D, N).transpose(0, 2, 1, 3)


def m_hat(M1: np.ndarray, M2: np.ndarray, D: int) -> np.ndarray:
    """``M_hat[a, b] = D <M1 E_a M2 E_b>`` from dense matrices."""
    N = M1.shape[0] // D
    B1, B2 = _blocks(M1, D), _blocks(M2, D)
    # <M1 E_a M2 E_b> = (1/DN) sum_{i in I_b, j in I_a} M1_ij M2_ji
    return np.einsum("baij,abji->ab", B1, B2) / N


def three_tensor(M1: np.ndarray, M2: np.ndarray, M3: np.ndarray, D: int) -> np.ndarray:
    """``T[b1, b2, b3] = D <M1 E_b1 M2 E_b2 M3 E_b3>``."""
    N = M1.shape[0] // D
    B1, B2, B3 = _blocks(M1, D), _blocks(M2, D), _blocks(M3, D)
    return np.einsum("caij,abjk,bcki->abc", B1, B2, B3, optimize=True) / N


def _resolve_stable(Mh: np.ndarray, max_cond: float):
    # cond(1 - M_hat) alone misses a small multiple of the identity, so the
    # size of the inverse is bounded as well
    I = np.eye(Mh.shape[0])
    cond = np.linalg.cond(I - Mh)
    if np.isfinite(cond):
        cond = max(cond, float(np.linalg.norm(np.linalg.inv(I - Mh), 2)))
    if not np.isfinite(cond) or cond > max_cond:
        raise NearSingularError(f"1 - M_hat is near singular (condition number {cond:.3e})", cond)
    return np.linalg.inv(I - Mh), cond


def k3_from(T: np.ndarray, R12: np.ndarray, R23: np.ndarray, R31: np.ndarray) -> np.ndarray:
    """Contract ``T`` with ``(1 - M_hat)^{-1}`` factors on each index."""
    return np.einsum("ax,by,cz,xyz->abc", R12, R23, R31, T, optimize=True)


def loop_algebra(z1: complex, z2: complex, spectrum: LambdaSpectrum, z3: complex | None = None,
                 max_cond: float = 1e12) -> DeterministicLoopAlgebra:
    """Deterministic two- (and three-) resolvent algebra for ``D`` blocks.

    Raises
    ------
    NearSingularError
        When ``cond(1 - M_hat) > max_cond``, e.g. for ``z2 = conj(z1)`` on
        the real axis.
    """
    D = spectrum.D
    M1 = m_matrix(z1, spectrum)
    M2 = m_matrix(z2, spectrum)
    Mh12 = m_hat(M1, M2, D)
    R12, cond = _resolve_stable(Mh12, max_cond)
    K = R12 @ Mh12
    out = DeterministicLoopAlgebra(z1, z2, Mh12, K, cond=cond)
    if z3 is not None:
        M3 = m_matrix(z3, spectrum)
        R23, _ = _resolve_stable(m_hat(M2, M3, D), max_cond)
        R31, _ = _resolve_stable(m_hat(M3, M1, D), max_cond)
        out.z3 = z3
        out.K3 = k3_from(three_tensor(M1, M2, M3, D), R12, R23, R31)
    return out
