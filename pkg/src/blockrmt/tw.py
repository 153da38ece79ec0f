"""Tracy-Widom (beta = 2) distribution and goodness-of-fit helpers.

The table is built from the Hastings-McLeod solution of Painleve II,

    q'' = s q + 2 q^3,     q(s) ~ Ai(s)  as s -> +inf,

with ``F2(s) = exp(-u(s))`` and ``u(s) = int_s^inf (x - s) q(x)^2 dx``.
Integrating backwards from ``s = 8`` the system ``(q, q', v, u)`` with
``v = int_s^inf q^2`` gives ``f2 = v F2`` without numerical differentiation.

:func:`fredholm_f2` evaluates ``det(I - K_Airy)`` on ``L^2(s, inf)`` by
Gauss-Legendre discretization and serves as an independent reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson, solve_ivp
from scipy.interpolate import CubicHermiteSpline
from scipy.special import airy

from .errors import ArgumentError, ConstructionError

S_MIN, S_MAX = -10.0, 8.0


def _airy_tails(s: float):
    """Airy data and tail integrals ``int_s^inf Ai^2`` and ``int_s^inf (x-s) Ai^2``."""
    ai, aip, _, _ = airy(s)
    v = aip ** 2 - s * ai ** 2
    u = (2 * s ** 2 * ai ** 2 - 2 * s * aip ** 2 - ai * aip) / 3.0
    return ai, aip, v, u


@dataclass
class TWTable:
    """Tabulated TW2 law on ``[-10, 8]`` with cubic Hermite interpolation."""

    s_grid: np.ndarray
    q: np.ndarray
    F2: np.ndarray
    f2: np.ndarray
    df2: np.ndarray

    def __post_init__(self):
        self._F = CubicHermiteSpline(self.s_grid, self.F2, self.f2)
        self._f = CubicHermiteSpline(self.s_grid, self.f2, self.df2)

    def cdf(self, s):
        """``F2(s)``, clamped to 0 below and 1 above the grid."""
        s = np.asarray(s, dtype=float)
        out = np.clip(self._F(np.clip(s, self.s_grid[0], self.s_grid[-1])), 0.0, 1.0)
        out = np.where(s < self.s_grid[0], 0.0, np.where(s > self.s_grid[-1], 1.0, out))
        return out[()] if out.ndim == 0 else out

    def pdf(self, s):
        s = np.asarray(s, dtype=float)
        inside = (s >= self.s_grid[0]) & (s <= self.s_grid[-1])
        out = np.where(inside, np.maximum(self._f(np.clip(s, self.s_grid[0], self.s_grid[-1])), 0.0), 0.0)
        return out[()] if out.ndim == 0 else out

    def moments(self) -> tuple[float, float]:
        """Mean and variance from the tabulated density."""
        s, f = self.s_grid, self.f2
        mass = simpson(f, x=s)
        mean = simpson(s * f, x=s) / mass
        var = simpson((s - mean) ** 2 * f, x=s) / mass
        return float(mean), float(var)

    def normalization(self) -> float:
        return float(simpson(self.f2, x=self.s_grid))

    def quantile(self, p):
        """Inverse CDF by bisection on the interpolant."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        lo = np.full_like(p, self.s_grid[0])
        hi = np.full_like(p, self.s_grid[-1])
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < p
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` TW2 variates by inverse transform sampling."""
        return self.quantile(rng.uniform(size=n))

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.s_grid, self.F2, self.f2]), delimiter=",",
                   header="s,F2,f2", comments="", fmt="%.17g")


def build_tw2(tol: float = 1e-13, h: float = 1.0 / 256, s_min: float = S_MIN,
              s_max: float = S_MAX) -> TWTable:
    """Integrate Painleve II backwards from ``s_max`` and tabulate ``F2``.

    Parameters
    ----------
    tol : float
        Relative tolerance of the ODE integrator.
    h : float
        Grid spacing of the table.

    Raises
    ------
    ConstructionError
        If ``q`` leaves the Hastings-McLeod branch (sign change or blow-up)
        or the tails are not where they should be.
    """
    ai, aip, v0, u0 = _airy_tails(s_max)

    def rhs(s, y):
        q, qp, v, u = y
        return [qp, s * q + 2 * q ** 3, -q * q, -v]

    sol = solve_ivp(rhs, (s_max, s_min), [ai, aip, v0, u0], method="DOP853", rtol=tol,
                    atol=1e-300, dense_output=True)
    if not sol.success:
        raise ConstructionError(f"Painleve II integration failed: {sol.message}")
    n = int(round((s_max - s_min) / h))
    s = np.linspace(s_min, s_max, n + 1)
    q, qp, v, u = sol.sol(s)
    # Hastings-McLeod: positive, and ~ sqrt(-s/2) on the left
    if np.any(q <= 0) or np.any(q > 2.0 * np.sqrt(np.maximum(-s, 0.0) / 2.0) + 1.0):
        raise ConstructionError("Painleve II solution left the Hastings-McLeod branch")
    F2 = np.exp(-u)
    f2 = v * F2
    df2 = (v * v - q * q) * F2
    table = TWTable(s, q, F2, f2, df2)
    if not (F2[0] < 1e-8 and F2[-1] > 1 - 1e-10 and np.all(np.diff(F2) >= 0)):
        raise ConstructionError("tabulated F2 fails its tail or monotonicity checks")
    return table


_TABLE = None


def default_table() -> TWTable:
    """Process-wide cached table."""
    global _TABLE
    if _TABLE is None:
        _TABLE = build_tw2()
    return _TABLE


# --------------------------------------------------------------------------
# independent reference
# --------------------------------------------------------------------------

def fredholm_f2(s, m: int = 80, length: float = 16.0) -> np.ndarray:
    """``det(I - K_Airy)`` on ``L^2(s, inf)`` by Gauss-Legendre quadrature.

    The half line is truncated to ``[s, max(s, 0) + length]``, where the
    kernel is below double precision.
    """
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    x0, w0 = np.polynomial.legendre.leggauss(m)
    out = np.empty_like(s_arr)
    for i, si in enumerate(s_arr):
        b = max(si, 0.0) + length
        x = si + (b - si) * (x0 + 1) / 2
        w = w0 * (b - si) / 2
        ai, aip, _, _ = airy(x)
        X, Y = np.meshgrid(x, x, indexing="ij")
        with np.errstate(divide="ignore", invalid="ignore"):
            K = (np.outer(ai, aip) - np.outer(aip, ai)) / (X - Y)
        K[np.diag_indices(m)] = aip ** 2 - x * ai ** 2
        sw = np.sqrt(w)
        out[i] = np.linalg.det(np.eye(m) - sw[:, None] * K * sw[None, :])
    return out[0] if np.ndim(s) == 0 else out


def fredholm_moments(m: int = 80, n_nodes: int = 96) -> tuple[float, float]:
    """Mean and variance of TW2 from the Fredholm reference."""
    x0, w0 = np.polynomial.legendre.leggauss(n_nodes)
    left = -12.0 + 12.0 * (x0 + 1) / 2, w0 * 6.0          # [-12, 0]
    right = 10.0 * (x0 + 1) / 2, w0 * 5.0                 # [0, 10]
    FL = fredholm_f2(left[0], m)
    FR = fredholm_f2(right[0], m)
    # E X = int_0^inf (1 - F) - int_{-inf}^0 F ;  E X^2 = 2 int_0^inf s (1-F) + 2 int_{-inf}^0 |s| F
    mean = np.dot(right[1], 1 - FR) - np.dot(left[1], FL)
    second = 2 * np.dot(right[1], right[0] * (1 - FR)) + 2 * np.dot(left[1], -left[0] * FL)
    return float(mean), float(second - mean ** 2)


# --------------------------------------------------------------------------
# derived laws and statistics
# --------------------------------------------------------------------------

def max_of_d_cdf(s, D: int, table: TWTable | None = None, rescaled: bool = True):
    """CDF of the maximum of ``D`` independent TW2 variables.

    With ``rescaled=True`` the variable is ``D^{2/3}`` times the maximum,
    which is the law of ``(DN)^{2/3}(lambda_1 - 2)`` for ``D`` decoupled
    blocks of size ``N``: ``F2(s / D^{2/3})^D``.
    """
    if D < 1:
        raise ArgumentError("D must be >= 1")
    table = table if table is not None else default_table()
    x = np.asarray(s, dtype=float)
    if rescaled:
        x = x / D ** (2.0 / 3.0)
    return table.cdf(x) ** D


def ks_distance(samples, cdf) -> float:
    """Two-sided Kolmogorov-Smirnov statistic of ``samples`` against ``cdf``."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ArgumentError("ks_distance needs at least 2 samples")
    if np.any(~np.isfinite(x)):
        raise ArgumentError("samples contain NaN or infinite values")
    x = np.sort(x)
    F = np.clip(np.asarray(cdf(x), dtype=float), 0.0, 1.0)
    n = x.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))
