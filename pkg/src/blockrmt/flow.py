"""Characteristic flow of the spectral parameter and its exact invariants.

Along

    dz/dt = -z/2 - m_t(z_t),      Lambda_t = exp(-(t - t0)/2) Lambda,

the deterministic resolvent obeys ``M(z_t, Lambda_t) = exp((t - t0)/2) M_0``,
so ``M_hat`` grows like ``e^t`` and ``K = (1 - M_hat)^{-1} M_hat`` solves a
Riccati equation. Only ``z_t`` is integrated numerically; Lambda is rescaled
in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from . import dyson
from .dyson import g_moments, m_hat, three_tensor, k3_from
from .errors import FlowError, SolverError
from .model import LambdaSpectrum


class _Atoms:
    """Minimal view exposing ``atoms``/``weights`` of a rescaled spectrum."""

    __slots__ = ("atoms", "weights")

    def __init__(self, atoms, weights):
        self.atoms = atoms
        self.weights = weights


def _m_scaled(z: complex, spectrum: LambdaSpectrum, scale: float, guess: complex | None) -> complex:
    view = _Atoms(scale * spectrum.atoms, spectrum.weights)
    lower = z.imag < 0
    zz = z.conjugate() if lower else z
    g = None if guess is None else (guess.conjugate() if lower else guess)
    m, res, _ = dyson._solve(zz, view, dyson.m_sc(zz) if g is None else g)
    if not res[0] <= dyson.TOL:
        raise SolverError(f"self-consistent equation failed along the flow at z={z}", float(res[0]))
    m = complex(m[0])
    return m.conjugate() if lower else m


@dataclass
class FlowTrajectory:
    """Discretized characteristic flow.

    Attributes
    ----------
    t_grid : ndarray
        Accepted integrator nodes, starting at ``t0``.
    z_t, m_t : ndarray of complex
        Spectral parameter and ``m_t(z_t)`` at the nodes.
    lambda_scale_t : ndarray
        ``exp(-(t - t0)/2)``.
    t_c : float
        Extrapolated time where ``Im z_t`` vanishes (NaN if not reached).
    t_probe : dict
        Times where ``|Im z_t|`` crossed each probe level.
    stats : dict
        Integrator statistics.
    """

    t_grid: np.ndarray
    z_t: np.ndarray
    m_t: np.ndarray
    lambda_scale_t: np.ndarray
    t_c: float
    spectrum: LambdaSpectrum
    t0: float
    dense: Callable | None = None
    t_probe: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def z_at(self, t) -> np.ndarray:
        """Spectral parameter from the integrator's dense output."""
        y = self.dense(np.asarray(t, dtype=float))
        return y[0] + 1j * y[1]

    def scale_at(self, t) -> np.ndarray:
        return np.exp(-(np.asarray(t, dtype=float) - self.t0) / 2.0)


def integrate_flow(z0: complex, spectrum: LambdaSpectrum, t_span: tuple | None = None,
                   rtol: float = 1e-11, atol: float = 1e-14, max_step: float = 1e-3,
                   stop_im: float = 1e-8, probes=(1e-4,)) -> FlowTrajectory:
    """Integrate the characteristic flow from ``z0`` with adaptive RK45.

    Parameters
    ----------
    z0 : complex
        Starting point, ``Im z0 != 0``. A lower half plane start follows the
        conjugate flow.
    spectrum : LambdaSpectrum
        Interaction at time ``t0``.
    t_span : (t0, t1), optional
        Defaults to ``(0, 3)``.
    rtol, atol, max_step : float
        Integrator controls; ``max_step`` bounds the grid spacing.
    stop_im : float
        Integration stops once ``|Im z_t|`` falls below this value.
    probes : sequence of float
        Levels of ``|Im z_t|`` whose crossing times are recorded.

    Raises
    ------
    FlowError
        If the self-consistent solve fails mid-flow; the partial trajectory
        is attached.
    """
    z0 = complex(z0)
    if z0.imag == 0:
        raise ValueError("flow needs Im z0 != 0")
    t0, t1 = (0.0, 3.0) if t_span is None else (float(t_span[0]), float(t_span[1]))
    sign = 1.0 if z0.imag > 0 else -1.0
    cache = {"m": None}

    def rhs(t, y):
        z = complex(y[0], y[1])
        m = _m_scaled(z, spectrum, np.exp(-(t - t0) / 2.0), cache["m"])
        cache["m"] = m
        dz = -0.5 * z - m
        return [dz.real, dz.imag]

    def stop(t, y):
        return sign * y[1] - stop_im
    stop.terminal = True
    stop.direction = -1

    events = [stop]
    for level in probes:
        def ev(t, y, level=level):
            return sign * y[1] - level
        ev.terminal = False
        ev.direction = -1
        events.append(ev)

    try:
        sol = solve_ivp(rhs, (t0, t1), [z0.real, z0.imag], method="RK45", rtol=rtol, atol=atol,
                        max_step=max_step, dense_output=True, events=events)
    except SolverError as exc:
        raise FlowError(f"flow aborted: {exc}", exc.residual) from exc
    if sol.status < 0:
        raise FlowError(f"integrator failed: {sol.message}")

    t = sol.t
    z = sol.y[0] + 1j * sol.y[1]
    scale = np.exp(-(t - t0) / 2.0)
    m = np.empty_like(z)
    guess = None
    for i, (zi, si) in enumerate(zip(z, scale)):
        guess = _m_scaled(zi, spectrum, si, guess)
        m[i] = guess

    t_c = float("nan")
    if sol.status == 1 and len(sol.t_events[0]):
        t_c = _extrapolate_tc(sol.sol, sign, t[-1], t0)
    probes_hit = {float(level): (float(te[0]) if len(te) else float("nan"))
                  for level, te in zip(probes, sol.t_events[1:])}
    stats = {"nfev": int(sol.nfev), "n_steps": int(len(t) - 1),
             "max_dt": float(np.max(np.diff(t))) if len(t) > 1 else 0.0, "status": int(sol.status)}
    return FlowTrajectory(t, z, m, scale, t_c, spectrum, t0, sol.sol, probes_hit, stats)


def _extrapolate_tc(dense, sign: float, t_end: float, t0: float) -> float:
    """Zero of a quadratic through ``Im z`` at the last three sample times."""
    h = min(1e-4, 0.05 * (t_end - t0))
    ts = t_end - h * np.array([2.0, 1.0, 0.0])
    ys = sign * dense(ts)[1]
    c = np.polyfit(ts - t_end, ys, 2)
    roots = np.roots(c)
    roots = roots[np.isreal(roots)].real
    ahead = roots[roots >= -h]
    if ahead.size == 0:
        # fall back to the linear extrapolation
        slope = (ys[2] - ys[1]) / h
        return float(t_end - ys[2] / slope)
    return float(t_end + ahead.min())


# --------------------------------------------------------------------------
# invariants
# --------------------------------------------------------------------------

def _fd(fn, t: float, h: float):
    """Five-point centered derivative."""
    return (fn(t - 2 * h) - 8 * fn(t - h) + 8 * fn(t + h) - fn(t + 2 * h)) / (12 * h)


def _rel(a, b) -> float:
    denom = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / denom) if denom > 0 else float(np.max(np.abs(a)))


@dataclass
class InvariantResult:
    name: str
    max_residual: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.max_residual <= self.threshold)

    def to_dict(self) -> dict:
        return {"name": self.name, "max_residual": self.max_residual, "threshold": self.threshold,
                "pass": self.passed}


DEFAULT_THRESHOLDS = {
    "devM": 1e-6,
    "conjugate_flow": 1e-12,
    "m_hat_growth": 1e-6,
    "K_riccati": 1e-6,
    "K3_evolution": 1e-5,
    "im_m_comparable": 10.0,
    "t_eta": 0.05,
}


def flow_invariants(traj: FlowTrajectory, conj_traj: FlowTrajectory | None = None,
                    n_nodes: int = 24, thresholds: dict | None = None,
                    min_im: float = 1e-3) -> list[InvariantResult]:
    """Residuals of the exact flow identities along an integrated trajectory.

    Parameters
    ----------
    traj : FlowTrajectory
        Trajectory started in the upper half plane.
    conj_traj : FlowTrajectory, optional
        Trajectory from ``conj(z0)``; integrated here when omitted.
    n_nodes : int
        Number of interior nodes where derivative identities are checked.
    thresholds : dict, optional
        Overrides for :data:`DEFAULT_THRESHOLDS`.
    min_im : float
        Derivative checks only use nodes with ``Im z_t >= min_im``, away
        from the real axis where ``K`` becomes singular.

    Returns
    -------
    list of InvariantResult
    """
    thr = dict(DEFAULT_THRESHOLDS)
    thr.update(thresholds or {})
    sp = traj.spectrum
    D, t0 = sp.D, traj.t0
    U = sp.basis()
    Uh = U.conj().T
    if conj_traj is None:
        conj_traj = integrate_flow(np.conj(traj.z_t[0]), sp, (t0, traj.t_grid[-1] + 1.0),
                                   probes=tuple(traj.t_probe))
    out = []

    # devM: d_j(t) exp(-(t - t0)/2) constant
    d0 = 1.0 / (sp.values - traj.z_t[0] - traj.m_t[0])
    dev = 0.0
    for t, z, m, s in zip(traj.t_grid, traj.z_t, traj.m_t, traj.lambda_scale_t):
        d = 1.0 / (s * sp.values - z - m)
        dev = max(dev, _rel(d * np.exp(-(t - t0) / 2.0), d0))
    out.append(InvariantResult("devM", dev, thr["devM"]))

    # conjugate flow node by node
    n = min(len(traj.t_grid), len(conj_traj.t_grid))
    cf = max(float(np.max(np.abs(conj_traj.t_grid[:n] - traj.t_grid[:n]))),
             _rel(conj_traj.z_t[:n], np.conj(traj.z_t[:n])),
             _rel(conj_traj.m_t[:n], np.conj(traj.m_t[:n])))
    out.append(InvariantResult("conjugate_flow", cf, thr["conjugate_flow"]))

    # Im m_t comparable to Im m_t0 over O(1) time
    ratio = traj.m_t.imag / traj.m_t[0].imag
    span = np.abs(traj.t_grid - t0) <= 1.0
    comp = float(max(np.max(ratio[span]), 1.0 / np.min(ratio[span])))
    out.append(InvariantResult("im_m_comparable", comp, thr["im_m_comparable"]))

    # derivative identities at interior nodes
    t_end = traj.t_grid[-1]
    tc = traj.t_c if np.isfinite(traj.t_c) else t_end
    usable = np.flatnonzero((np.abs(traj.z_t.imag) >= min_im) & (traj.t_grid > t0 + 1e-2)
                            & (traj.t_grid < t_end - 1e-2))
    if usable.size:
        idx = usable[np.linspace(0, usable.size - 1, min(n_nodes, usable.size)).astype(int)]
    else:
        idx = usable

    def mats(tt, which):
        tr = traj if which == 0 else conj_traj
        z = complex(tr.z_at(tt))
        s = float(np.exp(-(tt - t0) / 2.0))
        m = _m_scaled(z, sp, s, None)
        d = 1.0 / (s * sp.values - z - m)
        return (U * d) @ Uh

    def mhat_fn(pair):
        return lambda tt: m_hat(mats(tt, pair[0]), mats(tt, pair[1]), D)

    def k_fn(pair):
        def f(tt):
            Mh = mhat_fn(pair)(tt)
            return np.linalg.solve(np.eye(D) - Mh, Mh)
        return f

    def k3_fn(triple):
        def f(tt):
            Ms = [mats(tt, w) for w in triple]
            R = [np.linalg.inv(np.eye(D) - m_hat(Ms[i], Ms[(i + 1) % 3], D)) for i in range(3)]
            return k3_from(three_tensor(*Ms, D), *R)
        return f

    res_mh = res_k = res_k3 = 0.0
    for i in idx:
        tt = traj.t_grid[i]
        local = np.diff(traj.t_grid[max(i - 1, 0):i + 2]).min()
        h = min(0.25 * local, 1e-3 * max(tc - tt, 0.0), 1e-4)
        if h <= 0:
            continue
        for pair in ((0, 0), (0, 1)):
            Mh = mhat_fn(pair)(tt)
            res_mh = max(res_mh, _rel(_fd(mhat_fn(pair), tt, h), Mh))
            K = k_fn(pair)(tt)
            res_k = max(res_k, _rel(_fd(k_fn(pair), tt, h), K @ K + K))
        for triple in ((0, 0, 0), (0, 1, 0)):
            K3 = k3_fn(triple)(tt)
            Ks = [k_fn((triple[j], triple[(j + 1) % 3]))(tt) for j in range(3)]
            rhs = (1.5 * K3 + np.einsum("xa,ayz->xyz", Ks[0], K3) + np.einsum("ya,xaz->xyz", Ks[1], K3)
                   + np.einsum("za,xya->xyz", Ks[2], K3))
            res_k3 = max(res_k3, _rel(_fd(k3_fn(triple), tt, h), rhs))
    out.append(InvariantResult("m_hat_growth", res_mh, thr["m_hat_growth"]))
    out.append(InvariantResult("K_riccati", res_k, thr["K_riccati"]))
    out.append(InvariantResult("K3_evolution", res_k3, thr["K3_evolution"]))

    # (t_c - t) Im m_t / Im z_t -> 1 near t_c
    for level, tp in traj.t_probe.items():
        if not (np.isfinite(tp) and np.isfinite(traj.t_c)):
            out.append(InvariantResult(f"t_eta@{level:g}", float("inf"), thr["t_eta"]))
            continue
        z = complex(traj.z_at(tp))
        m = _m_scaled(z, sp, float(np.exp(-(tp - t0) / 2.0)), None)
        r = (traj.t_c - tp) * m.imag / abs(z.imag)
        out.append(InvariantResult(f"t_eta@{level:g}", abs(r - 1.0), thr["t_eta"]))
    return out


# --------------------------------------------------------------------------
# edge velocity
# --------------------------------------------------------------------------

SCALINGS = {
    "linear": (lambda t: t, lambda t: 1.0),
    "exp": (lambda t: np.exp(-t / 2.0), lambda t: -0.5 * np.exp(-t / 2.0)),
}


@dataclass
class EdgeVelocityPoint:
    t: float
    side: int
    fd: float
    formula: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.formula), abs(self.fd))
        return abs(self.fd - self.formula) / scale if scale > 1e-14 else abs(self.fd - self.formula)


def _edge_and_velocity(spectrum: LambdaSpectrum, f: float, fprime: float, side: int):
    sp = spectrum.scaled(f)
    e = dyson.edges(sp)
    w = e.w_plus if side > 0 else e.w_minus
    E = e.E_plus if side > 0 else e.E_minus
    # <Lambda M_t^2> with M_t = (f Lambda - w)^{-1} in the eigenbasis of Lambda
    lm2 = float(np.dot(spectrum.weights, spectrum.atoms / (f * spectrum.atoms - w) ** 2))
    return E, fprime * lm2


def edge_velocity_check(spectrum: LambdaSpectrum, scaling="linear", ts=None, h: float = 1e-3):
    """Compare centered differences of ``E_t^+-`` with ``f'(t) <Lambda M_t^2(E_t)>``.

    Parameters
    ----------
    spectrum : LambdaSpectrum
        Base interaction ``Lambda``; at time ``t`` the model uses ``f(t) Lambda``.
    scaling : str or (callable, callable)
        ``'linear'`` (``f = t``), ``'exp'`` (``f = exp(-t/2)``) or a pair
        ``(f, f')``.
    ts : sequence of float, optional
        Evaluation times; defaults to 10 interior points of ``(0, 1)``.
    h : float
        Difference step.

    Returns
    -------
    list of EdgeVelocityPoint
    """
    f, fp = SCALINGS[scaling] if isinstance(scaling, str) else scaling
    ts = np.linspace(0.1, 0.9, 10) if ts is None else np.asarray(ts, dtype=float)
    out = []
    for t in ts:
        for side in (1, -1):
            Es = [_edge_and_velocity(spectrum, f(t + k * h), fp(t + k * h), side)[0] for k in (-2, -1, 1, 2)]
            fd = (Es[0] - 8 * Es[1] + 8 * Es[2] - Es[3]) / (12 * h)
            _, formula = _edge_and_velocity(spectrum, f(t), fp(t), side)
            out.append(EdgeVelocityPoint(float(t), side, float(fd), float(formula)))
    return out
