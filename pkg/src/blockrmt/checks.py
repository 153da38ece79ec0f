"""Deterministic identity suite used by ``blockrmt verify`` and the tests.

Every check returns a :class:`Check` holding the worst residual seen and
the tolerance it is held to. Random instances come from a fixed seed so a
run is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dyson, flow, tw
from .model import CouplingSpec, LambdaSpectrum, lambda_spectrum, make_coupling, stream


@dataclass
class Check:
    name: str
    value: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.threshold)

    def to_dict(self) -> dict:
        return {"name": self.name, "value": float(self.value), "threshold": self.threshold,
                "pass": self.passed}


def random_instances(n: int, seed: int = 0, N: int = 6):
    """``n`` pairs ``(z, spectrum, A)`` with random couplings and ``D`` in 2..4."""
    rng = stream(seed, 77)
    out = []
    for i in range(n):
        D = int(rng.integers(2, 5))
        kind = i % 3
        if kind == 0:
            A = np.diag(rng.uniform(-0.8, 0.8, N)).astype(complex)
        elif kind == 1:
            A = make_coupling(CouplingSpec.random_fixed(rng.uniform(0.1, 1.2), int(rng.integers(1 << 30)), N)).A
        else:
            A = rng.uniform(0.05, 0.6) * np.eye(N, dtype=complex)
        z = complex(rng.uniform(-3, 3), 10 ** rng.uniform(-3, 0.5))
        out.append((z, lambda_spectrum(A, D), A))
    return out


def check_im_m_identity(n: int = 50, seed: int = 0) -> Check:
    """``<M M^*> = Im m / (Im m + eta)`` at random points."""
    worst = 0.0
    for z, sp, _ in random_instances(n, seed):
        sol = dyson.stieltjes(z, sp)
        d = dyson.m_diag(z, sp, sol.m)
        lhs = np.mean(np.abs(d) ** 2)
        worst = max(worst, abs(lhs - sol.im_m / (sol.im_m + z.imag)))
    return Check("im_m_identity", worst, 1e-10)


def check_trace_identity(n: int = 50, seed: int = 0) -> Check:
    """``<M> = m`` for the self-consistent solution."""
    worst = 0.0
    for z, sp, _ in random_instances(n, seed):
        sol = dyson.stieltjes(z, sp)
        worst = max(worst, abs(np.mean(dyson.m_diag(z, sp, sol.m)) - sol.m))
    return Check("trace_identity", worst, 1e-10)


def check_d2_closed_form(n: int = 20, seed: int = 1, N: int = 5) -> Check:
    """Closed-form ``D = 2`` resolvent against the generic spectral construction."""
    rng = stream(seed, 78)
    worst = 0.0
    for _ in range(n):
        A = rng.uniform(0.05, 0.7) * (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) / np.sqrt(2 * N)
        sp = lambda_spectrum(A, 2)
        z = complex(rng.uniform(-2.5, 2.5), 10 ** rng.uniform(-2, 0))
        sol = dyson.stieltjes(z, sp)
        worst = max(worst, np.max(np.abs(dyson.m_matrix(z, sp, sol.m) - dyson.m_matrix_d2(z, A, sol.m))))
    return Check("d2_closed_form", worst, 1e-10)


def check_shift_zero() -> Check:
    """``Delta_ev = 0`` exactly without coupling."""
    sp = LambdaSpectrum.zero(4, 2)
    vals = [abs(dyson.shift_ev(z, sp)) for z in (0.3 + 0.1j, -1.7 + 1e-3j, 1.99 + 1e-4j)]
    return Check("shift_ev_zero", max(vals), 0.0)


def check_m_hat(n: int = 20, seed: int = 2) -> tuple[Check, Check]:
    """Row sums of ``M_hat(z, conj z)`` and the norm of ``(1 - M_hat)^{-1}``.

    The norm is the maximum row sum norm, for which the identity is exact
    because ``M_hat`` is entrywise nonnegative with constant row sums.
    """
    rows, inv = 0.0, 0.0
    for z, sp, _ in random_instances(n, seed):
        sol = dyson.stieltjes(z, sp)
        M = dyson.m_matrix(z, sp, sol.m)
        Mh = dyson.m_hat(M, M.conj().T, sp.D).real
        rho = sol.im_m / (sol.im_m + z.imag)
        rows = max(rows, np.max(np.abs(Mh.sum(axis=1) - rho)))
        target = (sol.im_m + z.imag) / z.imag
        nrm = np.linalg.norm(np.linalg.inv(np.eye(sp.D) - Mh), np.inf)
        inv = max(inv, abs(nrm - target) / target)
    return Check("m_hat_row_sums", rows, 1e-10), Check("stability_inverse_norm", inv, 1e-8)


def check_semicircle() -> list[Check]:
    """``A = 0`` regression: ``m``, edges, curvature, quantiles."""
    sp = LambdaSpectrum.zero(50, 2)
    rng = stream(3, 79)
    zs = rng.uniform(-3, 3, 20) + 1j * 10 ** rng.uniform(-3, 0.5, 20)
    m_err = max(abs(dyson.stieltjes(z, sp).m - dyson.m_sc(z)) for z in zs)
    e = dyson.edges(sp)
    edge_err = max(abs(e.E_plus - 2), abs(e.E_minus + 2))
    gam_err = max(abs(e.gamma_plus - 1), abs(e.gamma_minus - 1))
    qt = dyson.quantiles(50, 2, sp)
    # roots of the analytic tail mass
    p = (np.arange(1, 101) - 0.5) / 100
    q_err = np.max(np.abs(dyson.semicircle_tail(qt.gamma) - p))
    x_err = np.max(np.abs(qt.gamma - qt.gamma_sc))
    return [Check("semicircle_m", m_err, 1e-10), Check("semicircle_edges", edge_err, 1e-9),
            Check("semicircle_curvature", gam_err, 1e-3), Check("semicircle_quantile_mass", q_err, 1e-8),
            Check("semicircle_quantiles", x_err, 1e-8)]


def edge_oracle_d2(lam: float) -> float:
    """``E^+`` for ``A = lam I``, ``D = 2`` from the closed-form edge equations.

    With ``Lambda`` eigenvalues ``+-lam``, the subordination point solves
    ``((w-lam)^{-2} + (w+lam)^{-2}) / 2 = 1``, a quartic in ``w``
    (``w^4 - (2 lam^2 + 1) w^2 + lam^4 - lam^2 = 0``), and
    ``E^+ = w + w / (w^2 - lam^2)``.
    """
    a = 2 * lam ** 2 + 1
    w2 = (a + np.sqrt(a * a - 4 * (lam ** 4 - lam ** 2))) / 2
    w = np.sqrt(w2)
    return float(w + w / (w2 - lam ** 2))


def check_edge_oracle(lam: float = 0.1) -> Check:
    e = dyson.edges(lambda_spectrum(lam * np.eye(4, dtype=complex), 2))
    return Check("edge_oracle_d2", abs(e.E_plus - edge_oracle_d2(lam)), 1e-10)


def check_tw(quick: bool = True) -> list[Check]:
    table = tw.default_table()
    mean, var = table.moments()
    s = np.linspace(-8, 4, 25 if quick else 121)
    sup = float(np.max(np.abs(table.cdf(s) - tw.fredholm_f2(s))))
    return [Check("tw_fredholm_sup", sup, 1e-4), Check("tw_mean", abs(mean + 1.771087), 2e-3),
            Check("tw_normalization", abs(table.normalization() - 1), 1e-6)]


def check_flow(lam: float = 0.05, z0: complex = 0.5 + 0.3j) -> list[Check]:
    sp = lambda_spectrum(lam * np.eye(4, dtype=complex), 2)
    traj = flow.integrate_flow(z0, sp)
    res = flow.flow_invariants(traj)
    out = [Check("flow_" + r.name, r.max_residual, r.threshold) for r in res]
    pts = flow.edge_velocity_check(sp, "linear", ts=[0.3, 0.7])
    out.append(Check("flow_edge_velocity", max(p.rel_error for p in pts), 1e-5))
    return out


def identity_suite(quick: bool = True) -> list[Check]:
    """Run every deterministic check."""
    out = [check_im_m_identity(), check_trace_identity(), check_d2_closed_form(), check_shift_zero()]
    out.extend(check_m_hat())
    out.extend(check_semicircle())
    out.append(check_edge_oracle())
    out.extend(check_tw(quick))
    out.extend(check_flow())
    return out
