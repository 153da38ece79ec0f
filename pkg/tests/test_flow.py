import numpy as np
import pytest

from blockrmt import dyson, flow
from blockrmt.model import LambdaSpectrum, lambda_spectrum


@pytest.fixture(scope="module")
def traj(sp_flow):
    return flow.integrate_flow(0.5 + 0.3j, sp_flow)


def test_tc_closed_form(traj, sp_flow):
    m0 = dyson.stieltjes(0.5 + 0.3j, sp_flow).m
    assert traj.t_c == pytest.approx(np.log1p(0.3 / m0.imag), abs=1e-8)


def test_m_grows_exponentially(traj):
    ref = traj.m_t[0] * np.exp((traj.t_grid - traj.t0) / 2)
    assert np.max(np.abs(traj.m_t - ref)) < 1e-8 * np.max(np.abs(ref))


def test_zero_coupling_semicircle():
    sp = LambdaSpectrum.zero(3, 2)
    tr = flow.integrate_flow(-0.4 + 0.5j, sp, t_span=(0, 0.5))
    assert np.allclose(tr.m_t, dyson.m_sc(tr.z_t), atol=1e-13)


def test_invariants_pass(traj):
    res = flow.flow_invariants(traj)
    bad = [r.to_dict() for r in res if not r.passed]
    assert not bad
    names = {r.name for r in res}
    assert {"devM", "conjugate_flow", "m_hat_growth", "K_riccati", "K3_evolution"} <= names


def test_grid_spacing(traj):
    assert traj.stats["max_dt"] <= 1e-3 + 1e-15


def test_devm_converges_with_tolerance(sp_flow):
    # at production tolerance devM sits at the rounding floor, so the
    # convergence order is checked at looser settings
    def dev(rtol, step):
        tr = flow.integrate_flow(0.5 + 0.3j, sp_flow, rtol=rtol, max_step=step)
        return [r for r in flow.flow_invariants(tr, n_nodes=2) if r.name == "devM"][0].max_residual, tr.t_c

    coarse, tc1 = dev(1e-3, 0.1)
    fine, tc2 = dev(5e-4, 0.05)
    assert coarse >= 4 * fine
    assert abs(tc1 - tc2) < 1e-6


def test_lower_half_plane(sp_flow):
    up = flow.integrate_flow(0.2 + 0.4j, sp_flow, t_span=(0, 0.5))
    lo = flow.integrate_flow(0.2 - 0.4j, sp_flow, t_span=(0, 0.5))
    assert np.array_equal(up.t_grid, lo.t_grid)
    assert np.allclose(lo.z_t, np.conj(up.z_t), atol=1e-15)
    assert np.all(lo.m_t.imag < 0)


def test_real_start_rejected(sp_flow):
    with pytest.raises(ValueError):
        flow.integrate_flow(0.5, sp_flow)


def test_probe_recorded(traj):
    tp = traj.t_probe[1e-4]
    assert traj.t0 < tp < traj.t_c


@pytest.mark.parametrize("scaling", ["linear", "exp"])
def test_edge_velocity(sp_flow, scaling):
    pts = flow.edge_velocity_check(sp_flow, scaling, ts=[0.2, 0.6])
    assert max(p.rel_error for p in pts) < 1e-5


def test_edge_velocity_zero_coupling():
    pts = flow.edge_velocity_check(LambdaSpectrum.zero(2, 2), "linear", ts=[0.5])
    assert all(p.formula == 0 and abs(p.fd) < 1e-12 for p in pts)


def test_edge_velocity_sign(sp_flow):
    # growing coupling pushes the upper edge out and the lower edge in
    for p in flow.edge_velocity_check(sp_flow, "linear", ts=[0.5]):
        assert np.sign(p.formula) == p.side


def test_custom_scaling_matches_linear():
    sp = lambda_spectrum(np.diag([0.05, 0.1, 0.02]), 3)
    a = flow.edge_velocity_check(sp, "linear", ts=[0.4])
    b = flow.edge_velocity_check(sp, (lambda t: t, lambda t: 1.0), ts=[0.4])
    assert [p.formula for p in a] == [p.formula for p in b]
