import json

import numpy as np
import pytest

from blockrmt import ensemble as ens
from blockrmt.errors import ArgumentError, EnsembleError
from blockrmt.model import CouplingSpec


def cfg(N=20, D=2, lam=0.1, **kw):
    kw.setdefault("n_samples", 6)
    return ens.EnsembleConfig(N, D, CouplingSpec.scalar(lam, N), seed=5, **kw)


@pytest.fixture(scope="module")
def serial(tmp_path_factory):
    d = tmp_path_factory.mktemp("serial")
    c = cfg(n_samples=8, eigenvectors="all", eigs_H=True)
    res = ens.run_ensemble(c, d / "rec.jsonl", d / "eigs.bin")
    return c, res, d


class TestConfig:
    def test_round_trip(self):
        c = cfg(eigenvectors="selected", k_select=(1, 3))
        assert ens.EnsembleConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c

    @pytest.mark.parametrize("kw", [{"n_samples": 0}, {"eigenvectors": "some"}])
    def test_invalid(self, kw):
        with pytest.raises(ArgumentError):
            cfg(**kw)

    def test_coupling_size_mismatch(self):
        with pytest.raises(ArgumentError):
            ens.EnsembleConfig(10, 2, CouplingSpec.scalar(0.1, 11))

    def test_d1_needs_zero_coupling(self):
        with pytest.raises(ArgumentError):
            ens.Context(cfg(D=1))
        assert ens.Context(cfg(D=1, lam=0.0)).lam.is_zero


class TestRecords:
    def test_eigenvalues_sorted_and_exact(self, serial):
        c, res, _ = serial
        ctx = ens.Context(c)
        smp = ens.Sample(ctx, 3)
        ref = np.sort(np.linalg.eigvalsh(smp.matrix()))[::-1]
        assert np.allclose(res.records[3].eigs_HL, ref, atol=1e-12)
        assert np.all(np.diff(res.records[3].eigs_HL) <= 0)

    def test_eigs_H_blockwise(self, serial):
        c, res, _ = serial
        smp = ens.Sample(ens.Context(c), 2)
        ref = np.sort(np.linalg.eigvalsh(smp.matrix(0.0)))[::-1]
        assert np.allclose(res.records[2].eigs_H, ref, atol=1e-12)

    def test_masses(self, serial):
        _, res, _ = serial
        agg = res.aggregates
        assert agg["max_mass_error"] < 1e-12 and agg["max_eig_residual"] < 1e-12
        rec = res.records[0]
        assert len(rec.block_masses) == 40
        assert all(np.all(v >= 0) and v.shape == (2,) for v in rec.block_masses.values())

    def test_edge_stats(self, serial):
        c, res, _ = serial
        ctx = ens.Context(c)
        rec = res.records[1]
        s = (c.N * c.D) ** (2 / 3)
        assert rec.edge_stats["top"] == pytest.approx(s * (rec.eigs_HL[0] - ctx.edge.E_plus))
        assert rec.edge_stats["bottom"] == pytest.approx(s * (ctx.edge.E_minus - rec.eigs_HL[-1]))
        assert set(res.ks) >= {"top_tw_vs_tw2", "top_vs_maxD", "top_paired_vs_maxD"}

    def test_sidecar_round_trip(self, serial):
        _, res, d = serial
        back = ens.read_records(d / "rec.jsonl")
        assert len(back) == len(res.records)
        for a, b in zip(back, res.records):
            assert np.array_equal(a.eigs_HL, b.eigs_HL) and np.array_equal(a.eigs_H, b.eigs_H)
            assert a.edge_stats == b.edge_stats
            assert all(np.array_equal(a.block_masses[k], b.block_masses[k]) for k in b.block_masses)
        first = json.loads((d / "rec.jsonl").read_text().splitlines()[0])
        assert first["schema"] == ens.RECORD_SCHEMA and first["eigs_HL"]["dtype"] == "<f8"

    def test_inline_records(self, tmp_path):
        ens.run_ensemble(cfg(n_samples=2), tmp_path / "r.jsonl")
        back = ens.read_records(tmp_path / "r.jsonl")
        assert back[1].eigs_HL.shape == (40,) and back[1].eigs_H is None

    def test_selected_k(self):
        res = ens.run_ensemble(cfg(n_samples=2, eigenvectors="selected", k_select=(1, 5)))
        assert sorted(res.records[0].block_masses) == [1, 5]

    def test_selected_out_of_range(self):
        with pytest.raises(ArgumentError):
            ens.run_ensemble(cfg(n_samples=1, eigenvectors="selected", k_select=(41,)))


class TestDeterminism:
    def test_workers(self, serial, tmp_path):
        c, res, d = serial
        par = ens.EnsembleConfig.from_dict({**c.to_dict(), "workers": 4})
        res4 = ens.run_ensemble(par, tmp_path / "rec.jsonl", tmp_path / "eigs.bin")
        assert res4.to_json() == res.to_json()
        assert (tmp_path / "rec.jsonl").read_bytes() == (d / "rec.jsonl").read_bytes()
        assert (tmp_path / "eigs.bin").read_bytes() == (d / "eigs.bin").read_bytes()
        assert json.loads(res4.to_json(timings=True))["workers"] == 4

    @pytest.mark.slow
    def test_sixteen_workers(self, serial):
        c, res, _ = serial
        par = ens.EnsembleConfig.from_dict({**c.to_dict(), "workers": 16})
        assert ens.run_ensemble(par).to_json() == res.to_json()

    def test_seed_changes_result(self, serial):
        c, res, _ = serial
        other = ens.EnsembleConfig.from_dict({**c.to_dict(), "seed": 6, "n_samples": 1})
        assert not np.array_equal(ens.run_ensemble(other).records[0].eigs_HL, res.records[0].eigs_HL)


class TestFailures:
    def _flaky(self, monkeypatch, bad):
        real = ens.eigh_desc
        calls = {"n": 0}

        def fake(H, vectors):
            calls["n"] += 1
            if calls["n"] in bad:
                raise np.linalg.LinAlgError("no convergence")
            return real(H, vectors)
        monkeypatch.setattr(ens, "eigh_desc", fake)

    def test_isolated_failure_recorded(self, monkeypatch):
        self._flaky(monkeypatch, {3})
        res = ens.run_ensemble(cfg(n_samples=200, N=4), max_fail_frac=0.01)
        assert res.aggregates["n_failed"] == 1
        bad = [r for r in res.records if r.failed]
        assert bad[0].sample_id == 2 and "LinAlgError" in bad[0].error

    def test_too_many_failures(self, monkeypatch):
        self._flaky(monkeypatch, {1, 2})
        with pytest.raises(EnsembleError):
            ens.run_ensemble(cfg(n_samples=10, N=4))


class TestDiagnostics:
    def test_rigidity_at_quantiles(self):
        qt = ens.Context(cfg()).qt
        rep = ens.rigidity_report(qt.gamma, qt)
        assert rep["max"] == 0.0

    def test_rigidity_shape(self):
        qt = ens.Context(cfg()).qt
        with pytest.raises(ArgumentError):
            ens.rigidity_report(np.zeros(3), qt)

    def test_rigidity_weight(self):
        qt = ens.Context(cfg(N=10)).qt
        eigs = qt.gamma.copy()
        eigs[0] += 0.1
        rep = ens.rigidity_report(eigs, qt)
        assert rep["argmax"] == 1 and rep["max"] == pytest.approx(10 ** (2 / 3) * 0.1)

    def test_paired_zero_coupling(self):
        c = cfg(lam=0.0, n_samples=3, eigs_H=True)
        res = ens.run_ensemble(c)
        ctx = ens.Context(c)
        for r in res.records:
            assert np.max(np.abs(ens.paired_shift_check(r.eigs_H, r.eigs_HL, ctx.qt)["raw"])) < 1e-12
        assert np.all(res.aggregates["paired"]["median_scaled"] < 1e-9)

    def test_paired_needs_eigs_h(self):
        qt = ens.Context(cfg()).qt
        with pytest.raises(ArgumentError):
            ens.paired_shift_check(None, qt.gamma, qt)
        with pytest.raises(ArgumentError):
            ens.paired_shift_check(qt.gamma[:3], qt.gamma, qt)

    def test_mobility_decoupled(self):
        res = ens.run_ensemble(cfg(lam=0.0, n_samples=3, eigenvectors="all"))
        mc = res.aggregates["mobility"]
        assert np.allclose(mc["median"], 1.0) and np.all(mc["frac_gt_0.9"] == 1.0)

    def test_mobility_array(self):
        arr = np.zeros((4, 2, 3))
        arr[:, 0, :] = [0.95, 0.6, 0.5]
        arr[:, 1, :] = 1 - arr[:, 0, :]
        mc = ens.mobility_curve(arr, [1, 3])
        assert np.allclose(mc["median"], [0.95, 0.5])
        assert np.allclose(mc["frac_gt_0.9"], [1.0, 0.0])

    def test_mobility_bounds(self, serial):
        mc = serial[1].aggregates["mobility"]
        assert np.all((mc["median"] >= 0.5 - 1e-12) & (mc["median"] <= 1 + 1e-12))


@pytest.fixture(scope="module")
def sample():
    return ens.Sample(ens.Context(cfg(N=60, lam=0.1)), 0)


class TestResolvent:
    def test_large_eta(self, sample):
        p = ens.local_law_probe(sample, 0.3 + 10j)
        assert p.aniso_ratio <= 3 and p.ward_error <= 1e-10
        assert np.all(p.averaged <= 3)

    def test_small_eta_finite(self, sample):
        p = ens.local_law_probe(sample, 0.0 + 0.2j)
        assert p.ward_error <= 1e-10 and np.isfinite(p.aniso_ratio)
        assert p.averaged.shape == (5,)

    def test_eta_guard(self, sample):
        with pytest.raises(ArgumentError):
            ens.local_law_probe(sample, 0.0 + 1e-3j)

    def test_probe_deterministic(self, sample):
        a = ens.local_law_probe(sample, 0.1 + 0.5j)
        b = ens.local_law_probe(ens.Sample(sample.ctx, 0), 0.1 + 0.5j)
        assert a.aniso_ratio == b.aniso_ratio and np.array_equal(a.averaged, b.averaged)

    def test_loop_zero_coupling(self):
        smp = ens.Sample(ens.Context(cfg(lam=0.0)), 0)
        assert ens.two_resolvent_loop(smp, 1, 0.1) == 0.0

    def test_loop_direct(self, sample):
        # dense evaluation of <Im G0 L~ Im G1 L~>
        ctx = sample.ctx
        from blockrmt import dyson
        k, eps = 2, 0.1
        eta = ens.loop_eta(60, k, eps)
        z1 = ctx.qt.gamma[k - 1] + 1j * eta
        dev = dyson.shift_ev(z1, ctx.spectrum)
        z0 = z1 - dev
        n = ctx.dim
        I = np.eye(n)
        G0 = np.linalg.inv(sample.matrix(0.0) - z0 * I)
        G1 = np.linalg.inv(sample.matrix() - z1 * I)
        im = lambda G: (G - G.conj().T) / 2j
        Lt = ctx.lam.assembled - dev * I
        ref = np.trace(im(G0) @ Lt @ im(G1) @ Lt).real / n
        assert ens.two_resolvent_loop(sample, k, eps) == pytest.approx(ref, rel=1e-9)

    def test_loop_scales(self):
        assert ens.loop_eta(1000, 8, 0.0) == pytest.approx(0.005)
        assert ens.loop_envelope(1000, 8, 2.0) == pytest.approx(1000 ** (-5 / 3) * 16)

    def test_el_minus_k(self):
        c = cfg(N=8, lam=0.1, n_samples=200)
        out = ens.el_minus_k_check(ens.make_samples(c), 0.3 + 0.5j, -0.2 + 0.4j)
        assert len(out) == 4 and all(np.isfinite(v) for v in out.values())
        assert max(out.values()) < 0.5

    def test_el_minus_k_min_samples(self):
        with pytest.raises(ArgumentError):
            ens.el_minus_k_check(ens.make_samples(cfg(n_samples=3)), 0.1j + 0.3, 0.2j)

    def test_loop_ensemble(self):
        out = ens.loop_ensemble(cfg(N=30, n_samples=3), [1, 2], 0.1)
        assert set(out) == {1, 2} and out[1]["envelope"] > 0 and out[1]["mean"] > 0
