import numpy as np
import pytest

from blockrmt.errors import ArgumentError, InputError
from blockrmt.model import (CouplingSpec, InteractionMatrix, LambdaSpectrum, assemble, block_slice,
                            build_lambda, lambda_spectrum, make_coupling, read_coupling_file,
                            sample_wigner, write_coupling_file)


class TestCoupling:
    def test_scalar_norms(self):
        c = make_coupling(CouplingSpec.scalar(0.5, 400))
        assert c.op_norm == pytest.approx(0.5)
        assert c.hs_norm == pytest.approx(10.0)

    def test_zero(self):
        c = make_coupling(CouplingSpec.scalar(0.0, 8))
        assert not np.any(c.A)
        assert c.op_norm == 0 and c.hs_norm == 0

    def test_diagonal_norms(self):
        c = make_coupling(CouplingSpec.diagonal([1, 2, 2]))
        assert c.op_norm == pytest.approx(2.0)
        assert c.hs_norm == pytest.approx(3.0)

    def test_negative_lambda(self):
        c = make_coupling(CouplingSpec.scalar(-0.3, 4))
        assert c.op_norm == pytest.approx(0.3)

    def test_norm_ordering(self):
        c = make_coupling(CouplingSpec.random_fixed(0.7, 5, 12))
        assert c.op_norm <= c.hs_norm + 1e-12 <= np.sqrt(12) * c.op_norm + 1e-12

    def test_random_fixed_reproducible(self):
        a = make_coupling(CouplingSpec.random_fixed(0.7, 5, 6)).A
        b = make_coupling(CouplingSpec.random_fixed(0.7, 5, 6)).A
        assert np.array_equal(a, b)

    def test_unknown_kind(self):
        with pytest.raises(InputError):
            CouplingSpec("banded", 4)

    def test_nan_rejected(self):
        with pytest.raises(InputError):
            make_coupling(CouplingSpec.diagonal([1.0, float("nan")]))

    def test_dict_round_trip(self):
        for spec in (CouplingSpec.scalar(0.2, 5), CouplingSpec.diagonal([1, 2]),
                     CouplingSpec.random_fixed(0.3, 9, 4), CouplingSpec.dense("a.txt", 3)):
            assert CouplingSpec.from_dict(spec.to_dict()) == spec

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        p = tmp_path / "A.txt"
        write_coupling_file(p, A)
        assert np.array_equal(read_coupling_file(p, 4), A)
        assert np.array_equal(make_coupling(CouplingSpec.dense(p, 4)).A, A)

    def test_file_errors_report_location(self, tmp_path):
        p = tmp_path / "A.txt"
        p.write_text("1 0 0 0\n0 0 x 1\n")
        with pytest.raises(InputError) as exc:
            read_coupling_file(p, 2)
        assert exc.value.row == 2 and exc.value.col == 2
        p.write_text("1 0 0 0\n")
        with pytest.raises(InputError):
            read_coupling_file(p, 2)
        p.write_text("1 0 0\n1 0 0 0\n")
        with pytest.raises(InputError) as exc:
            read_coupling_file(p, 2)
        assert exc.value.row == 1


class TestLambda:
    def test_d_below_two(self):
        with pytest.raises(ArgumentError):
            build_lambda(np.eye(3), 1)

    def test_d2_layout(self):
        A = np.arange(4.0).reshape(2, 2) + 1j
        L = build_lambda(A, 2).assembled
        assert np.array_equal(L[:2, 2:], A)
        assert np.array_equal(L[2:, :2], A.conj().T)
        assert not np.any(L[:2, :2]) and not np.any(L[2:, 2:])

    def test_circulant_layout(self):
        A = np.array([[1, 2j], [0, 3]])
        D, N = 4, 2
        L = build_lambda(A, D).assembled
        for a in range(D):
            for b in range(D):
                blk = L[block_slice(a, N), block_slice(b, N)]
                if b == (a + 1) % D:
                    assert np.array_equal(blk, A)
                elif b == (a - 1) % D:
                    assert np.array_equal(blk, A.conj().T)
                else:
                    assert not np.any(blk)

    def test_exact_hermitian_and_traceless(self):
        rng = np.random.default_rng(1)
        A = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        L = build_lambda(A, 3).assembled
        assert np.array_equal(L, L.conj().T)
        for a in range(3):
            assert np.trace(L[block_slice(a, 3), block_slice(a, 3)]) == 0

    def test_read_only(self):
        L = build_lambda(np.eye(2), 2).assembled
        with pytest.raises(ValueError):
            L[0, 0] = 1

    def test_zero_allows_d1(self):
        lam = InteractionMatrix.zero(3, 1)
        assert lam.is_zero and lam.assembled.shape == (3, 3)

    def test_scalar_d2_spectrum(self):
        sp = lambda_spectrum(0.1 * np.eye(5), 2)
        assert np.allclose(sp.values, [-0.1] * 5 + [0.1] * 5)
        assert np.allclose(sp.atoms, [-0.1, 0.1]) and np.allclose(sp.weights, [0.5, 0.5])

    def test_scalar_d4_spectrum(self):
        lam = 0.3
        sp = lambda_spectrum(lam * np.eye(3), 4)
        dense = np.linalg.eigvalsh(build_lambda(lam * np.eye(3), 4).assembled)
        assert np.allclose(sp.values, dense, atol=1e-14)
        assert np.allclose(sp.atoms, [-2 * lam, 0, 2 * lam])
        assert np.allclose(sp.weights, [0.25, 0.5, 0.25])

    def test_diag_d3(self):
        sp = lambda_spectrum(np.diag([1.0, 2.0]), 3)
        c = 2 * np.cos(2 * np.pi * np.arange(3) / 3)
        assert np.allclose(sp.values, np.sort(np.concatenate([c, 2 * c])))

    @pytest.mark.parametrize("D", [2, 3, 4, 5])
    def test_basis_diagonalizes(self, D):
        rng = np.random.default_rng(D)
        A = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        sp = lambda_spectrum(A, D)
        U = sp.basis()
        L = build_lambda(A, D).assembled
        assert np.allclose(U.conj().T @ U, np.eye(4 * D), atol=1e-12)
        assert np.allclose(U.conj().T @ L @ U, np.diag(sp.values), atol=1e-12)
        assert np.allclose(sp.block_weights().sum(axis=0), 1.0)

    def test_scaled(self):
        sp = lambda_spectrum(np.diag([0.1, 0.3]), 3)
        neg = sp.scaled(-2.0)
        assert np.all(np.diff(neg.values) >= 0)
        assert np.allclose(neg.values, np.sort(-2 * sp.values))
        L = -2 * build_lambda(np.diag([0.1, 0.3]), 3).assembled
        U = neg.basis()
        assert np.allclose(U.conj().T @ L @ U, np.diag(neg.values), atol=1e-12)
        assert neg.a_norm == pytest.approx(0.6)

    def test_norm_bound(self):
        rng = np.random.default_rng(3)
        A = rng.standard_normal((5, 5))
        sp = lambda_spectrum(A, 3)
        assert sp.norm <= 2 * np.linalg.norm(A, 2) + 1e-12

    def test_zero_spectrum(self):
        sp = LambdaSpectrum.zero(3, 1)
        assert sp.dim == 3 and sp.norm == 0 and sp.second_moment == 0


class TestWigner:
    def test_determinism(self):
        a = sample_wigner(20, 3, seed=11, sample=4)
        b = sample_wigner(20, 3, seed=11, sample=4)
        assert a.blocks.tobytes() == b.blocks.tobytes()
        c = sample_wigner(20, 3, seed=11, sample=5)
        assert not np.array_equal(a.blocks, c.blocks)

    def test_block_streams_independent_of_d(self):
        a = sample_wigner(10, 2, seed=3)
        b = sample_wigner(10, 4, seed=3)
        assert np.array_equal(a.blocks, b.blocks[:2])

    @pytest.mark.parametrize("dist", ["complex_gaussian", "complex_rademacher"])
    def test_hermitian_real_diagonal(self, dist):
        d = sample_wigner(15, 2, dist, seed=1)
        for blk in d.blocks:
            assert np.array_equal(blk, blk.conj().T)
            assert not np.any(np.diag(blk).imag)

    def test_gaussian_moments(self):
        N = 2000
        h = sample_wigner(N, 1, seed=0).blocks[0]
        off = h[np.triu_indices(N, 1)]
        n = off.size
        assert N * np.mean(np.abs(off) ** 2) == pytest.approx(1.0, abs=0.01)
        se = 1.0 / (N * np.sqrt(n))
        assert abs(np.mean(off)) < 5 * np.sqrt(1.0 / (N * n))
        assert abs(np.mean(off ** 2)) < 5 * se * np.sqrt(2)
        assert N * np.mean(np.diag(h).real ** 2) == pytest.approx(1.0, abs=5 * np.sqrt(2.0 / N))

    def test_rademacher_entries(self):
        N = 30
        h = sample_wigner(N, 1, "complex_rademacher", seed=2).blocks[0]
        off = h[~np.eye(N, dtype=bool)]
        assert np.allclose(N * np.abs(off) ** 2, 1.0, atol=1e-14)
        assert np.allclose(N * np.diag(h).real ** 2, 1.0)

    def test_unknown_dist(self):
        with pytest.raises(ArgumentError):
            sample_wigner(3, 1, "goe")

    def test_assemble(self):
        A = 0.2 * np.eye(4)
        lam = build_lambda(A, 2)
        d = sample_wigner(4, 2, seed=0)
        H0 = assemble(d, lam, 0.0)
        assert not np.any(H0[:4, 4:])
        H1 = assemble(d, lam, 1.0)
        assert np.array_equal(H1 - H0, lam.assembled)
        assert np.array_equal(H1, H1.conj().T)

    def test_assemble_sign_symmetry(self):
        A = np.array([[0.1, 0.2j, 0, 0], [0, 0.3, 0, 0], [0, 0, 0.1, 0], [0.05, 0, 0, 0.2]])
        d = sample_wigner(4, 2, seed=6)
        e1 = np.linalg.eigvalsh(assemble(d, build_lambda(A, 2), 0.7))
        e2 = np.linalg.eigvalsh(assemble(d, build_lambda(-A, 2), -0.7))
        assert np.allclose(e1, e2, atol=1e-14)

    def test_assemble_mismatch(self):
        with pytest.raises(ArgumentError):
            assemble(sample_wigner(3, 2), build_lambda(np.eye(4), 2))
