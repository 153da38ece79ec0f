import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from blockrmt import cli, dyson, tw
from blockrmt.model import build_lambda, lambda_spectrum, sample_wigner


@st.composite
def couplings(draw, max_N=8, scale=0.3):
    N = draw(st.integers(1, max_N))
    D = draw(st.integers(2, 5))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    A = scale * (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) / np.sqrt(N)
    return A, D


zs = st.builds(complex, st.floats(-3, 3), st.floats(0.01, 3))


@given(couplings(scale=1.0))
def test_spectrum_matches_dense(case):
    A, D = case
    L = build_lambda(A, D).assembled
    assert np.array_equal(L, L.conj().T)
    sp = lambda_spectrum(A, D)
    assert np.allclose(sp.values, np.linalg.eigvalsh(L), atol=1e-12)
    assert np.all(np.diff(sp.values) >= 0)


@given(couplings(max_N=4), zs)
def test_stieltjes_conjugation_and_sign(case, z):
    sp = lambda_spectrum(*case)
    up = dyson.stieltjes(z, sp)
    lo = dyson.stieltjes(np.conj(z), sp)
    assert up.im_m > 0 and lo.m == np.conj(up.m)


@given(couplings(max_N=4), zs)
def test_im_m_identity(case, z):
    sp = lambda_spectrum(*case)
    sol = dyson.stieltjes(z, sp)
    d = dyson.m_diag(z, sp, sol.m)
    assert abs(np.mean(np.abs(d) ** 2) - sol.im_m / (sol.im_m + z.imag)) < 1e-10


@given(couplings(max_N=3), zs)
def test_m_hat_row_sums(case, z):
    sp = lambda_spectrum(*case)
    sol = dyson.stieltjes(z, sp)
    M = dyson.m_matrix(z, sp, sol.m)
    Mh = dyson.m_hat(M, M.conj().T, sp.D)
    assert np.all(Mh.real >= -1e-14) and np.allclose(Mh.imag, 0, atol=1e-14)
    assert np.allclose(Mh.sum(axis=1), sol.im_m / (sol.im_m + z.imag), atol=1e-10)


@given(couplings(max_N=4, scale=0.2))
def test_edges_bracket_support(case):
    sp = lambda_spectrum(*case)
    e = dyson.edges(sp)
    assert e.E_minus < e.E_plus
    assert abs(e.E_plus - 2) <= 2 * sp.a_norm + 1e-12 and abs(e.E_minus + 2) <= 2 * sp.a_norm + 1e-12


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=50))
def test_ks_in_unit_interval(xs):
    d = tw.ks_distance(xs, tw.default_table().cdf)
    assert 0 <= d <= 1


@given(st.floats(-6, 4), st.integers(1, 9))
def test_max_of_d_monotone_in_d(s, D):
    assert tw.max_of_d_cdf(s, D + 1, rescaled=False) <= tw.max_of_d_cdf(s, D, rescaled=False)


@given(st.integers(1, 30), st.integers(1, 6), st.floats(0, 0.5), st.integers(0, 2 ** 64 - 1),
       st.sampled_from(["csv", "jsonl"]), st.integers(1, 8))
def test_run_config_round_trip(N, D, lam, seed, fmt, workers):
    cfg = cli.RunConfig.from_dict({"model": {"N": N, "D": D, "seed": seed,
                                             "coupling": {"kind": "scalar", "lam": lam}},
                                   "output": {"format": fmt}, "parallel": {"workers": workers}})
    assert cli.RunConfig.from_yaml(cfg.to_yaml()) == cfg


@given(st.integers(0, 2 ** 64 - 1), st.integers(0, 1000))
def test_wigner_seed_determinism(seed, sample):
    a = sample_wigner(5, 2, seed=seed, sample=sample)
    b = sample_wigner(5, 2, seed=seed, sample=sample)
    assert a.blocks.tobytes() == b.blocks.tobytes()
