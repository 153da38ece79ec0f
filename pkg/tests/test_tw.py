import numpy as np
import pytest

from blockrmt import tw
from blockrmt.errors import ArgumentError

TW2_MEAN = -1.7710868074
TW2_VAR = 0.8131947928


@pytest.fixture(scope="module")
def table():
    return tw.default_table()


def test_matches_fredholm(table):
    s = np.linspace(-8, 4, 49)
    assert np.max(np.abs(table.cdf(s) - tw.fredholm_f2(s))) < 1e-4


def test_moments(table):
    mean, var = table.moments()
    assert mean == pytest.approx(TW2_MEAN, abs=2e-3)
    assert var == pytest.approx(TW2_VAR, abs=2e-3)
    assert table.normalization() == pytest.approx(1.0, abs=1e-6)


def test_fredholm_moments():
    mean, var = tw.fredholm_moments(m=40, n_nodes=48)
    assert mean == pytest.approx(TW2_MEAN, abs=1e-6)
    assert var == pytest.approx(TW2_VAR, abs=1e-6)


def test_tails_and_monotone(table):
    assert table.cdf(-20.0) == 0.0 and table.cdf(20.0) == 1.0
    assert table.cdf(-8.0) < 1e-10 and 1 - table.cdf(6.0) < 1e-9
    assert np.all(np.diff(table.cdf(np.linspace(-9, 7, 400))) >= 0)


def test_pdf_is_derivative(table):
    s = np.linspace(-6, 3, 37)
    h = 1e-4
    fd = (table.cdf(s + h) - table.cdf(s - h)) / (2 * h)
    assert np.max(np.abs(fd - table.pdf(s))) < 1e-6


def test_quantile_inverse(table):
    p = np.array([0.01, 0.25, 0.5, 0.9, 0.999])
    assert np.allclose(table.cdf(table.quantile(p)), p, atol=1e-10)


def test_csv(table, tmp_path):
    table.to_csv(tmp_path / "tw.csv")
    data = np.loadtxt(tmp_path / "tw.csv", delimiter=",", skiprows=1)
    assert data.shape[1] == 3 and np.array_equal(data[:, 0], table.s_grid)


class TestMaxOfD:
    def test_d1_is_tw2(self, table):
        s = np.linspace(-4, 2, 7)
        assert np.allclose(tw.max_of_d_cdf(s, 1), table.cdf(s))

    def test_d2_median(self, table):
        med = table.quantile(1 / np.sqrt(2))[0] * 2 ** (2 / 3)
        assert tw.max_of_d_cdf(med, 2) == pytest.approx(0.5, abs=1e-9)

    def test_unscaled(self, table):
        assert tw.max_of_d_cdf(-1.0, 3, rescaled=False) == pytest.approx(table.cdf(-1.0) ** 3)

    def test_bad_d(self):
        with pytest.raises(ArgumentError):
            tw.max_of_d_cdf(0.0, 0)


class TestKS:
    def test_null_samples(self, table):
        x = table.sample(10_000, np.random.default_rng(0))
        assert tw.ks_distance(x, table.cdf) <= 0.02

    def test_point_mass(self, table):
        d = tw.ks_distance(np.full(100, 50.0), table.cdf)
        assert d == pytest.approx(1.0)

    def test_exact_uniform(self):
        x = (np.arange(1, 11) - 0.5) / 10
        assert tw.ks_distance(x, lambda s: s) == pytest.approx(0.05)

    def test_nan_rejected(self, table):
        with pytest.raises(ArgumentError):
            tw.ks_distance([0.0, np.nan, 1.0], table.cdf)

    def test_too_few(self, table):
        with pytest.raises(ArgumentError):
            tw.ks_distance([0.0], table.cdf)

    def test_clamped_cdf(self):
        assert tw.ks_distance([0.1, 0.2], lambda s: 2 * s - 5) == pytest.approx(1.0)
