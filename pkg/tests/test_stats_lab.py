import numpy as np
import pytest

from dropout_gp import NetworkSpec, init_iid_gaussian, mc_sample
from dropout_gp import stats_lab as sl
from dropout_gp.net_core import init_correlated


def stretched(beta, n, seed):
    """Symmetric samples with density proportional to exp(-|x|**beta)."""
    r = np.random.default_rng(seed)
    return r.gamma(1 / beta, size=n) ** (1 / beta) * r.choice([-1.0, 1.0], n)


def skewed(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    return np.where(x > 0, np.expm1(0.2 * x) / 0.2, x)


class TestNormalize:
    def test_small_example(self):
        np.testing.assert_allclose(sl.normalize([1, 2, 3]), [-1, 0, 1])

    def test_idempotent(self):
        z = sl.normalize(np.random.default_rng(0).standard_normal(500))
        np.testing.assert_allclose(sl.normalize(z), z, atol=1e-12)

    def test_constant_rejected(self):
        with pytest.raises(sl.StatisticsError):
            sl.normalize(np.full(10, 2.5))


class TestNormalityReport:
    def test_gaussian(self):
        r = sl.normality_report(np.random.default_rng(3).standard_normal(30000))
        assert r.jb_pvalue > 0.01
        assert abs(r.excess_kurtosis) < 0.1
        assert 0 <= r.ks_stat <= 1 and r.variance >= 0

    def test_laplace(self):
        r = sl.normality_report(np.random.default_rng(3).laplace(size=30000))
        assert abs(r.excess_kurtosis - 3) < 0.6
        assert r.jb_pvalue < 1e-6

    def test_too_few(self):
        with pytest.raises(sl.StatisticsError):
            sl.normality_report(np.zeros(999))

    def test_wide_net_neuron_is_gaussian(self):
        spec = NetworkSpec(50, (1000, 1000), 10, bias_scheme="zero")
        b = mc_sample(init_iid_gaussian(spec, 0), np.random.default_rng(0).random(50), 2, 30000, 1, neurons=[17])
        assert sl.normality_report(b.samples[:, 0]).jb_pvalue > 0.01


class TestTailFit:
    def test_gaussian(self):
        assert 1.8 <= sl.tail_fit(np.random.default_rng(0).standard_normal(1_000_000)).beta <= 2.2

    def test_laplace(self):
        assert 0.85 <= sl.tail_fit(np.random.default_rng(0).laplace(size=1_000_000)).beta <= 1.15

    def test_product_window(self):
        r = np.random.default_rng(1)
        z = r.standard_normal(1_000_000) * r.standard_normal(1_000_000)
        fit = sl.tail_fit(z, window=(2.0, 6.0), absolute=True, zscore=False, prefactor=0.5)
        assert 0.85 <= fit.beta <= 1.15

    @pytest.mark.parametrize("beta", [0.5, 1.0, 2.0])
    def test_recovers_stretch_exponent(self, beta):
        fit = sl.tail_fit(stretched(beta, 1_000_000, 2))
        assert abs(fit.beta - beta) < 0.15
        assert fit.r2 > 0.97

    def test_requires_samples(self):
        with pytest.raises(sl.StatisticsError):
            sl.tail_fit(np.random.default_rng(0).standard_normal(5000))

    def test_insufficient_tail_mass(self):
        with pytest.raises(sl.StatisticsError, match="insufficient tail mass"):
            sl.tail_fit(np.random.default_rng(0).standard_normal(20000), window=(0.999, 0.9999))

    def test_window_inside_support(self):
        z = np.random.default_rng(4).standard_normal(100000)
        fit = sl.tail_fit(z)
        a = np.abs(sl.normalize(z))
        assert a.min() <= fit.window[0] < fit.window[1] <= a.max()


class TestClassify:
    def test_fixture_classes(self):
        cases = {"gaussian": np.random.default_rng(5).standard_normal(200_000),
                 "skewed_gaussian": skewed(200_000, 5),
                 "exponential_tail": np.random.default_rng(5).laplace(size=200_000)}
        for label, x in cases.items():
            assert sl.classify_neuron(sl.normality_report(x)) == label

    def test_total_without_tail_fit(self):
        r = sl.normality_report(np.random.default_rng(0).laplace(size=2000))
        assert r.tail is None
        assert sl.classify_neuron(r) == "exponential_tail"


class TestCorrelations:
    def test_identical_rows(self):
        row = np.arange(5.0)
        cs = sl.pearson_offdiag(np.vstack([row, row, row]))
        np.testing.assert_allclose(cs.coefficients, 1.0)

    def test_iid_null_spread(self):
        m = np.random.default_rng(0).standard_normal((100, 100))
        cs = sl.pearson_offdiag(m)
        assert abs(cs.mean) < 0.01
        assert abs(np.sqrt(cs.variance) - 0.1) < 0.01

    def test_exact_symmetry(self):
        m = np.random.default_rng(1).standard_normal((30, 17))
        c = sl.pearson_matrix(m)
        assert np.max(np.abs(c - c.T)) <= 1e-14

    def test_correlated_a_matrix(self):
        from dropout_gp.net_core import _equicorrelated_rows
        from dropout_gp.rng import stream
        a = _equicorrelated_rows(stream(2, "t"), 400, 400, 0.1)
        cs = sl.pearson_offdiag(a, axis="cols")
        assert abs(cs.mean - 0.1) < 3 * np.sqrt(cs.variance / cs.coefficients.size) + 0.01

    def test_zero_variance_row(self):
        with pytest.raises(sl.StatisticsError):
            sl.pearson_offdiag(np.vstack([np.ones(4), np.arange(4.0)]))

    def test_too_small(self):
        with pytest.raises(sl.StatisticsError):
            sl.pearson_offdiag(np.ones((1, 5)))

    def test_q_one_flagged(self):
        spec = NetworkSpec(5, (20, 20), 2, keep_rate=1.0)
        b = mc_sample(init_iid_gaussian(spec, 0), np.full(5, 0.5), 3, 1000, 0)
        with pytest.raises(sl.StatisticsError):
            sl.preact_correlations(b)

    def test_preact_similar_to_weight_rows(self):
        spec = NetworkSpec(50, (100, 100), 10, bias_scheme="zero")
        ws = init_iid_gaussian(spec, 0)
        b = mc_sample(ws, np.random.default_rng(1).random(50), 2, 10000, 0)
        pre = sl.preact_correlations(b).mean_abs
        wr = sl.pearson_offdiag(ws.weight(2)).mean_abs
        assert abs(pre - wr) < 0.5 * wr

    def test_histogram_mass(self):
        cs = sl.pearson_offdiag(np.random.default_rng(0).standard_normal((40, 60)))
        assert cs.histogram.mass == pytest.approx(1.0)


class TestProjection:
    def _batch(self, keep):
        spec = NetworkSpec(50, (400, 400), 10, bias_scheme="zero")
        return mc_sample(init_iid_gaussian(spec, 3), np.random.default_rng(2).random(50), 2, 20000, 1,
                         keep_inputs=keep)

    def test_single_coordinate_is_zscore(self):
        b = self._batch(False)
        d = sl.cramer_wold_projection(b, [7], [1.0])
        np.testing.assert_allclose(d.psi, sl.normalize(b.samples[:, 7]), atol=1e-12)
        assert d.lyapunov_ratio is None

    def test_random_projection_gaussian(self):
        b = self._batch(True)
        r = np.random.default_rng(0)
        subset = np.sort(r.choice(400, 5, replace=False))
        d = sl.cramer_wold_projection(b, subset, r.standard_normal(5))
        assert sl.normality_report(d.psi).jb_pvalue > 0.01
        assert 0 < d.lyapunov_ratio < 1
        assert abs(d.psi.mean()) < 1e-12

    def test_vanishing_variance(self):
        spec = NetworkSpec(5, (20, 20), 2, keep_rate=1.0)
        b = mc_sample(init_iid_gaussian(spec, 0), np.full(5, 0.5), 3, 100, 0)
        with pytest.raises(sl.StatisticsError):
            sl.cramer_wold_projection(b, [0], [1.0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            sl.cramer_wold_projection(self._batch(False), [0, 1], [1.0])


class TestExport:
    def test_histogram_csv(self, tmp_path):
        h = sl.histogram(np.random.default_rng(0).standard_normal(1000), bins=10)
        text = h.to_csv(tmp_path / "h.csv")
        assert text.splitlines()[0] == "bin_left,bin_right,density"
        assert len(text.splitlines()) == 11
        assert (tmp_path / "h.csv").read_text() == text

    def test_reports_csv_json(self):
        reps = [sl.normality_report(np.random.default_rng(s).standard_normal(2000), neuron=s) for s in range(3)]
        rows = sl.reports_to_csv(reps).splitlines()
        assert len(rows) == 4 and rows[0].startswith("neuron,")
        assert '"neuron": 2' in sl.reports_to_json(reps)

    def test_svg(self, tmp_path):
        from dropout_gp.plotting import render_histogram_svg
        x = np.random.default_rng(0).standard_normal(5000)
        render_histogram_svg(x, tmp_path / "a.svg")
        render_histogram_svg(x, tmp_path / "b.svg")
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
        assert b"<svg" in (tmp_path / "a.svg").read_bytes()
