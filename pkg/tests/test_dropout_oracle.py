import itertools

import numpy as np
import pytest

from dropout_gp import NetworkSpec, init_iid_gaussian, mc_sample
from dropout_gp.dropout_oracle import (EnumerationBudgetError, PhiMoments, ScalingTable, covariance_closed_form,
                                       covariance_mc, covariance_scaling_sweep, enumerate_exact,
                                       estimate_phi_moments, projection_variance)


def _brute_force(ws, x, layer):
    """Literal loop over every mask configuration, one forward pass each."""
    from dropout_gp import DropoutMask, forward
    spec = ws.spec
    q = spec.keep_rate
    bits = sum(spec.hidden_widths[:layer - 1])
    atoms = []
    for code in itertools.product([0, 1], repeat=bits):
        z = np.array(code, bool)
        masks, off = [], 0
        for h in spec.hidden_widths:
            masks.append(z[off:off + h] if off < bits else np.ones(h, bool))
            off += h
        p = q ** z.sum() * (1 - q) ** (bits - z.sum())
        atoms.append((p, forward(ws, x, DropoutMask(tuple(masks))).f(layer)))
    p = np.array([a[0] for a in atoms])
    f = np.array([a[1] for a in atoms])
    mean = p @ f
    cov = (f - mean).T @ ((f - mean) * p[:, None])
    return p, mean, cov


class TestEnumeration:
    def test_four_atom_probabilities(self):
        spec = NetworkSpec(2, (2,), 1, keep_rate=0.7)
        d = enumerate_exact(init_iid_gaussian(spec, 0), np.array([0.2, 0.9]), 2, keep_atoms=True)
        probs = sorted(a[0] for a in d.atoms)
        np.testing.assert_allclose(probs, sorted([0.49, 0.21, 0.21, 0.09]), atol=1e-15)
        assert d.n_atoms == 4

    def test_q_one_single_atom(self):
        spec = NetworkSpec(3, (3, 3), 2, keep_rate=1.0)
        d = enumerate_exact(init_iid_gaussian(spec, 0), np.full(3, 0.4), 3, keep_atoms=True)
        assert d.n_atoms == 1
        assert d.total_probability == 1.0
        np.testing.assert_array_equal(d.covariance, 0.0)

    def test_against_literal_loop(self, tiny_net, tiny_input):
        for layer in (2, 3):
            p, mean, cov = _brute_force(tiny_net, tiny_input, layer)
            d = enumerate_exact(tiny_net, tiny_input, layer)
            assert abs(d.total_probability - 1) < 1e-12
            assert d.n_atoms == 2 ** sum(tiny_net.spec.hidden_widths[:layer - 1])
            np.testing.assert_allclose(d.mean, mean, atol=1e-13)
            np.testing.assert_allclose(d.covariance, cov, atol=1e-13)

    def test_workers_do_not_change_result(self):
        spec = NetworkSpec(3, (9, 9), 2, keep_rate=0.8)
        ws = init_iid_gaussian(spec, 2)
        a = enumerate_exact(ws, np.full(3, 0.5), 3, workers=1)
        b = enumerate_exact(ws, np.full(3, 0.5), 3, workers=3)
        np.testing.assert_allclose(a.covariance, b.covariance, rtol=1e-12, atol=1e-15)

    def test_budget(self):
        spec = NetworkSpec(2, (20, 20), 1)
        with pytest.raises(EnumerationBudgetError):
            enumerate_exact(init_iid_gaussian(spec, 0), np.zeros(2), 3)

    def test_covariance_psd(self, tiny_net, tiny_input):
        d = enumerate_exact(tiny_net, tiny_input, 3)
        assert np.linalg.eigvalsh(d.covariance).min() > -1e-10


class TestClosedForm:
    @pytest.mark.parametrize("layer", [2, 3])
    def test_matches_enumeration(self, tiny_net, tiny_input, layer):
        prev = enumerate_exact(tiny_net, tiny_input, layer - 1)
        exact = enumerate_exact(tiny_net, tiny_input, layer)
        cf = covariance_closed_form(tiny_net, layer, PhiMoments.from_exact(prev))
        np.testing.assert_allclose(cf.matrix, exact.covariance, rtol=0, atol=1e-12)
        assert cf.source == "closed_form"

    def test_layer_one_is_deterministic(self, tiny_net):
        np.testing.assert_array_equal(covariance_closed_form(tiny_net, 1, None).matrix, 0.0)

    def test_q_one_layer_two_zero(self, tiny_input):
        spec = NetworkSpec(3, (4, 4), 2, keep_rate=1.0)
        ws = init_iid_gaussian(spec, 0)
        prev = enumerate_exact(ws, tiny_input, 1)
        np.testing.assert_allclose(covariance_closed_form(ws, 2, PhiMoments.from_exact(prev)).matrix, 0.0,
                                   atol=1e-15)

    def test_diagonal_matches_projection_variance(self, tiny_net, tiny_input):
        m = PhiMoments.from_exact(enumerate_exact(tiny_net, tiny_input, 1))
        cov = covariance_closed_form(tiny_net, 2, m).matrix
        for i in range(4):
            assert projection_variance(tiny_net, 2, [i], [1.0], m) == pytest.approx(cov[i, i], rel=1e-12)

    def test_shape_errors(self, tiny_net):
        with pytest.raises(ValueError):
            covariance_closed_form(tiny_net, 2, PhiMoments(1, np.zeros(3), np.zeros((3, 3))))
        with pytest.raises(ValueError):
            covariance_closed_form(tiny_net, 2, None)

    def test_csv_export(self, tiny_net, tiny_input):
        m = PhiMoments.from_exact(enumerate_exact(tiny_net, tiny_input, 1))
        text = covariance_closed_form(tiny_net, 2, m).to_csv()
        lines = text.strip().split("\n")
        assert lines[0] == "i,j,value,source"
        assert len(lines) == 17


class TestMonteCarloAgreement:
    def test_means_within_mc_error(self, tiny_net, tiny_input):
        d = enumerate_exact(tiny_net, tiny_input, 3)
        b = mc_sample(tiny_net, tiny_input, 3, 40000, 3)
        se = b.samples.std(axis=0, ddof=1) / np.sqrt(b.n_passes)
        assert np.all(np.abs(b.samples.mean(axis=0) - d.mean) < 4 * se)

    def test_mc_covariance_close(self, tiny_net, tiny_input):
        d = enumerate_exact(tiny_net, tiny_input, 3)
        c = covariance_mc(mc_sample(tiny_net, tiny_input, 3, 40000, 4)).matrix
        np.testing.assert_allclose(c, d.covariance, atol=0.05 * np.abs(d.covariance).max())

    def test_estimated_phi_moments(self, tiny_net, tiny_input):
        d = enumerate_exact(tiny_net, tiny_input, 2)
        m = estimate_phi_moments(tiny_net, tiny_input, 2, 40000, 1)
        assert np.all(np.abs(m.mean - d.phi_mean) < 4 * m.mean_se)


class TestScalingSweep:
    def test_width_one_flagged_empty(self):
        t = covariance_scaling_sweep([1, 8], seeds=(0,), n_passes=2000, input_dim=5)
        assert t.empty.tolist() == [True, False]
        assert t.n_pairs[0] == 0

    def test_loglog_slope_of_power_law(self):
        w = np.array([10.0, 20.0, 40.0, 80.0])
        t = ScalingTable(w, 3 * w ** -0.5, np.zeros(4), np.ones(4))
        slope, se = t.loglog_slope()
        assert slope == pytest.approx(-0.5, abs=1e-12)
