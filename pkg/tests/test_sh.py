import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qspace_asr import sh
from qspace_asr.phantom import generate_directions

from helpers import gauss_legendre_sphere, quadrature_gradient_energy

Y00 = 0.2820947918


def coeffs(order, values):
    arr = np.zeros(sh.n_coeffs(order))
    for (l, m), v in values.items():
        arr[sh.sh_index_table(order).entries.index((l, m))] = v
    return sh.SHCoefficients(coeffs=arr, order=order)


class TestIndexTable:
    def test_order_zero(self):
        table = sh.sh_index_table(0)
        assert table.entries == ((0, 0),)

    @pytest.mark.parametrize("order,length", [(0, 1), (2, 6), (4, 15), (8, 45)])
    def test_lengths(self, order, length):
        assert len(sh.sh_index_table(order)) == length

    def test_ordering_deterministic(self):
        table = sh.sh_index_table(4)
        assert table.entries[0] == (0, 0)
        assert table.entries[1] == (2, -2)
        assert list(table.entries) == sorted(table.entries, key=lambda e: (e[0], e[1]))

    @pytest.mark.parametrize("order", [-2, 3, 5])
    def test_rejects_bad_order(self, order):
        with pytest.raises(sh.SHError):
            sh.sh_index_table(order)


class TestBasis:
    def test_constant_column(self):
        dirs = generate_directions(12, seed=0)
        basis = sh.eval_sh_basis(dirs, 4)
        assert np.allclose(basis.values[:, 0], Y00, atol=1e-9)

    def test_antipodal_rows_identical(self):
        dirs = generate_directions(15, seed=1)
        b1 = sh.eval_sh_basis(dirs, 8)
        b2 = sh.eval_sh_basis(-dirs, 8)
        np.testing.assert_allclose(b1.values, b2.values, atol=1e-12)

    def test_rejects_non_unit(self):
        with pytest.raises(sh.SHError):
            sh.eval_sh_basis(np.array([[1.0, 1.0, 0.0]]), 2)

    def test_design_quadrature_orthonormality(self):
        # frozen 240-point equal-weight design: (4pi/N) Y^T Y = I
        pts = sh.quadrature_design(240)
        basis = sh.eval_sh_basis(pts, 8)
        gram = (4 * np.pi / 240) * basis.values.T @ basis.values
        assert np.abs(gram - np.eye(45)).max() < 1e-6

    def test_exact_quadrature_orthonormality(self):
        dirs, w = gauss_legendre_sphere(24, 48)
        basis = sh.eval_sh_basis(dirs, 8)
        gram = (basis.values * w[:, None]).T @ basis.values
        assert np.abs(gram - np.eye(45)).max() < 1e-12


class TestFit:
    def test_constant_signal(self):
        dirs = generate_directions(9, seed=2)
        basis = sh.eval_sh_basis(dirs, 2)
        fit = sh.fit_sh(np.ones(9), basis)
        assert fit.coeffs[0] == pytest.approx(2 * np.sqrt(np.pi), abs=1e-10)
        assert np.abs(fit.coeffs[1:]).max() < 1e-10

    def test_round_trip_order4(self):
        rng = np.random.default_rng(3)
        dirs = generate_directions(30, seed=4)
        basis = sh.eval_sh_basis(dirs, 4)
        true = rng.standard_normal(15)
        signal = basis.values @ true
        fit = sh.fit_sh(signal, basis)
        assert np.abs(fit.coeffs - true).max() < 1e-8

    def test_batched_fit_matches_loop(self):
        rng = np.random.default_rng(4)
        dirs = generate_directions(24, seed=5)
        basis = sh.eval_sh_basis(dirs, 4)
        signals = rng.standard_normal((7, 24))
        batched = sh.fit_sh(signals, basis)
        for i in range(7):
            single = sh.fit_sh(signals[i], basis)
            np.testing.assert_allclose(batched.coeffs[i], single.coeffs, atol=1e-12)

    def test_regularization_reduces_energy(self):
        rng = np.random.default_rng(5)
        dirs = generate_directions(30, seed=6)
        basis = sh.eval_sh_basis(dirs, 4)
        signal = basis.values @ rng.standard_normal(15)
        plain = sh.fit_sh(signal, basis, lambda_reg=0.0)
        reg = sh.fit_sh(signal, basis, lambda_reg=0.006)
        assert sh.smoothness_energy(reg) <= sh.smoothness_energy(plain)

    def test_underdetermined_rejected_with_count(self):
        dirs = generate_directions(10, seed=7)
        basis = sh.eval_sh_basis(dirs, 4)
        with pytest.raises(sh.SHFitError, match="15"):
            sh.fit_sh(np.ones(10), basis, lambda_reg=0.0)

    def test_synth_round_trip_in_span(self):
        rng = np.random.default_rng(8)
        dirs = generate_directions(40, seed=9)
        basis = sh.eval_sh_basis(dirs, 6)
        signal = basis.values @ rng.standard_normal(28)
        again = sh.synth_from_sh(sh.fit_sh(signal, basis), basis)
        assert np.abs(again - signal).max() < 1e-8

    def test_synth_unit_constant(self):
        dirs = generate_directions(11, seed=10)
        basis = sh.eval_sh_basis(dirs, 2)
        c = np.zeros(6)
        c[0] = 2 * np.sqrt(np.pi)
        vals = sh.synth_from_sh(sh.SHCoefficients(coeffs=c, order=2), basis)
        np.testing.assert_allclose(vals, 1.0, atol=1e-12)

    def test_synth_zero(self):
        dirs = generate_directions(5, seed=11)
        basis = sh.eval_sh_basis(dirs, 2)
        vals = sh.synth_from_sh(sh.SHCoefficients(coeffs=np.zeros(6), order=2), basis)
        assert np.all(vals == 0)

    def test_dimension_mismatch(self):
        dirs = generate_directions(12, seed=12)
        basis = sh.eval_sh_basis(dirs, 2)
        with pytest.raises(sh.SHError):
            sh.synth_from_sh(sh.SHCoefficients(coeffs=np.zeros(15), order=4), basis)


class TestLaplaceBeltrami:
    @pytest.mark.parametrize("lm,expected", [((0, 0), 0.0), ((2, 0), -6.0),
                                             ((2, 1), -6.0)])
    def test_eigenvalues(self, lm, expected):
        c = coeffs(4, {lm: 1.0})
        out = sh.laplace_beltrami_apply(c)
        idx = sh.sh_index_table(4).entries.index(lm)
        assert out.coeffs[idx] == expected

    def test_degree4_half_unit(self):
        c = coeffs(4, {(4, 2): 0.5})
        out = sh.laplace_beltrami_apply(c)
        idx = sh.sh_index_table(4).entries.index((4, 2))
        assert out.coeffs[idx] == -10.0

    def test_all_eigenpairs_to_order8(self):
        table = sh.sh_index_table(8)
        for j, (l, m) in enumerate(table.entries):
            unit = np.zeros(len(table))
            unit[j] = 1.0
            out = sh.laplace_beltrami_apply(sh.SHCoefficients(coeffs=unit, order=8))
            assert out.coeffs[j] == -l * (l + 1)

    @given(a=st.floats(-3, 3), seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_linearity(self, a, seed):
        rng = np.random.default_rng(seed)
        c1 = sh.SHCoefficients(coeffs=rng.standard_normal(15), order=4)
        c2 = sh.SHCoefficients(coeffs=rng.standard_normal(15), order=4)
        combo = sh.SHCoefficients(coeffs=a * c1.coeffs + c2.coeffs, order=4)
        lhs = sh.laplace_beltrami_apply(combo).coeffs
        rhs = a * sh.laplace_beltrami_apply(c1).coeffs + \
            sh.laplace_beltrami_apply(c2).coeffs
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestSmoothnessEnergy:
    def test_constant_is_zero(self):
        assert sh.smoothness_energy(coeffs(2, {(0, 0): 5.0})) == 0.0

    def test_single_degree2(self):
        assert sh.smoothness_energy(coeffs(2, {(2, 0): 1.0})) == pytest.approx(3.0)

    def test_matches_quadrature(self):
        rng = np.random.default_rng(13)
        c = sh.SHCoefficients(coeffs=rng.standard_normal(45), order=8)
        direct = float(sh.smoothness_energy(c))
        via_integral = quadrature_gradient_energy(c)
        assert abs(direct - via_integral) / direct < 1e-4


class TestHeatSmooth:
    def test_tau_zero_identity(self):
        rng = np.random.default_rng(14)
        c = sh.SHCoefficients(coeffs=rng.standard_normal(15), order=4)
        out = sh.heat_smooth(c, 0.0)
        np.testing.assert_array_equal(out.coeffs, c.coeffs)

    def test_large_tau_keeps_only_constant(self):
        rng = np.random.default_rng(15)
        c = sh.SHCoefficients(coeffs=rng.standard_normal(15), order=4)
        out = sh.heat_smooth(c, 1e3)
        assert out.coeffs[0] == c.coeffs[0]
        assert np.abs(out.coeffs[1:]).max() < 1e-12

    def test_closed_form_value(self):
        c = coeffs(2, {(2, 0): 1.0})
        out = sh.heat_smooth(c, 0.1)
        idx = sh.sh_index_table(2).entries.index((2, 0))
        assert out.coeffs[idx] == pytest.approx(np.exp(-0.6), abs=1e-12)

    def test_negative_tau_rejected(self):
        with pytest.raises(sh.SHError):
            sh.heat_smooth(coeffs(2, {(0, 0): 1.0}), -0.1)

    @given(tau1=st.floats(0, 2), tau2=st.floats(0, 2), seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_energy_non_increasing_in_tau(self, tau1, tau2, seed):
        rng = np.random.default_rng(seed)
        c = sh.SHCoefficients(coeffs=rng.standard_normal(15), order=4)
        lo, hi = sorted([tau1, tau2])
        assert sh.smoothness_energy(sh.heat_smooth(c, hi)) <= \
            sh.smoothness_energy(sh.heat_smooth(c, lo)) + 1e-12


class TestOrderSelection:
    @pytest.mark.parametrize("n,expected", [(6, 2), (14, 2), (15, 4), (27, 4),
                                            (28, 6), (45, 8), (90, 8)])
    def test_max_even_order(self, n, expected):
        assert sh.max_even_order(n) == expected

    def test_cap_none(self):
        assert sh.max_even_order(100, cap=None) == 12
