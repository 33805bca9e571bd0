import math

import numpy as np
import pytest

from dmriseg import (
    FitError,
    Grid3,
    GridMismatchError,
    ShBasis,
    Volume,
    b0_normalize,
    design_matrix,
    fit_sh,
    sh_basis_row,
    sh_reconstruct,
)

from conftest import constant_volume


def quadrature_sphere(n_theta=24, n_phi=48):
    """Gauss-Legendre x uniform-phi product rule, exact for low-order
    polynomials on the sphere; weights sum to 4*pi."""
    x, w = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(x)
    phi = (np.arange(n_phi) + 0.5) * (2 * np.pi / n_phi)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    ww = np.broadcast_to(w[:, None] * (2 * np.pi / n_phi), tt.shape)
    dirs = np.stack(
        [
            np.sin(tt) * np.cos(pp),
            np.sin(tt) * np.sin(pp),
            np.cos(tt),
        ],
        axis=-1,
    )
    return dirs.reshape(-1, 3), ww.reshape(-1)


class TestBasisRow:
    def test_constant_component(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            row = sh_basis_row(d)
            assert row[0] == pytest.approx(1.0 / math.sqrt(4 * math.pi), rel=1e-12)

    def test_z_axis(self):
        row = sh_basis_row(np.array([0.0, 0.0, 1.0]))
        # at the pole every |m|>0 term vanishes and (2,0) = sqrt(5/(4*pi))
        assert row[1] == pytest.approx(0.0, abs=1e-12)
        assert row[2] == pytest.approx(0.0, abs=1e-12)
        assert row[4] == pytest.approx(0.0, abs=1e-12)
        assert row[5] == pytest.approx(0.0, abs=1e-12)
        assert row[3] == pytest.approx(math.sqrt(5.0 / (4 * math.pi)), rel=1e-12)

    def test_antipodal_rows_identical(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            assert np.allclose(sh_basis_row(d), sh_basis_row(-d), atol=1e-14)

    def test_non_unit_rejected(self):
        with pytest.raises(ValueError):
            sh_basis_row(np.array([0.0, 0.0, 1.01]))

    def test_row_count(self):
        assert ShBasis().n_coeffs == 6
        assert ShBasis(l_max=4).n_coeffs == 15
        with pytest.raises(ValueError):
            ShBasis(l_max=3)

    def test_gram_orthonormal_under_quadrature(self):
        dirs, w = quadrature_sphere()
        A = design_matrix(dirs)
        gram = (A * w[:, None]).T @ A
        assert np.allclose(gram, np.eye(6), atol=1e-6)


class TestFitSh:
    def test_round_trip_recovers_coefficients(self, dirs90):
        rng = np.random.default_rng(2)
        grid = Grid3((5, 4, 5))
        c_true = rng.standard_normal((5, 4, 5, 6)).astype(np.float32)
        signals = sh_reconstruct(Volume(grid, c_true), dirs90)
        back = fit_sh(signals, dirs90)
        assert np.abs(back.data - c_true).max() < 1e-6

    def test_constant_signal_projects_to_c00(self, dirs90):
        grid = Grid3((3, 3, 3))
        s = 0.75
        signals = Volume(
            grid, np.full((3, 3, 3, 90), s, dtype=np.float32)
        )
        coeffs = fit_sh(signals, dirs90)
        assert np.allclose(
            coeffs.data[..., 0], s * math.sqrt(4 * math.pi), atol=1e-6
        )
        assert np.abs(coeffs.data[..., 1:]).max() < 1e-9

    def test_rank_deficient_matches_pseudo_inverse_oracle(self):
        # six copies of one direction: truncated solve = minimum-norm fit
        d = np.tile([0.0, 0.0, 1.0], (6, 1))
        grid = Grid3((2, 1, 1))
        signals = Volume(
            grid, np.full((2, 1, 1, 6), 1.0, dtype=np.float32)
        )
        coeffs = fit_sh(signals, d)
        A = design_matrix(d)
        expected = np.linalg.pinv(A) @ np.ones(6)
        assert np.allclose(coeffs.data[0, 0, 0], expected, atol=1e-6)

    def test_permutation_equivariance_exact(self, dirs90):
        rng = np.random.default_rng(3)
        grid = Grid3((4, 4, 4))
        data = rng.uniform(0.1, 1.0, size=(4, 4, 4, 90)).astype(np.float32)
        signals = Volume(grid, data)
        perm = rng.permutation(90)
        permuted = Volume(grid, data[..., perm])
        a = fit_sh(signals, dirs90)
        b = fit_sh(permuted, dirs90[perm])
        assert a.data.tobytes() == b.data.tobytes()

    def test_linearity(self, dirs90):
        rng = np.random.default_rng(4)
        grid = Grid3((3, 3, 3))
        data = rng.uniform(0.1, 1.0, size=(3, 3, 3, 90)).astype(np.float32)
        a = fit_sh(Volume(grid, data), dirs90)
        b = fit_sh(Volume(grid, 2.0 * data), dirs90)
        assert np.allclose(b.data, 2.0 * a.data, rtol=1e-6, atol=1e-7)

    def test_channel_count_mismatch(self, dirs90):
        signals = constant_volume((2, 2, 2), 1.0, channels=12)
        with pytest.raises(FitError):
            fit_sh(signals, dirs90)

    def test_too_few_directions(self, dirs90):
        signals = constant_volume((2, 2, 2), 1.0, channels=5)
        with pytest.raises(FitError):
            fit_sh(signals, dirs90[:5])


class TestShReconstruct:
    def test_zero_coefficients_give_zero_signal(self, dirs90):
        coeffs = constant_volume((2, 2, 2), 0.0, channels=6)
        out = sh_reconstruct(coeffs, dirs90)
        assert np.all(out.data == 0.0)

    def test_pure_c00_gives_constant(self, dirs90):
        grid = Grid3((2, 2, 2))
        data = np.zeros((2, 2, 2, 6), dtype=np.float32)
        data[..., 0] = 1.0
        out = sh_reconstruct(Volume(grid, data), dirs90)
        assert np.allclose(out.data, 1.0 / math.sqrt(4 * math.pi), atol=1e-7)

    def test_channel_mismatch(self, dirs90):
        coeffs = constant_volume((2, 2, 2), 0.0, channels=5)
        with pytest.raises(FitError):
            sh_reconstruct(coeffs, dirs90)


class TestB0Normalize:
    def test_equal_volumes_give_ones(self):
        dwi = constant_volume((3, 3, 3), 800.0, channels=4)
        b0 = constant_volume((3, 3, 3), 800.0)
        out, bg = b0_normalize(dwi, b0)
        assert np.allclose(out.data, 1.0)
        assert not bg.data.any()

    def test_zero_reference_flagged_and_zeroed(self):
        g = Grid3((2, 1, 1))
        dwi = Volume(g, np.full((2, 1, 1, 2), 500.0, dtype=np.float32))
        b0_data = np.array([1000.0, 0.0], dtype=np.float32).reshape(2, 1, 1, 1)
        out, bg = b0_normalize(dwi, Volume(g, b0_data))
        assert np.allclose(out.data[0, 0, 0], 0.5)
        assert np.all(out.data[1, 0, 0] == 0.0)
        assert not bg.data[0, 0, 0]
        assert bg.data[1, 0, 0]

    def test_ratio_clamped(self):
        dwi = constant_volume((2, 2, 2), 5000.0)
        b0 = constant_volume((2, 2, 2), 1000.0)
        out, _ = b0_normalize(dwi, b0)
        assert np.all(out.data == 2.0)

    def test_grid_mismatch(self):
        dwi = constant_volume((2, 2, 2), 1.0)
        b0 = constant_volume((2, 2, 3), 1.0)
        with pytest.raises(GridMismatchError):
            b0_normalize(dwi, b0)

    def test_multi_channel_reference_rejected(self):
        dwi = constant_volume((2, 2, 2), 1.0)
        b0 = constant_volume((2, 2, 2), 1.0, channels=2)
        with pytest.raises(ValueError):
            b0_normalize(dwi, b0)

    def test_explicit_eps_overrides_default(self):
        g = Grid3((2, 1, 1))
        dwi = Volume(g, np.full((2, 1, 1, 1), 10.0, dtype=np.float32))
        b0 = Volume(
            g, np.array([100.0, 5.0], dtype=np.float32).reshape(2, 1, 1, 1)
        )
        _, bg_default = b0_normalize(dwi, b0)
        _, bg_strict = b0_normalize(dwi, b0, eps=50.0)
        assert not bg_default.data[1, 0, 0]
        assert bg_strict.data[1, 0, 0]
