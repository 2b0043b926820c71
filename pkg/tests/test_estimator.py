"""
Unit tests for normalization, interpolation, the Funk-Radon transform and dominant direction estimation
"""

import pytest
import numpy as np

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import AnalysisSettings
from errors import DataError, DomainError
from estimator import (
    DominantEstimate, SphericalInterpolator, dominant_direction, estimate_sigma_circle, estimate_sigma_star,
    fill_grid, frt, frt_many, gfa, interpolate, minor_axis, normalize, process_sample,
)
from geometry import Frame, angle_between, build_grid, great_circle, hemisphere, icosphere, random_rotation
from phantom import (
    AcquisitionScheme, EllipsoidModel, HardiSample, acquire, electrostatic_scheme, icosphere_scheme,
    benchmark_model,
)


@pytest.fixture(scope='module')
def scheme60():
    """Sixty-direction electrostatic scheme"""
    return electrostatic_scheme(60)


@pytest.fixture(scope='module')
def dense_scheme():
    """1281 directions, one from each antipodal pair of a level-4 icosphere"""
    return icosphere_scheme(4)


def known_frame_estimate(frame):
    return DominantEstimate(frame=frame, frt_values=np.ones(3), candidates=np.eye(3), candidate_count=0)


class TestNormalize:
    """Tests for normalization and noise scales"""

    def test_normalize_noiseless(self, scheme60):
        """Test normalized values equal the model values over its origin value"""
        model = benchmark_model('A5')
        nd = normalize(acquire(model, scheme60, 0.0, 0))
        assert nd.abar0 == pytest.approx(2.0)
        assert np.allclose(nd.values[:60], model.evaluate(scheme60.directions) / 2.0)
        assert np.allclose(nd.points[60:], -nd.points[:60])

    def test_non_positive_b0(self, scheme60):
        """Test a zero b=0 mean raises DataError"""
        sample = HardiSample(np.ones(60), np.zeros(1), scheme60)
        with pytest.raises(DataError):
            normalize(sample)

    def test_sigma_star_from_b0_repeats(self):
        """Test the b=0 spread estimates the relative noise level"""
        scheme = AcquisitionScheme(icosphere_scheme(1).directions, n0=10)
        estimates = [estimate_sigma_star(acquire(benchmark_model('A1'), scheme, 0.05, seed)) for seed in range(20)]
        assert np.mean(estimates) == pytest.approx(0.05, rel=0.2)

    def test_sigma_sources(self, scheme60):
        """Test the known and residual fallbacks"""
        sample = acquire(benchmark_model('A1'), scheme60, 0.05, 4)
        assert normalize(sample).sigma_source == 'known'
        assert normalize(sample).sigma_star == pytest.approx(sample.noise_sigma / sample.b0_values.mean())
        anonymous = HardiSample(sample.raw_values, sample.b0_values, scheme60)
        nd = normalize(anonymous)
        assert nd.sigma_source == 'residual'
        assert nd.sigma_star > 0


class TestInterpolation:
    """Tests for the spherical interpolator"""

    def test_exact_at_nodes(self, scheme60):
        """Test the interpolant reproduces the data at the nodes"""
        nd = normalize(acquire(benchmark_model('A2'), scheme60, 0.0, 0))
        assert not nd.fallback
        assert np.allclose(nd.evaluate(nd.points), nd.values, atol=1e-10)

    def test_accuracy_on_smooth_model(self):
        """Test relative error below 2% on a mildly anisotropic ellipsoid"""
        model = EllipsoidModel((20, 16, 16), Frame.canonical())
        nd = normalize(acquire(model, icosphere_scheme(3), 0.0, 0))
        rng = np.random.default_rng(3)
        q = rng.standard_normal((500, 3))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        assert np.max(np.abs(nd.evaluate(q) / model.evaluate(q) - 1.0)) < 0.02

    def test_single_point(self, scheme60):
        """Test interpolate at one direction"""
        nd = normalize(acquire(benchmark_model('A1'), scheme60, 0.0, 0))
        assert interpolate(nd, scheme60.directions[7]) == pytest.approx(nd.values[7])

    def test_degenerate_fallback(self):
        """Test coplanar points fall back to inverse-distance weighting"""
        points = great_circle(np.array([0, 0, 1.0]), 12)
        values = np.arange(12.0)
        interpolator = SphericalInterpolator(points, values)
        assert interpolator.fallback
        assert np.allclose(interpolator(points), values)


class TestFunkRadon:
    """Tests for the Funk-Radon transform and GFA"""

    def test_antipodal_symmetry(self, scheme60):
        """Test FRT(x) equals FRT(-x) exactly"""
        nd = normalize(acquire(benchmark_model('A4'), scheme60, 0.05, 1))
        x = np.array([0.2, 0.7, -0.3])
        assert frt(nd, x) == frt(nd, -x)

    def test_constant_function(self):
        """Test the FRT of an isotropic model is its constant value"""
        model = benchmark_model('A3')
        values = frt_many(model, hemisphere(icosphere(1)))
        assert np.allclose(values, np.exp(-0.04 * 28))

    def test_quadrature_size(self):
        """Test fewer than 16 nodes raise DomainError"""
        with pytest.raises(DomainError):
            frt(benchmark_model('A3'), [1, 0, 0], L=8)

    def test_gfa_bounds(self):
        """Test GFA is 0 for constant and 1 for a single spike"""
        assert gfa(np.ones(10)) == pytest.approx(0.0)
        spike = np.zeros(10)
        spike[3] = 1.0
        assert gfa(spike) == pytest.approx(1.0)
        assert 0.0 < gfa(np.linspace(1, 2, 10)) < 1.0


class TestDominantDirection:
    """Tests for the dominant direction estimate"""

    def test_recovers_rotated_axis(self, scheme60):
        """Test the estimate lies within 5 degrees of the true axis at zero noise"""
        rng = np.random.default_rng(17)
        for _ in range(10):
            r = random_rotation(rng)
            nd = normalize(acquire(benchmark_model('A1', r), scheme60, 0.0, 0))
            est = dominant_direction(nd)
            assert angle_between(est.frame.u1, r[:, 0], antipodal=True) < 5.0

    @pytest.mark.slow
    def test_hundred_rotations(self, scheme60):
        """Test the zero-noise estimate lies within 3 degrees of the true axis for 100 rotations"""
        rng = np.random.default_rng(101)
        errors = []
        for _ in range(100):
            r = random_rotation(rng)
            nd = normalize(acquire(benchmark_model('A1', r), scheme60, 0.0, 0))
            errors.append(angle_between(dominant_direction(nd).frame.u1, r[:, 0], antipodal=True))
        assert max(errors) < 3.0

    def test_exact_model(self):
        """Test the exact-model search finds the axis within 1 degree"""
        r = random_rotation(np.random.default_rng(8))
        est = dominant_direction(benchmark_model('A2', r), candidates=hemisphere(icosphere(3)))
        assert angle_between(est.frame.u1, r[:, 0], antipodal=True) < 1.0

    def test_minor_axis(self):
        """Test the minor axis of A2 is its smallest-eigenvalue axis"""
        u2 = minor_axis(benchmark_model('A2'), np.array([1.0, 0, 0]))
        assert abs(u2 @ np.array([0, 0, 1.0])) > 0.9999


class TestGrid:
    """Tests for grid filling and circle noise scales"""

    def test_avg_perp_closed_form(self):
        """Test the exact A1 grid average against exp(-t(68 a^2 + 8 (1 - a^2)))"""
        model = benchmark_model('A1')
        grid = fill_grid(model, known_frame_estimate(Frame.canonical()), 32)
        cos = grid.perp_points[:, 0, 0]
        expected = np.exp(-0.04 * (68 * cos ** 2 + 8 * (1 - cos ** 2)))
        assert np.allclose(grid.avg_perp(), expected, atol=1e-9)

    def test_avg_perp_interpolated(self, dense_scheme):
        """Test the interpolated A1 grid average within 2% of the closed form"""
        nd = normalize(acquire(benchmark_model('A1'), dense_scheme, 0.0, 0))
        grid = fill_grid(nd, known_frame_estimate(Frame.canonical()), 32)
        cos = grid.perp_points[:, 0, 0]
        expected = np.exp(-0.04 * (68 * cos ** 2 + 8 * (1 - cos ** 2)))
        assert np.max(np.abs(grid.avg_perp() / expected - 1.0)) < 0.02

    def test_sigma_circle(self):
        """Test the maximum and median deviation variants"""
        grid = build_grid(Frame.canonical(), 32).with_values(np.tile([0.0, 2.0], 16), np.ones((32, 32)))
        abar, sigma = estimate_sigma_circle(grid, rho=3.0)
        assert abar == pytest.approx(1.0)
        assert sigma == pytest.approx(np.sqrt(3.0))
        _, sigma_median = estimate_sigma_circle(grid, rho=1.0, mad='median')
        assert sigma_median == pytest.approx(1.4826)

    def test_sigma_circle_constant(self):
        """Test a constant dominant circle has zero spread"""
        grid = build_grid(Frame.canonical(), 32).with_values(np.full(32, 0.4), np.ones((32, 32)))
        assert estimate_sigma_circle(grid)[1] == 0.0

    def test_process_sample(self, scheme60):
        """Test the pipeline returns a filled grid of the requested size"""
        nd, est, grid = process_sample(acquire(benchmark_model('A1'), scheme60, 0.05, 2), AnalysisSettings(N=32))
        assert grid.is_filled
        assert grid.perp_values.shape == (32, 32)
        assert grid.frt_values is est.frt_values or np.array_equal(grid.frt_values, est.frt_values)
        assert nd.n == 60
