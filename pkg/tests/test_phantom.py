"""
Unit tests for the diffusion models and the acquisition simulator
"""

import pytest
import numpy as np
from scipy import integrate
from scipy.stats import rice

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import ConfigurationError, DataError, DomainError
from geometry import Frame, random_rotation
from phantom import (
    MODEL_NAMES, AcquisitionScheme, EllipsoidModel, MixtureModel, acquire, dawson, electrostatic_scheme,
    eval_model, evolution_sequence, fiber_evolution, icosphere_scheme, load_scheme, min_antipodal_angle,
    origin_value, benchmark_model, rician, save_scheme,
)


@pytest.fixture
def scheme():
    """Dense antipodal-half icosphere scheme with two b=0 images"""
    return icosphere_scheme(2, n0=2)


class TestModels:
    """Tests for the simulation models"""

    def test_a1_along_axes(self):
        """Test A1 values along the canonical axes"""
        model = benchmark_model('A1')
        assert eval_model(model, [1, 0, 0]) == pytest.approx(np.exp(-0.04 * 68))
        assert eval_model(model, [0, 1, 0]) == pytest.approx(np.exp(-0.04 * 8))

    def test_origin_values(self):
        """Test the models equal 1 at the origin, A5 equals 2"""
        for name in MODEL_NAMES:
            expected = 2.0 if name == 'A5' else 1.0
            assert origin_value(benchmark_model(name)) == pytest.approx(expected)

    def test_rotation(self):
        """Test a rotated model evaluated at rotated points"""
        rng = np.random.default_rng(5)
        r = random_rotation(rng)
        q = rng.standard_normal((20, 3))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        for name in ('A1', 'A2', 'A4', 'A5'):
            base = benchmark_model(name).evaluate(q)
            rotated = benchmark_model(name, r).evaluate(q @ r.T)
            assert np.allclose(base, rotated, atol=1e-12)

    def test_a6_ignores_rotation(self):
        """Test A6 keeps its fixed axes"""
        r = random_rotation(np.random.default_rng(1))
        q = np.eye(3)
        assert np.allclose(benchmark_model('A6').evaluate(q), benchmark_model('A6', r).evaluate(q))

    def test_a5_antipodal_symmetry(self):
        """Test the asymmetric model still has antipodal symmetry"""
        rng = np.random.default_rng(9)
        q = rng.standard_normal((50, 3))
        model = benchmark_model('A5')
        assert np.allclose(model.evaluate(q), model.evaluate(-q))

    def test_unknown_model(self):
        """Test unknown model names raise ConfigurationError"""
        with pytest.raises(ConfigurationError):
            benchmark_model('A7')

    def test_invalid_mixture(self):
        """Test mixture weights must sum to one"""
        component = EllipsoidModel((68, 8, 8), Frame.canonical())
        with pytest.raises(DomainError):
            MixtureModel(((0.5, component), (0.4, component)))

    def test_negative_eigenvalue(self):
        """Test negative eigenvalues raise DomainError"""
        with pytest.raises(DomainError):
            EllipsoidModel((68, -1, 8), Frame.canonical())

    def test_gaussian_kernel(self):
        """Test the Gaussian kernel exp(-2 pi^2 s^2)"""
        model = EllipsoidModel((0.01, 0.01, 0.01), Frame.canonical(), kernel='gaussian')
        assert eval_model(model, [0, 0, 1]) == pytest.approx(np.exp(-2 * np.pi ** 2 * 0.01))

    def test_eval_model_rejects_non_unit(self):
        """Test eval_model wants a unit direction"""
        with pytest.raises(DomainError):
            eval_model(benchmark_model('A1'), [1.0, 1.0, 0.0])


class TestDawson:
    """Tests for the Dawson function"""

    def test_against_quadrature(self):
        """Test dawson against adaptive quadrature on [-6, 6]"""
        for x in np.linspace(-6.0, 6.0, 49):
            oracle, _ = integrate.quad(lambda s: np.exp(s ** 2 - x ** 2), 0.0, x, epsabs=1e-13, epsrel=1e-13)
            assert abs(dawson(x) - oracle) < 1e-10

    def test_odd(self):
        """Test dawson is odd"""
        x = np.linspace(0, 5, 11)
        assert np.allclose(dawson(-x), -dawson(x))


class TestFiberEvolution:
    """Tests for the forking and crossing sequences"""

    def test_forking_sequence(self):
        """Test seven forking voxels, the first a single population"""
        sequence = evolution_sequence('forking')
        assert [label for label, _ in sequence][0] == '(i,a)'
        assert len(sequence) == 7
        assert len(sequence[0][1].components) == 1
        assert sequence[-1][1].weights == pytest.approx([0.5, 0.5])

    def test_crossing_sequence(self):
        """Test six crossing voxels with mirrored end voxels"""
        sequence = evolution_sequence('crossing')
        assert len(sequence) == 6
        assert sequence[3][0] == '(iii,d)'
        q = np.eye(3)
        first, last = sequence[0][1].evaluate(q), sequence[-1][1].evaluate(q)
        assert np.allclose(first[[1, 0, 2]], last)

    def test_forking_weights(self):
        """Test the forking first-population weight 1 - t/2"""
        model = fiber_evolution('forking', 0.5)
        assert model.weights == pytest.approx([0.75, 0.25])

    def test_invalid_parameters(self):
        """Test out-of-range parameters and unknown kinds"""
        with pytest.raises(DomainError):
            fiber_evolution('forking', 1.5)
        with pytest.raises(ConfigurationError):
            evolution_sequence('kissing')


class TestAcquisition:
    """Tests for the Rician acquisition simulator"""

    def test_noiseless(self, scheme):
        """Test zero noise returns the model values"""
        model = benchmark_model('A2')
        sample = acquire(model, scheme, 0.0, 3)
        assert np.allclose(sample.raw_values, model.evaluate(scheme.directions))
        assert np.allclose(sample.b0_values, 1.0)

    def test_noise_relative_to_origin(self, scheme):
        """Test the channel sigma scales with the origin value"""
        sample = acquire(benchmark_model('A5'), scheme, 0.1, 3)
        assert sample.noise_sigma == pytest.approx(0.2)

    def test_deterministic(self, scheme):
        """Test the same seed gives the same sample"""
        a = acquire(benchmark_model('A1'), scheme, 0.05, 11)
        b = acquire(benchmark_model('A1'), scheme, 0.05, 11)
        assert np.array_equal(a.raw_values, b.raw_values)
        assert np.array_equal(a.b0_values, b.b0_values)

    def test_negative_noise(self, scheme):
        """Test negative noise levels raise DomainError"""
        with pytest.raises(DomainError):
            acquire(benchmark_model('A1'), scheme, -0.1, 0)

    def test_rician_mean(self):
        """Test the Rician magnitude mean against scipy.stats.rice"""
        rng = np.random.default_rng(0)
        nu, sigma = 0.4, 0.1
        values = rician(np.full(100_000, nu), sigma, rng)
        assert values.mean() == pytest.approx(rice.mean(nu / sigma, scale=sigma), abs=1e-3)


class TestSchemes:
    """Tests for direction schemes"""

    def test_electrostatic_six(self):
        """Test six directions spread at least 60 degrees apart"""
        result = electrostatic_scheme(6)
        assert result.n == 6
        assert min_antipodal_angle(result.directions) >= 60.0

    def test_electrostatic_sixty(self):
        """Test sixty directions spread at least 15 degrees apart"""
        result = electrostatic_scheme(60)
        assert np.allclose(np.linalg.norm(result.directions, axis=1), 1.0)
        assert min_antipodal_angle(result.directions) >= 15.0

    def test_too_few_directions(self):
        """Test schemes need at least six directions"""
        with pytest.raises(ConfigurationError):
            AcquisitionScheme(np.eye(3))

    def test_save_and_load(self, tmp_path):
        """Test a scheme file keeps directions, n0 and b"""
        original = electrostatic_scheme(12, n0=3)
        path = save_scheme(original, tmp_path / 'scheme.txt')
        loaded = load_scheme(path)
        assert loaded.n0 == 3
        assert loaded.b_value == pytest.approx(1600.0)
        assert np.allclose(loaded.directions, original.directions, atol=1e-10)

    def test_malformed_scheme_file(self, tmp_path):
        """Test malformed lines raise DataError with the line number"""
        path = tmp_path / 'bad.txt'
        path.write_text("1 0 0\n0 1\n")
        with pytest.raises(DataError, match='bad.txt:2'):
            load_scheme(path)

    def test_missing_scheme_file(self, tmp_path):
        """Test a missing scheme file raises DataError"""
        with pytest.raises(DataError):
            load_scheme(tmp_path / 'none.txt')
