"""
Unit tests for frames, circle parameterizations and circle grids
"""

import pytest
import numpy as np

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import ConfigurationError, DomainError
from geometry import (
    Frame, angle_between, beta_point, build_grid, check_grid_size, check_rotation, great_circle,
    grid_parameter, hemisphere, icosphere, internal_index, signed_index, perp_point, random_rotation,
    rotate_frame,
)


@pytest.fixture
def canonical_frame():
    """Canonical axes e1, e2, e3"""
    return Frame.canonical()


@pytest.fixture
def rotations():
    """Twenty seeded random rotations"""
    rng = np.random.default_rng(2024)
    return [random_rotation(rng) for _ in range(20)]


class TestFrame:
    """Tests for Frame validation and construction"""

    def test_canonical_frame(self, canonical_frame):
        """Test canonical frame matrix is the identity"""
        assert np.allclose(canonical_frame.matrix, np.eye(3))

    def test_non_orthogonal_axes_rejected(self):
        """Test non-orthogonal axes raise DomainError"""
        with pytest.raises(DomainError):
            Frame(np.array([1.0, 0, 0]), np.array([np.sqrt(0.5), np.sqrt(0.5), 0]), np.array([0, 0, 1.0]))

    def test_left_handed_frame_rejected(self):
        """Test a left-handed frame raises DomainError"""
        with pytest.raises(DomainError):
            Frame(np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, -1.0]))

    def test_from_axis(self):
        """Test from_axis completes a right-handed frame"""
        frame = Frame.from_axis([1.0, 2.0, -0.5])
        assert np.allclose(frame.u1, np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5]))
        assert np.allclose(np.cross(frame.u1, frame.u2), frame.u3)

    def test_from_axis_parallel_hint(self):
        """Test a hint parallel to the axis is rejected"""
        with pytest.raises(DomainError):
            Frame.from_axis([0, 0, 1.0], hint=[0, 0, 2.0])


class TestParameterization:
    """Tests for the two-branch circle parameterization"""

    def test_beta_landmarks(self, canonical_frame):
        """Test beta = 1, 0, -1 and 2 land on u2, u3, -u2 and -u3"""
        assert np.allclose(beta_point(1.0, canonical_frame), [0, 1, 0])
        assert np.allclose(beta_point(0.0, canonical_frame), [0, 0, 1])
        assert np.allclose(beta_point(-1.0, canonical_frame), [0, -1, 0])
        assert np.allclose(beta_point(2.0, canonical_frame), [0, 0, -1])

    def test_beta_out_of_range(self, canonical_frame):
        """Test a parameter beyond 2 raises DomainError"""
        with pytest.raises(DomainError):
            beta_point(2.5, canonical_frame)

    def test_perp_point_pole(self, canonical_frame):
        """Test alpha = 1 is the main axis for every beta"""
        for beta in (-1.7, -0.3, 0.0, 0.9, 1.5):
            assert np.allclose(perp_point(1.0, beta, canonical_frame), [1, 0, 0])

    def test_perp_point_equator(self, canonical_frame):
        """Test alpha = 0 lands on the dominant circle"""
        assert np.allclose(perp_point(0.0, 0.4, canonical_frame), beta_point(0.4, canonical_frame))

    def test_points_are_unit(self, canonical_frame):
        """Test all parameterized points have unit norm"""
        for alpha in np.linspace(-2, 2, 9):
            for beta in np.linspace(-2, 2, 9):
                assert abs(np.linalg.norm(perp_point(alpha, beta, canonical_frame)) - 1.0) < 1e-12


class TestIndices:
    """Tests for grid index maps"""

    def test_signed_index(self):
        """Test internal indices past 3N/4 wrap to negative indices"""
        assert signed_index(0, 32) == 0
        assert signed_index(23, 32) == 23
        assert signed_index(24, 32) == -8
        assert signed_index(31, 32) == -1

    def test_internal_index(self):
        """Test negative indices map back modulo N"""
        assert internal_index(-1, 32) == 31
        assert internal_index(-8, 32) == 24
        assert internal_index(signed_index(27, 32), 32) == 27

    def test_grid_parameter_branches(self):
        """Test the three branches of the grid parameter"""
        values = grid_parameter(np.array([-8, 0, 8, 16, 23]), 32)
        assert np.allclose(values[:4], [2.0, 1.0, 0.0, -1.0])
        assert -2.0 < values[4] < -1.0

    def test_grid_size_validation(self):
        """Test grid sizes must be positive multiples of 8"""
        assert check_grid_size(32) == 32
        for bad in (0, 12, -16):
            with pytest.raises(ConfigurationError):
                check_grid_size(bad)


class TestCircleGrid:
    """Tests for the circle grid"""

    def test_dominant_circle_perpendicular(self, canonical_frame):
        """Test dominant circle points are orthogonal to u1"""
        grid = build_grid(canonical_frame, 32)
        assert np.allclose(grid.dominant_points @ canonical_frame.u1, 0.0, atol=1e-12)
        assert np.allclose(grid.point(0), [0, 1, 0])
        assert np.allclose(grid.point(8), [0, 0, 1])

    def test_pole_and_equator(self, canonical_frame):
        """Test the pole row is u1 and the equator row is the dominant circle"""
        grid = build_grid(canonical_frame, 32)
        assert np.allclose(grid.perp_points[grid.pole_index], canonical_frame.u1)
        j1, j2 = grid.equator_indices
        assert np.allclose(grid.perp_points[j1], grid.dominant_points, atol=1e-12)
        assert np.allclose(grid.perp_points[j2], -grid.dominant_points, atol=1e-12)

    def test_antipodal_rows(self, canonical_frame):
        """Test shifting j or k by N/2 maps points to their antipodes"""
        grid = build_grid(canonical_frame, 32)
        assert np.allclose(grid.perp_points[16:], -grid.perp_points[:16], atol=1e-12)
        assert np.allclose(grid.dominant_points[16:], -grid.dominant_points[:16], atol=1e-12)

    def test_rotation_equivariance(self, canonical_frame, rotations):
        """Test grids of a rotated frame are the rotated grids"""
        base = build_grid(canonical_frame, 32)
        for r in rotations:
            rotated = build_grid(rotate_frame(canonical_frame, r), 32)
            assert np.max(np.abs(rotated.perp_points - base.perp_points @ r.T)) < 1e-10
            assert np.max(np.abs(rotated.dominant_points - base.dominant_points @ r.T)) < 1e-10

    def test_with_values(self, canonical_frame):
        """Test filling a grid and averaging perpendicular rows"""
        grid = build_grid(canonical_frame, 32)
        assert not grid.is_filled
        perp = np.tile(np.arange(32.0)[:, None], (1, 32))
        filled = grid.with_values(np.ones(32), perp)
        assert filled.is_filled
        assert filled.avg_perp(5) == 5.0
        assert filled.value(-1) == 1.0


class TestRotationsAndSpheres:
    """Tests for rotations, great circles and icospheres"""

    def test_random_rotation_is_proper(self, rotations):
        """Test random rotations pass validation"""
        for r in rotations:
            check_rotation(r)

    def test_check_rotation_rejects_reflection(self):
        """Test a reflection is not accepted as a rotation"""
        with pytest.raises(DomainError):
            check_rotation(np.diag([1.0, 1.0, -1.0]))

    def test_great_circle_antipodal_nodes(self):
        """Test x and -x share quadrature nodes"""
        x = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
        nodes = great_circle(x, 64)
        assert np.allclose(nodes, great_circle(-x, 64))
        assert np.allclose(nodes @ x, 0.0, atol=1e-12)

    def test_icosphere_counts(self):
        """Test vertex counts 10 * 4**level + 2"""
        for level, count in ((0, 12), (1, 42), (2, 162), (3, 642)):
            points = icosphere(level)
            assert points.shape == (count, 3)
            assert np.allclose(np.linalg.norm(points, axis=1), 1.0)

    def test_hemisphere(self):
        """Test one representative per antipodal pair"""
        half = hemisphere(icosphere(2))
        assert half.shape == (81, 3)

    def test_angle_between(self):
        """Test plain and antipodal angles"""
        assert angle_between([1, 0, 0], [0, 1, 0]) == pytest.approx(90.0)
        assert angle_between([1, 0, 0], [-1, 0, 0]) == pytest.approx(180.0)
        assert angle_between([1, 0, 0], [-1, 0, 0], antipodal=True) == pytest.approx(0.0)
