"""
Spherical geometry: frames, great-circle parameterizations and circle grids
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from errors import ConfigurationError, DomainError

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-12
FRAME_TOL = 1e-10


def unit_vector(v) -> np.ndarray:
    """Return v scaled to unit norm"""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if v.shape != (3,) or not np.isfinite(norm) or norm == 0.0:
        raise DomainError(f"Cannot normalize vector {v}")
    return v / norm


def check_direction(v, tol=UNIT_TOL) -> np.ndarray:
    """Validate that v is a unit 3-vector and return it as an array"""
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > tol:
        raise DomainError(f"Not a unit direction: {v}")
    return v


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip v so its first nonzero component is positive"""
    for component in v:
        if abs(component) > 1e-12:
            return v if component > 0 else -v
    return v


@dataclass(frozen=True, eq=False)
class Frame:
    """Right-handed orthonormal frame (u1, u2, u3)"""

    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray

    def __post_init__(self):
        axes = [np.asarray(u, dtype=float) for u in (self.u1, self.u2, self.u3)]
        for name, u in zip(("u1", "u2", "u3"), axes):
            if u.shape != (3,) or abs(np.linalg.norm(u) - 1.0) > FRAME_TOL:
                raise DomainError(f"Frame axis {name} is not a unit vector: {u}")
        gram = np.array([[a @ b for b in axes] for a in axes])
        if np.max(np.abs(gram - np.eye(3))) > FRAME_TOL:
            raise DomainError("Frame axes are not pairwise orthogonal")
        if np.max(np.abs(np.cross(axes[0], axes[1]) - axes[2])) > FRAME_TOL:
            raise DomainError("Frame is not right-handed")
        object.__setattr__(self, "u1", axes[0])
        object.__setattr__(self, "u2", axes[1])
        object.__setattr__(self, "u3", axes[2])

    @classmethod
    def canonical(cls) -> "Frame":
        return cls(np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0]))

    @classmethod
    def from_matrix(cls, matrix) -> "Frame":
        """Frame whose axes are the columns of matrix"""
        m = np.asarray(matrix, dtype=float)
        return cls(m[:, 0].copy(), m[:, 1].copy(), m[:, 2].copy())

    @classmethod
    def from_axis(cls, u1, hint=None) -> "Frame":
        """Complete u1 to a right-handed frame, u2 taken from hint projected off u1"""
        u1 = unit_vector(u1)
        if hint is None:
            hint = np.eye(3)[int(np.argmin(np.abs(u1)))]
        hint = np.asarray(hint, dtype=float)
        u2 = hint - (hint @ u1) * u1
        if np.linalg.norm(u2) < 1e-9:
            raise DomainError("Frame hint is parallel to the main axis")
        u2 = u2 / np.linalg.norm(u2)
        return cls(u1, u2, np.cross(u1, u2))

    @property
    def matrix(self) -> np.ndarray:
        return np.column_stack([self.u1, self.u2, self.u3])

    def __repr__(self):
        return f"<Frame(u1={np.round(self.u1, 4)}, u2={np.round(self.u2, 4)})>"


def _branch_coefficients(values):
    """Coefficients (c_a, c_b) of the two-branch circle parameterization.

    For |v| <= 1 the point is v*a + sqrt(1-v^2)*b, for 1 < |v| <= 2 it is
    sgn(v)(2-|v|)*a - sqrt(1-(2-|v|)^2)*b.
    """
    v = np.asarray(values, dtype=float)
    if np.any(~np.isfinite(v)) or np.any(np.abs(v) > 2.0):
        raise DomainError(f"Circle parameter outside [-2, 2]: {values}")
    inner = np.abs(v) <= 1.0
    folded = np.sign(v) * (2.0 - np.abs(v))
    c_a = np.where(inner, v, folded)
    c_b = np.where(inner,
                   np.sqrt(np.clip(1.0 - v ** 2, 0.0, None)),
                   -np.sqrt(np.clip(1.0 - folded ** 2, 0.0, None)))
    return c_a, c_b


def beta_point(beta: float, frame: Frame) -> np.ndarray:
    """Point q(beta) on the great circle perpendicular to frame.u1"""
    c_a, c_b = _branch_coefficients(beta)
    return float(c_a) * frame.u2 + float(c_b) * frame.u3


def perp_point(alpha: float, beta: float, frame: Frame) -> np.ndarray:
    """Point on the great circle through frame.u1 and q(beta)"""
    q = beta_point(beta, frame)
    c_a, c_b = _branch_coefficients(alpha)
    return float(c_a) * frame.u1 + float(c_b) * q


def check_grid_size(N: int) -> int:
    if not isinstance(N, (int, np.integer)) or N <= 0 or N % 8 != 0:
        raise ConfigurationError(f"Grid size N must be a positive multiple of 8, got {N}")
    return int(N)


def signed_index(i: int, N: int) -> int:
    """Map an internal index 0..N-1 to the range -N/4..3N/4-1"""
    i = int(i) % N
    return i if i < 3 * N // 4 else i - N


def internal_index(p: int, N: int) -> int:
    """Map any integer grid index to its internal representative 0..N-1"""
    return int(p) % N


def grid_parameter(p, N: int):
    """Three-branch parameter value for grid index p in -N/4..3N/4-1"""
    p = np.asarray(p)
    if np.any(p < -N // 4) or np.any(p >= 3 * N // 4):
        raise DomainError(f"Grid index outside [-N/4, 3N/4): {p}")
    c = np.cos(2.0 * np.pi * p / N)
    return np.where(p < 0, 2.0 - c, np.where(p < N // 2, c, -2.0 - c))


@dataclass(eq=False)
class CircleGrid:
    """Dominant circle and perpendicular circle grid around an estimated frame.

    Internal indices run 0..N-1 and agree with the signed indices
    -N/4..3N/4-1 modulo N (see signed_index). The pole (alpha = 1) is j = 0,
    the equator (alpha = 0) is j = N/4 and j = 3N/4.
    """

    frame: Frame
    N: int
    dominant_points: np.ndarray
    perp_points: np.ndarray
    dominant_values: Optional[np.ndarray] = None
    perp_values: Optional[np.ndarray] = None
    frt_values: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def pole_index(self) -> int:
        return 0

    @property
    def equator_index(self) -> int:
        return self.N // 4

    @property
    def equator_indices(self) -> Tuple[int, int]:
        return self.N // 4, 3 * self.N // 4

    @property
    def is_filled(self) -> bool:
        return self.dominant_values is not None and self.perp_values is not None

    def point(self, k: int) -> np.ndarray:
        return self.dominant_points[int(k) % self.N]

    def perp_point(self, j: int, k: int) -> np.ndarray:
        return self.perp_points[int(j) % self.N, int(k) % self.N]

    def value(self, k: int) -> float:
        return float(self.dominant_values[int(k) % self.N])

    def avg_perp(self, j=None):
        """Average over k of the perpendicular values at row j (all rows if j is None)"""
        means = self.perp_values.mean(axis=1)
        return means if j is None else float(means[int(j) % self.N])

    def with_values(self, dominant_values, perp_values, frt_values=None) -> "CircleGrid":
        return CircleGrid(self.frame, self.N, self.dominant_points, self.perp_points,
                          np.asarray(dominant_values, dtype=float),
                          np.asarray(perp_values, dtype=float),
                          None if frt_values is None else np.asarray(frt_values, dtype=float))


def build_grid(frame: Frame, N: int = 128) -> CircleGrid:
    """Discretize the dominant circle and the perpendicular circles of frame"""
    N = check_grid_size(N)
    signed = np.array([signed_index(i, N) for i in range(N)])
    params = grid_parameter(signed, N)

    b_a, b_b = _branch_coefficients(params)
    dominant = b_a[:, None] * frame.u2 + b_b[:, None] * frame.u3

    a_a, a_b = _branch_coefficients(params)
    perp = a_a[:, None, None] * frame.u1 + a_b[:, None, None] * dominant[None, :, :]
    return CircleGrid(frame=frame, N=N, dominant_points=dominant, perp_points=perp)


def check_rotation(rotation) -> np.ndarray:
    r = np.asarray(rotation, dtype=float)
    if r.shape != (3, 3):
        raise DomainError(f"Rotation must be 3x3, got shape {r.shape}")
    if np.max(np.abs(r.T @ r - np.eye(3))) > FRAME_TOL or abs(np.linalg.det(r) - 1.0) > FRAME_TOL:
        raise DomainError("Matrix is not a proper rotation")
    return r


def rotate_frame(frame: Frame, rotation) -> Frame:
    r = check_rotation(rotation)
    return Frame(r @ frame.u1, r @ frame.u2, r @ frame.u3)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation drawn uniformly from SO(3) (normalized random quaternion)"""
    return Rotation.random(random_state=rng).as_matrix()


def circle_basis(x) -> Tuple[np.ndarray, np.ndarray]:
    """Orthonormal in-plane basis (a, b) of the great circle perpendicular to x, with a x b = x"""
    x = canonical_sign(unit_vector(x))
    a = np.cross(x, np.eye(3)[int(np.argmin(np.abs(x)))])
    a /= np.linalg.norm(a)
    return a, np.cross(x, a)


def great_circle(x, L: int) -> np.ndarray:
    """L equally spaced nodes on the great circle perpendicular to x.

    The in-plane basis depends only on the sign-canonical form of x, so x and
    -x yield the same nodes.
    """
    a, b = circle_basis(x)
    phi = 2.0 * np.pi * np.arange(L) / L
    return np.cos(phi)[:, None] * a + np.sin(phi)[:, None] * b


def angle_between(a, b, antipodal=False) -> float:
    """Angle in degrees between two directions"""
    c = float(np.dot(unit_vector(a), unit_vector(b)))
    if antipodal:
        c = abs(c)
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def icosphere(level: int = 4) -> np.ndarray:
    """Vertices of the subdivided icosahedron (10*4**level + 2 unit vectors)"""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    vertices = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
                (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
                (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    points = [np.array(v, dtype=float) / np.linalg.norm(v) for v in vertices]

    for _ in range(level):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = points[i] + points[j]
                points.append(m / np.linalg.norm(m))
                cache[key] = len(points) - 1
            return cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = refined

    return np.array(points)


def hemisphere(points: np.ndarray) -> np.ndarray:
    """One representative of each antipodal pair (sign-canonical, deduplicated)"""
    canon = np.array([canonical_sign(p) for p in np.asarray(points, dtype=float)])
    _, keep = np.unique(np.round(canon, 9), axis=0, return_index=True)
    return canon[np.sort(keep)]
