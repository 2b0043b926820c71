"""
From a HARDI sample to a filled circle grid: normalization, spherical interpolation,
Funk-Radon transform, dominant direction and noise scale estimation
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from scipy import optimize
from scipy.spatial import ConvexHull, QhullError

from config import AnalysisSettings
from errors import DataError, DomainError
from geometry import (
    CircleGrid, Frame, build_grid, canonical_sign, circle_basis, great_circle, hemisphere, icosphere,
    unit_vector,
)
from phantom import HardiSample

logger = logging.getLogger(__name__)

MAD_SCALE = 1.4826
FINE_RADIUS_MIN = np.radians(5.0)
U2_SAMPLES = 720


class SphericalInterpolator:
    """Piecewise-linear interpolation over the spherical triangulation of a point set.

    The triangulation is the convex hull of the points. A query direction q lies
    in the facet whose supporting plane the ray through q meets first, and its
    value is the barycentric combination of the three vertex values. When the
    hull is degenerate (coplanar points, origin on the boundary) inverse
    geodesic distance weighting is used instead and `fallback` is set.
    """

    def __init__(self, points, values, chunk_elements: int = 4_000_000):
        self.points = np.asarray(points, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.chunk_elements = chunk_elements
        self.fallback = False

        try:
            hull = ConvexHull(self.points)
            offsets = -hull.equations[:, 3]
            if offsets.min() < 1e-9:
                raise QhullError("origin is not strictly inside the hull")
            vertices = self.points[hull.simplices]
            self._simplices = hull.simplices
            self._normals = hull.equations[:, :3] / offsets[:, None]
            self._inverses = np.linalg.inv(np.transpose(vertices, (0, 2, 1)))
        except (QhullError, ValueError, np.linalg.LinAlgError) as e:
            logger.warning(f"Degenerate triangulation ({e}); using inverse-distance weighting")
            self.fallback = True

    def __call__(self, queries) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        if self.fallback:
            return self._inverse_distance(q)

        out = np.empty(q.shape[0])
        rows = max(1, self.chunk_elements // len(self._normals))
        for start in range(0, q.shape[0], rows):
            block = q[start:start + rows]
            facet = np.argmax(block @ self._normals.T, axis=1)
            weights = np.einsum('mij,mj->mi', self._inverses[facet], block)
            weights = np.clip(weights, 0.0, None)
            weights /= weights.sum(axis=1, keepdims=True)
            out[start:start + rows] = np.sum(weights * self.values[self._simplices[facet]], axis=1)
        return out

    def _inverse_distance(self, q):
        angles = np.arccos(np.clip((q / np.linalg.norm(q, axis=1, keepdims=True)) @ self.points.T, -1.0, 1.0))
        exact = angles < 1e-12
        weights = 1.0 / np.maximum(angles, 1e-12) ** 2
        weights = np.where(exact.any(axis=1, keepdims=True), exact.astype(float), weights)
        return weights @ self.values / weights.sum(axis=1)


@dataclass(eq=False)
class NormalizedDiffusion:
    """Normalized measurements on the antipodally augmented direction set.

    The first n points are the scheme directions, the next n their antipodes.
    Noise scales are ordered as the residual-based bound <= sample estimate
    <= channel sigma; sigma_star is the sample estimate when b=0 repeats allow it.
    """

    points: np.ndarray
    values: np.ndarray
    sigma_star: float
    abar0: float
    sigma_source: str = 'b0'
    interpolator: SphericalInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        self.interpolator = SphericalInterpolator(self.points, self.values)

    @property
    def n(self) -> int:
        return self.points.shape[0] // 2

    @property
    def directions(self) -> np.ndarray:
        return self.points[:self.n]

    @property
    def fallback(self) -> bool:
        return self.interpolator.fallback

    def evaluate(self, points) -> np.ndarray:
        return self.interpolator(points)


@dataclass(eq=False)
class DominantEstimate:
    frame: Frame
    frt_values: np.ndarray
    candidates: np.ndarray
    candidate_count: int

    def __repr__(self):
        return f"<DominantEstimate(u1={np.round(self.frame.u1, 4)}, candidates={self.candidate_count})>"


def _sigma_star(sample: HardiSample, abar0: float) -> Tuple[float, str]:
    if sample.scheme.n0 >= 2:
        return float(np.std(sample.b0_values, ddof=1) / abar0), 'b0'
    if sample.noise_sigma is not None:
        return float(sample.noise_sigma / abar0), 'known'

    # nearest-neighbour differences of the normalized values
    d = sample.scheme.directions
    cos = np.abs(d @ d.T)
    np.fill_diagonal(cos, -1.0)
    neighbour = np.argmax(cos, axis=1)
    values = sample.raw_values / abar0
    diffs = values - values[neighbour]
    estimate = float(MAD_SCALE * np.median(np.abs(diffs)) / np.sqrt(2.0))
    logger.warning(f"Noise scale from neighbour residuals (fallback): {estimate:.4g}")
    return estimate, 'residual'


def estimate_sigma_star(sample: HardiSample) -> float:
    """Per-measurement noise scale of the normalized values"""
    abar0 = float(np.mean(sample.b0_values))
    if abar0 <= 0:
        raise DataError(f"Mean b=0 magnitude must be positive, got {abar0}")
    return _sigma_star(sample, abar0)[0]


def normalize(sample: HardiSample) -> NormalizedDiffusion:
    abar0 = float(np.mean(sample.b0_values))
    if not abar0 > 0:
        raise DataError(f"Mean b=0 magnitude must be positive, got {abar0}")

    values = sample.raw_values / abar0
    d = sample.scheme.directions
    sigma_star, source = _sigma_star(sample, abar0)
    return NormalizedDiffusion(points=np.vstack([d, -d]), values=np.concatenate([values, values]),
                               sigma_star=sigma_star, abar0=abar0, sigma_source=source)


def interpolate(nd: NormalizedDiffusion, q) -> float:
    return float(nd.evaluate(np.asarray(q, dtype=float))[0])


def frt_many(fn, directions, L: int = 64) -> np.ndarray:
    """Funk-Radon transform (circle mean) of fn at each direction"""
    if L < 16:
        raise DomainError(f"The circle quadrature needs L >= 16 nodes, got {L}")
    directions = np.atleast_2d(directions)
    nodes = np.concatenate([great_circle(x, L) for x in directions])
    return fn.evaluate(nodes).reshape(len(directions), L).mean(axis=1)


def frt(nd, x, L: int = 64) -> float:
    return float(frt_many(nd, [x], L)[0])


def gfa(values) -> float:
    """Generalized fractional anisotropy of nonnegative samples"""
    psi = np.asarray(values, dtype=float)
    n = psi.size
    total = psi.sum()
    if n < 2 or total <= 0:
        return float('nan')
    psi = psi / total
    ratio = n * np.sum((psi - 1.0 / n) ** 2) / ((n - 1) * np.sum(psi ** 2))
    return float(np.sqrt(np.clip(ratio, 0.0, 1.0)))


@lru_cache(maxsize=4)
def _refinement_set(level: int) -> np.ndarray:
    return hemisphere(icosphere(level))


def _typical_spacing(candidates: np.ndarray) -> float:
    cos = np.abs(candidates @ candidates.T)
    np.fill_diagonal(cos, -1.0)
    return float(np.median(np.arccos(np.clip(cos.max(axis=1), -1.0, 1.0))))


def _polish(fn, start, start_value, L, step):
    a, b = circle_basis(start)

    def direction(p):
        return unit_vector(start + p[0] * a + p[1] * b)

    def objective(p):
        return -frt(fn, direction(p), L)

    result = optimize.minimize(objective, np.zeros(2), method='Nelder-Mead',
                               options={'initial_simplex': [[0, 0], [step, 0], [0, step]],
                                        'xatol': 1e-10, 'fatol': 1e-14, 'maxiter': 400})
    if -result.fun > start_value:
        return direction(result.x), int(result.nfev)
    return start, int(result.nfev)


def minor_axis(fn, u1) -> np.ndarray:
    """Direction on the circle perpendicular to u1 where fn is largest"""
    a, b = circle_basis(u1)
    phi = 2.0 * np.pi * np.arange(U2_SAMPLES) / U2_SAMPLES
    values = fn.evaluate(np.cos(phi)[:, None] * a + np.sin(phi)[:, None] * b)
    best = phi[int(np.argmax(values))]
    half_step = 2.0 * np.pi / U2_SAMPLES

    result = optimize.minimize_scalar(
        lambda p: -fn.evaluate(np.cos(p) * a + np.sin(p) * b)[0],
        bounds=(best - half_step, best + half_step), method='bounded', options={'xatol': 1e-12})
    p = result.x if -result.fun >= values.max() else best
    return np.cos(p) * a + np.sin(p) * b


def dominant_direction(fn, candidates=None, L: int = 64, refinement_level: int = 4,
                       polish: bool = True) -> DominantEstimate:
    """Arg-max of the Funk-Radon transform and the minor axes around it.

    Candidates default to the sample directions of a NormalizedDiffusion; the
    coarse winner is refined on the icosphere neighbourhood and polished on
    the tangent plane.
    """
    if candidates is None:
        candidates = fn.directions
    coarse = hemisphere(candidates)
    coarse_values = frt_many(fn, coarse, L)
    best = coarse[int(np.argmax(coarse_values))]
    best_value = float(coarse_values.max())

    spacing = _typical_spacing(coarse) if len(coarse) > 1 else np.pi
    radius = max(2.0 * spacing, FINE_RADIUS_MIN)
    fine = _refinement_set(refinement_level)
    dots = fine @ best
    fine = fine[np.abs(dots) >= np.cos(radius)]
    fine = fine * np.sign(fine @ best)[:, None]
    count = len(coarse) + len(fine)

    if len(fine):
        fine_values = frt_many(fn, fine, L)
        if fine_values.max() > best_value:
            best = fine[int(np.argmax(fine_values))]
            best_value = float(fine_values.max())

    if polish:
        best, evaluations = _polish(fn, best, best_value, L, step=0.5 * _typical_spacing(fine)
                                    if len(fine) > 1 else 0.02)
        count += evaluations

    u1 = canonical_sign(unit_vector(best))
    u2 = minor_axis(fn, u1)
    frame = Frame(u1, u2, np.cross(u1, u2))
    logger.debug(f"Dominant direction {np.round(u1, 4)} from {count} candidates")
    return DominantEstimate(frame=frame, frt_values=coarse_values, candidates=coarse, candidate_count=count)


def fill_grid(fn, est: DominantEstimate, N: int = 128) -> CircleGrid:
    """Evaluate fn on the dominant and perpendicular circles of est.frame"""
    grid = build_grid(est.frame, N)
    dominant = fn.evaluate(grid.dominant_points)
    perp = fn.evaluate(grid.perp_points.reshape(-1, 3)).reshape(N, N)
    return grid.with_values(dominant, perp, est.frt_values)


def estimate_sigma_circle(grid: CircleGrid, rho: float = 3.0, mad: str = 'maximum') -> Tuple[float, float]:
    """Mean of the dominant circle values and the scaled absolute deviation around it"""
    if grid.dominant_values is None or len(grid.dominant_values) == 0:
        raise DataError("Grid has no dominant circle values")
    values = grid.dominant_values
    abar_n = float(values.mean())
    deviations = np.abs(values - abar_n)
    if mad == 'median':
        spread = MAD_SCALE * float(np.median(deviations))
    else:
        spread = float(deviations.max())
    return abar_n, float(np.sqrt(rho) * spread)


def process_sample(sample: HardiSample, settings: Optional[AnalysisSettings] = None):
    """normalize -> dominant_direction -> fill_grid"""
    settings = settings or AnalysisSettings()
    nd = normalize(sample)
    est = dominant_direction(nd, L=settings.L)
    grid = fill_grid(nd, est, settings.N)
    return nd, est, grid
