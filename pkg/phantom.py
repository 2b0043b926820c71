"""
Noiseless q-space diffusion models, fiber evolution sequences and the Rician acquisition simulator
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Tuple, Union

import numpy as np
from scipy import optimize, special

from errors import ConfigurationError, DataError, DomainError
from geometry import Frame, canonical_sign, check_rotation, hemisphere, icosphere

logger = logging.getLogger(__name__)

T_SCALE = 0.04
DEFAULT_B_VALUE = 1600.0
KERNELS = ("exponential", "gaussian")
MODEL_NAMES = ("A1", "A2", "A3", "A4", "A5", "A6")

FORKING_TIMES = tuple(np.linspace(0.0, 1.0, 7))
# weight of the first population; the second half mirrors the first by swapping populations
CROSSING_WEIGHTS = (1.0, 1.0, 0.75, 0.5, 0.25, 0.0)

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


class DiffusionModel(Protocol):
    def evaluate(self, points) -> np.ndarray:
        ...


def _as_points(points) -> np.ndarray:
    return np.atleast_2d(np.asarray(points, dtype=float))


@dataclass(frozen=True, eq=False)
class EllipsoidModel:
    """Ellipsoid q-space density exp(-t q^T D q) (or the Gaussian kernel of the same form)"""

    lambdas: Tuple[float, float, float]
    frame: Frame
    kernel: str = "exponential"
    t: float = T_SCALE

    def __post_init__(self):
        lambdas = tuple(float(v) for v in self.lambdas)
        if len(lambdas) != 3 or min(lambdas) < 0:
            raise DomainError(f"Eigenvalues must be three nonnegative numbers, got {self.lambdas}")
        if self.kernel not in KERNELS:
            raise DomainError(f"Unknown kernel '{self.kernel}'")
        object.__setattr__(self, "lambdas", lambdas)

    def quadratic_form(self, points) -> np.ndarray:
        proj = _as_points(points) @ self.frame.matrix
        return proj ** 2 @ np.asarray(self.lambdas)

    def evaluate(self, points) -> np.ndarray:
        s2 = self.quadratic_form(points)
        if self.kernel == "gaussian":
            return np.exp(-2.0 * np.pi ** 2 * s2)
        return np.exp(-self.t * s2)

    def rotated(self, rotation) -> "EllipsoidModel":
        r = check_rotation(rotation)
        frame = Frame(r @ self.frame.u1, r @ self.frame.u2, r @ self.frame.u3)
        return EllipsoidModel(self.lambdas, frame, self.kernel, self.t)

    def __repr__(self):
        return f"<EllipsoidModel(lambdas={self.lambdas}, kernel='{self.kernel}')>"


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """Weighted sum of ellipsoid densities"""

    components: Tuple[Tuple[float, EllipsoidModel], ...]

    def __post_init__(self):
        components = tuple((float(w), m) for w, m in self.components)
        weights = np.array([w for w, _ in components])
        if len(components) == 0 or np.any(weights < 0) or np.any(weights > 1):
            raise DomainError("Mixture weights must lie in [0, 1]")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise DomainError(f"Mixture weights sum to {weights.sum()}, expected 1")
        object.__setattr__(self, "components", components)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.components])

    def evaluate(self, points) -> np.ndarray:
        pts = _as_points(points)
        return sum(w * m.evaluate(pts) for w, m in self.components)

    def rotated(self, rotation) -> "MixtureModel":
        return MixtureModel(tuple((w, m.rotated(rotation)) for w, m in self.components))

    def __repr__(self):
        return f"<MixtureModel(weights={tuple(round(w, 4) for w, _ in self.components)})>"


@dataclass(frozen=True, eq=False)
class AsymmetricModel:
    """Closed-form asymmetric density built from Dawson functions"""

    frame: Frame
    t: float = T_SCALE
    tag: str = "A5"

    def evaluate(self, points) -> np.ndarray:
        proj = _as_points(points) @ self.frame.matrix
        c1, c2, c3 = proj[:, 0], proj[:, 1], proj[:, 2]
        t = self.t
        gauss = np.exp(-68 * t * c1 ** 2) * (np.exp(-0.2 * t * c3 ** 2) + np.exp(-35 * t * c3 ** 2))
        odd = (4.0 / np.pi) * dawson(np.sqrt(68 * t) * c1) * (
            dawson(np.sqrt(35 * t) * c3) - dawson(np.sqrt(0.2 * t) * c3))
        return np.exp(-11 * t * c2 ** 2) * np.abs(gauss + odd)

    def rotated(self, rotation) -> "AsymmetricModel":
        r = check_rotation(rotation)
        frame = Frame(r @ self.frame.u1, r @ self.frame.u2, r @ self.frame.u3)
        return AsymmetricModel(frame, self.t, self.tag)

    def __repr__(self):
        return f"<AsymmetricModel(tag='{self.tag}', t={self.t})>"


def dawson(x):
    """Dawson integral D(x) = exp(-x^2) * int_0^x exp(s^2) ds"""
    return special.dawsn(x)


def eval_model(model: DiffusionModel, q) -> float:
    """Exact model value at a single direction"""
    q = np.asarray(q, dtype=float)
    if q.shape != (3,) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
        raise DomainError(f"Not a unit direction: {q}")
    return float(model.evaluate(q)[0])


def origin_value(model: DiffusionModel) -> float:
    return float(model.evaluate(np.zeros(3))[0])


def breve_frame() -> Frame:
    """Axes of the second population of A6: canonical axes turned 30 degrees about e3"""
    c, s = np.cos(np.pi / 6), np.sin(np.pi / 6)
    return Frame.from_matrix([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def benchmark_model(name: str, rotation=None, t: float = T_SCALE) -> DiffusionModel:
    """Build one of the six simulation models A1..A6.

    rotation turns the axes of A1..A5; A6 keeps its fixed axes.
    """
    r = np.eye(3) if rotation is None else check_rotation(rotation)
    frame = Frame.from_matrix(r)
    name = name.upper()

    if name == "A1":
        return EllipsoidModel((68, 8, 8), frame, t=t)
    if name == "A2":
        return EllipsoidModel((68, 15, 1), frame, t=t)
    if name == "A3":
        return EllipsoidModel((28, 28, 28), frame, t=t)
    if name == "A4":
        return MixtureModel(((0.5, EllipsoidModel((68, 8, 8), frame, t=t)),
                             (0.5, EllipsoidModel((8, 68, 8), frame, t=t))))
    if name == "A5":
        return AsymmetricModel(frame, t=t)
    if name == "A6":
        return MixtureModel(((0.3, EllipsoidModel((68, 8, 8), Frame.canonical(), t=t)),
                             (0.7, EllipsoidModel((42.5, 14, 20), breve_frame(), t=t))))
    raise ConfigurationError(f"Unknown model '{name}', expected one of {', '.join(MODEL_NAMES)}")


def fiber_evolution(kind: str, t: float, lambdas=(68.0, 8.0, 8.0), t_scale: float = T_SCALE) -> MixtureModel:
    """Two-population model for one voxel of a fiber evolution sequence.

    forking: t in [0, 1], first weight 1 - t/2, second direction turning to 90 degrees.
    crossing: t is the weight of the population along e1, the other lies along e2.
    """
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"Evolution parameter must lie in [0, 1], got {t}")

    if kind == "forking":
        a1 = 1.0 - t / 2.0
        angle = np.pi * t / 2.0
    elif kind == "crossing":
        a1 = float(t)
        angle = np.pi / 2.0
    else:
        raise ConfigurationError(f"Unknown evolution kind '{kind}'")

    c, s = np.cos(angle), np.sin(angle)
    first = EllipsoidModel(lambdas, Frame.canonical(), t=t_scale)
    second = EllipsoidModel(lambdas, Frame.from_matrix([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]),
                            t=t_scale)
    components = tuple((w, m) for w, m in ((a1, first), (1.0 - a1, second)) if w > 0.0)
    return MixtureModel(components)


def evolution_sequence(kind: str, lambdas=(68.0, 8.0, 8.0)):
    """Voxel labels and models of the forking or crossing sequence"""
    if kind == "forking":
        params, prefix = FORKING_TIMES, "i"
    elif kind == "crossing":
        params, prefix = CROSSING_WEIGHTS, "iii"
    else:
        raise ConfigurationError(f"Unknown evolution kind '{kind}'")
    return [(f"({prefix},{chr(ord('a') + i)})", fiber_evolution(kind, p, lambdas))
            for i, p in enumerate(params)]


@dataclass(frozen=True, eq=False)
class AcquisitionScheme:
    directions: np.ndarray
    n0: int = 1
    b_value: float = DEFAULT_B_VALUE

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=float))
        if d.ndim != 2 or d.shape[1] != 3:
            raise DataError(f"Directions must have shape (n, 3), got {d.shape}")
        if d.shape[0] < 6:
            raise ConfigurationError(f"A scheme needs at least 6 directions, got {d.shape[0]}")
        if np.max(np.abs(np.linalg.norm(d, axis=1) - 1.0)) > 1e-9:
            raise DataError("Scheme directions must have unit norm")
        if int(self.n0) < 1:
            raise ConfigurationError(f"A scheme needs at least one b=0 acquisition, got n0={self.n0}")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "n0", int(self.n0))

    @property
    def n(self) -> int:
        return self.directions.shape[0]

    def __repr__(self):
        return f"<AcquisitionScheme(n={self.n}, n0={self.n0}, b={self.b_value:g})>"


@dataclass(frozen=True, eq=False)
class HardiSample:
    """Magnitudes at the scheme directions plus repeated b=0 magnitudes.

    noise_sigma is the standard deviation of each complex channel in signal
    units (None for ingested data).
    """

    raw_values: np.ndarray
    b0_values: np.ndarray
    scheme: AcquisitionScheme
    noise_sigma: Optional[float] = None

    def __post_init__(self):
        raw = np.asarray(self.raw_values, dtype=float)
        b0 = np.atleast_1d(np.asarray(self.b0_values, dtype=float))
        if raw.shape != (self.scheme.n,):
            raise DataError(f"Expected {self.scheme.n} measurements, got {raw.shape}")
        if b0.shape != (self.scheme.n0,):
            raise DataError(f"Expected {self.scheme.n0} b=0 measurements, got {b0.shape}")
        if np.any(raw < 0) or np.any(b0 < 0):
            raise DataError("Magnitudes must be nonnegative")
        object.__setattr__(self, "raw_values", raw)
        object.__setattr__(self, "b0_values", b0)


def rician(values, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Magnitude of values plus independent Gaussian noise on both channels"""
    values = np.asarray(values, dtype=float)
    real = values + sigma * rng.standard_normal(values.shape)
    imag = sigma * rng.standard_normal(values.shape)
    return np.hypot(real, imag)


def acquire(model: DiffusionModel, scheme: AcquisitionScheme, noise_sigma: float, seed: SeedLike) -> HardiSample:
    """Simulate a noisy acquisition; noise_sigma is in units of the model's value at q = 0"""
    if noise_sigma < 0:
        raise DomainError(f"Noise level must be nonnegative, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    a0 = origin_value(model)
    sigma = noise_sigma * a0

    signal = model.evaluate(scheme.directions)
    raw = rician(signal, sigma, rng)
    b0 = rician(np.full(scheme.n0, a0), sigma, rng)
    return HardiSample(raw, b0, scheme, sigma)


def _repulsion_energy(flat, n):
    v = flat.reshape(n, 3)
    r = np.linalg.norm(v, axis=1)
    x = v / r[:, None]

    diff = x[:, None, :] - x[None, :, :]
    summ = x[:, None, :] + x[None, :, :]
    dn = np.linalg.norm(diff, axis=2)
    sn = np.linalg.norm(summ, axis=2)
    np.fill_diagonal(dn, np.inf)
    np.fill_diagonal(sn, np.inf)

    energy = 0.5 * (np.sum(1.0 / dn) + np.sum(1.0 / sn))
    g = -np.sum(diff / dn[..., None] ** 3, axis=1) - np.sum(summ / sn[..., None] ** 3, axis=1)
    grad = (g - np.sum(g * x, axis=1, keepdims=True) * x) / r[:, None]
    return energy, grad.ravel()


def electrostatic_scheme(n: int, n0: int = 1, b_value: float = DEFAULT_B_VALUE) -> AcquisitionScheme:
    """n directions minimizing the electrostatic energy of the antipodal point pairs"""
    if n < 6:
        raise ConfigurationError(f"Electrostatic scheme needs n >= 6, got {n}")
    rng = np.random.default_rng(n)
    start = rng.standard_normal((n, 3))
    start /= np.linalg.norm(start, axis=1, keepdims=True)

    result = optimize.minimize(_repulsion_energy, start.ravel(), args=(n,), jac=True,
                               method="L-BFGS-B", options={"maxiter": 5000, "gtol": 1e-9})
    if not result.success:
        logger.warning(f"Repulsion for n={n} stopped early: {result.message}")

    v = result.x.reshape(n, 3)
    directions = np.array([canonical_sign(p) for p in v / np.linalg.norm(v, axis=1, keepdims=True)])
    logger.info(f"Electrostatic scheme with {n} directions, energy {result.fun:.4f}")
    return AcquisitionScheme(directions, n0=n0, b_value=b_value)


def icosphere_scheme(level: int = 3, n0: int = 1, b_value: float = DEFAULT_B_VALUE) -> AcquisitionScheme:
    """Dense scheme taking one direction from each antipodal pair of an icosphere"""
    return AcquisitionScheme(hemisphere(icosphere(level)), n0=n0, b_value=b_value)


def min_antipodal_angle(directions) -> float:
    """Smallest angle in degrees between distinct antipodal pairs"""
    d = np.asarray(directions, dtype=float)
    cos = np.abs(d @ d.T)
    np.fill_diagonal(cos, -1.0)
    return float(np.degrees(np.arccos(np.clip(cos.max(), -1.0, 1.0))))


def save_scheme(scheme: AcquisitionScheme, path) -> Path:
    path = Path(path)
    lines = [f"n0={scheme.n0} b={scheme.b_value:g}"]
    lines += [f"{x:.12f} {y:.12f} {z:.12f}" for x, y, z in scheme.directions]
    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Scheme with {scheme.n} directions written to {path}")
    return path


def load_scheme(path) -> AcquisitionScheme:
    """Read a scheme file: optional 'n0=<int> b=<float>' header, then one 'x y z' per line"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Scheme file not found: {path}")

    n0, b_value, rows = 1, DEFAULT_B_VALUE, []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            try:
                fields = dict(item.split("=", 1) for item in line.split())
                n0 = int(fields.get("n0", n0))
                b_value = float(fields.get("b", b_value))
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: malformed header '{line}'") from e
            continue
        try:
            values = [float(v) for v in line.split()]
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: malformed direction '{line}'") from e
        if len(values) != 3:
            raise DataError(f"{path}:{lineno}: expected three fields, got {len(values)}")
        rows.append(values)

    d = np.array(rows, dtype=float)
    norms = np.linalg.norm(d, axis=1) if len(rows) else np.array([])
    if len(rows) and np.max(np.abs(norms - 1.0)) > 1e-6:
        raise DataError(f"{path}: directions are not unit vectors")
    return AcquisitionScheme(d / norms[:, None] if len(rows) else d.reshape(0, 3), n0=n0, b_value=b_value)
