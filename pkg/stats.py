"""
Summary statistics, the five structure tests, Monte Carlo null calibration and voxel classification
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional

import numpy as np
from scipy.stats import norm

from config import APP_VERSION, DEFAULT_LEVELS, U_CRITICAL, AnalysisSettings
from errors import ConfigurationError, DataError, DomainError
from estimator import estimate_sigma_circle, gfa, process_sample
from geometry import CircleGrid, random_rotation
from parallel import run_tasks
from phantom import AcquisitionScheme, acquire, benchmark_model

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
REJECT = 'reject'
FAIL = 'fail'

STATISTICS = ('U', 'U_tilde', 'Q', 'V', 'K')
HYPOTHESIS_TAGS = {'U': 'N-P/A', 'U_tilde': 'M/U', 'Q': 'I/M', 'V': 'C/E', 'K': 'S/A'}
HYPOTHESIS_NAMES = {
    'N-P/A': 'non-preference vs anisotropy',
    'M/U': 'multi-modal vs unimodal',
    'I/M': 'isotropic vs multi-modal',
    'C/E': 'circular vs ellipsoidal',
    'S/A': 'symmetric vs asymmetric',
}
NULL_MODELS = {'U': 'A3', 'Q': 'A3', 'U_tilde': 'A1', 'V': 'A1', 'K': 'A1'}
TAILS = {'U': 'upper', 'U_tilde': 'upper', 'Q': 'lower', 'V': 'upper', 'K': 'two-sided'}

LABELS = ('isotropic', 'unimodal-prolate', 'unimodal-scalene', 'unimodal-asymmetric',
          'multimodal', 'undetermined')

CALIBRATION_FORMAT = 'qstructure-calibration v2'
STREAM_ROTATION = 0
STREAM_CALIBRATION = 2


def _log(values):
    """Natural log, or None when a value is too small to be trusted"""
    values = np.asarray(values, dtype=float)
    if np.any(~np.isfinite(values)) or np.any(values < LOG_FLOOR):
        return None
    return np.log(values)


def _log_ratio(num, den):
    logs_num, logs_den = _log(num), _log(den)
    if logs_num is None or logs_den is None or np.any(np.abs(logs_den) < LOG_FLOOR):
        return None
    return logs_num / logs_den


def _require_filled(grid: CircleGrid):
    if not grid.is_filled:
        raise DataError("Grid values have not been filled")


def _dominant_ratio(grid: CircleGrid) -> float:
    d = grid.dominant_values
    if d.min() <= 0:
        return float('nan')
    return float(d.max() / d.min())


@dataclass
class SummarySet:
    tau: float
    tau_tilde: float
    xi: float
    zeta: float
    kappa: float
    gfa: float
    defined: bool = True

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def anisotropy_ratio(grid: CircleGrid) -> float:
    """Extremes of the averaged perpendicular values over extremes of the dominant circle, minus 1"""
    avg = grid.avg_perp()
    if avg.min() <= 0:
        return float('nan')
    return float((avg.max() / avg.min()) / _dominant_ratio(grid) - 1.0)


def modality_ratio(grid: CircleGrid) -> float:
    """Per-circle max/min ratio minimized over the perpendicular circles, relative to the dominant circle"""
    p = grid.perp_values
    if p.min() <= 0:
        return float('nan')
    per_circle = p.max(axis=0) / p.min(axis=0)
    return float(per_circle.min() / _dominant_ratio(grid) - 1.0)


def asymmetry_profile(grid: CircleGrid) -> np.ndarray:
    """P_k: quarter-circle differences of each perpendicular circle over its total.

    The quarter from the pole to q_k is compared with the quarter from q_k on
    to the antipodal pole, so every P_k vanishes when the values are mirror
    symmetric across the dominant circle.
    """
    N = grid.N
    p = grid.perp_values
    j = np.arange(1, N // 4)
    numerator = (p[j, :] - p[j + N // 4, :]).sum(axis=0)
    denominator = p.sum(axis=0)
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(denominator > 0, 8.0 * numerator / denominator, np.nan)


def window_mean(profile: np.ndarray, centre: int, N: int) -> float:
    idx = (centre + np.arange(-N // 8, N // 8 + 1)) % N
    return float(profile[idx].mean())


def asymmetry_value(profile: np.ndarray) -> float:
    """Mean of the profile over the quarter circle centred on its maximum"""
    if np.any(np.isnan(profile)):
        return float('nan')
    return window_mean(profile, int(np.argmax(profile)), profile.size)


def summaries(grid: CircleGrid) -> SummarySet:
    _require_filled(grid)
    N = grid.N
    avg = grid.avg_perp()
    d = grid.dominant_values

    tau = anisotropy_ratio(grid)
    tau_tilde = modality_ratio(grid)
    xi_ratio = _log_ratio(avg[grid.equator_index], avg[grid.pole_index])
    zeta_ratios = _log_ratio(d, np.roll(d, -N // 4))
    kappa_value = asymmetry_value(asymmetry_profile(grid))

    defined = xi_ratio is not None and zeta_ratios is not None and np.isfinite(tau)
    if not defined:
        logger.warning("Low-SNR grid: logarithmic summaries undefined")
    return SummarySet(
        tau=tau,
        tau_tilde=tau_tilde,
        xi=float(xi_ratio) if xi_ratio is not None else float('nan'),
        zeta=float(zeta_ratios.max()) if zeta_ratios is not None else float('nan'),
        kappa=kappa_value,
        gfa=gfa(grid.frt_values) if grid.frt_values is not None else float('nan'),
        defined=defined,
    )


def _scaled(statistic: float, scale: float) -> float:
    """statistic / scale with the zero-scale convention: 0 for a zero statistic, signed infinity otherwise"""
    if not np.isfinite(statistic):
        return float('nan')
    if scale > 0:
        return statistic / scale
    if abs(statistic) < LOG_FLOOR:
        return 0.0
    return float(np.copysign(np.inf, statistic))


def _decide(rejected) -> Optional[str]:
    if rejected is None:
        return None
    return REJECT if rejected else FAIL


class UResult(NamedTuple):
    T: float
    U: float
    decision: Optional[str]
    flagged: bool


class UTildeResult(NamedTuple):
    T_tilde: float
    U_tilde: float
    decision: Optional[str]
    a_min: float


class QResult(NamedTuple):
    X: float
    Q: float
    decision: Optional[str]
    X_k: np.ndarray


class VResult(NamedTuple):
    k_max: int
    Z: float
    V: float
    decision: Optional[str]


class KResult(NamedTuple):
    P_k: np.ndarray
    k_breve_max: int
    K: float
    decision: Optional[str]
    score: float


def test_U(grid: CircleGrid, abar_N: float, sigma_A: float, threshold: float = U_CRITICAL) -> UResult:
    """Non-preference against anisotropy"""
    _require_filled(grid)
    T = anisotropy_ratio(grid)
    U = _scaled(T * abar_N, sigma_A)
    flagged = sigma_A <= 0
    if flagged:
        logger.debug("Dominant circle is constant; U decided by T alone")
    decision = _decide(None if np.isnan(U) else U > threshold)
    return UResult(T, U, decision, flagged)


test_U.__test__ = False


def u_tilde_statistic(t_tilde: float, a_min: float, sigma_A: float, c: float = 2.0) -> float:
    """(T_tilde - (c - 1)) a_min / (sigma_A sqrt(2c^2 + 2)), unit scale on the c boundary"""
    return _scaled((t_tilde - (c - 1.0)) * a_min, sigma_A * np.sqrt(2.0 * c ** 2 + 2.0))


def u_tilde_threshold(level: float = DEFAULT_LEVELS['U_tilde'], calibration=None) -> float:
    """Upper critical value of U_tilde: the standard Gaussian quantile unless a calibration is given"""
    if calibration is None:
        return float(norm.ppf(1.0 - level))
    return calibration.threshold(1.0 - level)


def test_U_tilde(grid: CircleGrid, sigma_A: float, c: float = 2.0, calibration=None,
                 level: float = DEFAULT_LEVELS['U_tilde']) -> UTildeResult:
    """Multi-modality against unimodality; rejection favours a unimodal voxel.

    Without a calibration the critical value is the standard Gaussian
    quantile at 1 - level.
    """
    _require_filled(grid)
    t_tilde = modality_ratio(grid)
    a_min = float(grid.perp_values[grid.pole_index, 0])
    u_tilde = u_tilde_statistic(t_tilde, a_min, sigma_A, c)
    rejected = None
    if not np.isnan(u_tilde):
        rejected = u_tilde > u_tilde_threshold(level, calibration)
    return UTildeResult(t_tilde, u_tilde, _decide(rejected), a_min)


test_U_tilde.__test__ = False


def adc(value: float, b: float) -> float:
    """Apparent diffusion coefficient -log(value)/b"""
    if value <= 0 or b <= 0:
        raise DomainError(f"ADC needs a positive value and b, got value={value}, b={b}")
    return float(-np.log(value) / b)


def _spread_term(grid: CircleGrid) -> float:
    abar = float(grid.dominant_values.mean())
    if abar <= 0:
        return float('nan')
    return abs(abar * np.log(abar))


def test_Q(grid: CircleGrid, sigma2: float, rho: float = 3.0, calibration=None,
           level: float = DEFAULT_LEVELS['Q']) -> QResult:
    """Isotropy against multi-modality (lower tail: multi-modal voxels pull X below 1)"""
    _require_filled(grid)
    avg = grid.avg_perp()
    x = _log_ratio(avg[grid.equator_index], avg[grid.pole_index])
    x_k = _log_ratio(grid.dominant_values, grid.perp_values[grid.pole_index, :])
    x_k = x_k if x_k is not None else np.full(grid.N, np.nan)
    if x is None:
        return QResult(float('nan'), float('nan'), None, x_k)

    x = float(x)
    q = _scaled(rho * (x - 1.0) * _spread_term(grid), sigma2)
    rejected = None
    if calibration is not None and not np.isnan(q):
        rejected = q < calibration.threshold(level)
    return QResult(x, q, _decide(rejected), x_k)


test_Q.__test__ = False


def test_V(grid: CircleGrid, sigma2: float, m: int = 9, m_prime: int = 16, calibration=None,
           level: float = DEFAULT_LEVELS['V']) -> VResult:
    """Circular against ellipsoidal dominant circle"""
    _require_filled(grid)
    N = grid.N
    if not m < m_prime < 2 * m or N % (2 * m_prime) != 0:
        raise ConfigurationError(f"Need m < m' < 2m and N/(2m') integral, got m={m}, m'={m_prime}, N={N}")
    d = grid.dominant_values
    ratios = _log_ratio(d, np.roll(d, -N // 4))
    if ratios is None:
        return VResult(-1, float('nan'), float('nan'), None)

    k_max = 1 + int(np.argmax(ratios[1:N // 4 + 1]))
    shifted = k_max + N // (2 * m_prime)
    z = float(ratios[shifted % N])
    v = _scaled((z - 1.0) * _spread_term(grid), sigma2)
    rejected = None
    if calibration is not None and not np.isnan(v):
        rejected = v > calibration.threshold(1.0 - level)
    return VResult(k_max, z, v, _decide(rejected))


test_V.__test__ = False


def test_K(grid: CircleGrid, calibration=None, level: float = DEFAULT_LEVELS['K']) -> KResult:
    """Symmetric against asymmetric, two-sided on the null-standardized K"""
    _require_filled(grid)
    N = grid.N
    profile = asymmetry_profile(grid)
    if np.any(np.isnan(profile)):
        return KResult(profile, -1, float('nan'), None, float('nan'))

    k_breve = int(np.argmax(profile))
    k_value = window_mean(profile, k_breve, N)
    score, rejected = float('nan'), None
    if calibration is not None:
        score = _scaled(k_value - calibration.mean, calibration.std)
        rejected = abs(score) > norm.ppf(1.0 - level / 2.0)
    return KResult(profile, k_breve, k_value, _decide(rejected), score)


test_K.__test__ = False


@dataclass(eq=False)
class NullCalibration:
    """Empirical null distribution of one statistic as a quantile table"""

    statistic: str
    null_model: str
    null_spec: str
    noise_sigma: float
    reps: int
    seed: int
    levels: np.ndarray
    thresholds: np.ndarray
    mean: float
    std: float
    tail: str = 'upper'

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=float)
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        if self.levels.shape != self.thresholds.shape or self.levels.size == 0:
            raise DataError(f"Calibration table for {self.statistic} is empty or ragged")
        if np.any(np.diff(self.levels) <= 0) or np.any(np.diff(self.thresholds) < 0):
            raise DataError(f"Calibration table for {self.statistic} is not monotone")

    def threshold(self, level: float) -> float:
        if not self.levels[0] - 1e-12 <= level <= self.levels[-1] + 1e-12:
            raise ConfigurationError(
                f"Level {level} outside the calibrated range [{self.levels[0]}, {self.levels[-1]}] "
                f"for {self.statistic}; calibrate with more replicates")
        return float(np.interp(level, self.levels, self.thresholds))

    def p_value(self, value: float) -> float:
        if np.isnan(value):
            return float('nan')
        if self.tail == 'two-sided':
            score = _scaled(value - self.mean, self.std)
            return float(2.0 * norm.sf(abs(score)))
        cdf = float(np.interp(value, self.thresholds, self.levels))
        if value < self.thresholds[0]:
            cdf = 0.0
        elif value > self.thresholds[-1]:
            cdf = 1.0
        p = 1.0 - cdf if self.tail == 'upper' else cdf
        return float(np.clip(p, 0.0, 1.0))

    def to_text(self) -> str:
        lines = [f"# {CALIBRATION_FORMAT}",
                 f"# null_model={self.null_model} noise_sigma={self.noise_sigma!r} tail={self.tail}",
                 f"# mean={self.mean!r} std={self.std!r}",
                 "statistic,null_spec,level,threshold,reps,seed"]
        lines += [f"{self.statistic},{self.null_spec},{lv!r},{th!r},{self.reps},{self.seed}"
                  for lv, th in zip(self.levels.tolist(), self.thresholds.tolist())]
        return "\n".join(lines) + "\n"

    def __repr__(self):
        return (f"<NullCalibration(statistic='{self.statistic}', null_model='{self.null_model}', "
                f"noise={self.noise_sigma:g}, reps={self.reps})>")


def write_calibrations(calibrations: Iterable[NullCalibration], path) -> Path:
    path = Path(path)
    path.write_text("".join(c.to_text() for c in calibrations))
    return path


def read_calibrations(path) -> List[NullCalibration]:
    """Parse one or more calibration blocks written by write_calibrations"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Calibration file not found: {path}")

    blocks, current = [], None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if line.startswith('# qstructure-calibration'):
            if line[2:].strip() != CALIBRATION_FORMAT:
                raise DataError(f"{path}:{lineno}: unsupported calibration format '{line[2:]}'")
            current = {'meta': {}, 'rows': []}
            blocks.append(current)
        elif current is None:
            raise DataError(f"{path}:{lineno}: missing calibration header")
        elif line.startswith('#'):
            current['meta'].update(item.split('=', 1) for item in line[1:].split())
        elif line.startswith('statistic,') or not line.strip():
            continue
        else:
            current['rows'].append(line.split(','))

    calibrations = []
    for block in blocks:
        rows, meta = block['rows'], block['meta']
        if not rows:
            raise DataError(f"{path}: calibration block without rows")
        calibrations.append(NullCalibration(
            statistic=rows[0][0], null_model=meta['null_model'], null_spec=rows[0][1],
            noise_sigma=float(meta['noise_sigma']), reps=int(rows[0][4]), seed=int(rows[0][5]),
            levels=[float(r[2]) for r in rows], thresholds=[float(r[3]) for r in rows],
            mean=float(meta['mean']), std=float(meta['std']), tail=meta.get('tail', 'upper'),
        ))
    return calibrations


@dataclass(eq=False)
class NullSpec:
    """Experiment conditions a calibration is valid for"""

    null_model: str
    noise_sigma: float
    scheme: AcquisitionScheme
    settings: AnalysisSettings = field(default_factory=AnalysisSettings)

    @classmethod
    def for_statistic(cls, statistic: str, noise_sigma: float, scheme: AcquisitionScheme,
                      settings: Optional[AnalysisSettings] = None) -> 'NullSpec':
        if statistic not in NULL_MODELS:
            raise ConfigurationError(f"Unknown statistic '{statistic}'")
        return cls(NULL_MODELS[statistic], float(noise_sigma), scheme, settings or AnalysisSettings())

    def scheme_digest(self) -> str:
        h = hashlib.sha256(np.round(self.scheme.directions, 9).tobytes())
        h.update(f"n0={self.scheme.n0}".encode())
        return h.hexdigest()

    def digest(self, statistic: str) -> str:
        payload = {'statistic': statistic, 'null_model': self.null_model,
                   'noise_sigma': round(self.noise_sigma, 12), 'scheme': self.scheme_digest(),
                   'settings': self.settings.fingerprint(), 'format': CALIBRATION_FORMAT}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class TestReport:
    T: float
    U: float
    T_tilde: float
    U_tilde: float
    X: float
    Q: float
    Z: float
    V: float
    K: float
    X_k: np.ndarray = field(repr=False)
    P_k: np.ndarray = field(repr=False)
    k_max: int = -1
    k_breve_max: int = -1
    K_score: float = float('nan')
    a_min: float = float('nan')
    sigma_A: float = float('nan')
    sigma2: float = float('nan')
    thresholds: Dict[str, float] = field(default_factory=dict)
    p_values: Dict[str, float] = field(default_factory=dict)
    decisions: Dict[str, Optional[str]] = field(default_factory=dict)
    classification: str = 'undetermined'

    __test__ = False

    def rejected(self, statistic: str) -> bool:
        return self.decisions.get(HYPOTHESIS_TAGS[statistic]) == REJECT

    def statistic(self, name: str) -> float:
        return float(getattr(self, name))


def classify_voxel(report) -> str:
    """Decision tree over the hypothesis decisions of a TestReport (or a tag -> decision mapping)"""
    decisions = report.decisions if isinstance(report, TestReport) else report

    def need(statistic):
        tag = HYPOTHESIS_TAGS[statistic]
        if tag not in decisions:
            raise DataError(f"Decision for '{HYPOTHESIS_NAMES[tag]}' ({tag}) is missing")
        return decisions[tag]

    anisotropy = need('U')
    if anisotropy is None:
        return 'undetermined'
    if anisotropy == FAIL:
        multimodal = need('Q')
        if multimodal is None:
            return 'undetermined'
        return 'multimodal' if multimodal == REJECT else 'isotropic'

    unimodal = need('U_tilde')
    if unimodal is None:
        return 'undetermined'
    if unimodal == FAIL:
        return 'multimodal'

    scalene, asymmetric = need('V'), need('K')
    if scalene is None or asymmetric is None:
        return 'undetermined'
    if scalene == REJECT and asymmetric == REJECT:
        return 'undetermined'
    if scalene == REJECT:
        return 'unimodal-scalene'
    if asymmetric == REJECT:
        return 'unimodal-asymmetric'
    return 'unimodal-prolate'


def run_tests(nd, grid: CircleGrid, settings: Optional[AnalysisSettings] = None,
              calibrations: Optional[Mapping[str, NullCalibration]] = None,
              levels: Optional[Mapping[str, float]] = None) -> TestReport:
    """All five tests on a filled grid plus the voxel classification"""
    settings = settings or AnalysisSettings()
    calibrations = calibrations or {}
    levels = {**DEFAULT_LEVELS, **(levels or {})}

    abar_n, sigma_a = estimate_sigma_circle(grid, settings.rho, settings.mad)
    sigma2 = min(sigma_a, nd.sigma_star) if nd is not None else sigma_a

    u_threshold = settings.u_critical
    if settings.u_threshold == 'calibrated':
        if 'U' not in calibrations:
            raise ConfigurationError("u_threshold=calibrated needs a U calibration")
        u_threshold = calibrations['U'].threshold(1.0 - levels['U'])
    u_tilde_calibration = None
    if settings.u_tilde_reference == 'calibrated':
        if 'U_tilde' not in calibrations:
            raise ConfigurationError("u_tilde_reference=calibrated needs a U_tilde calibration")
        u_tilde_calibration = calibrations['U_tilde']
    u = test_U(grid, abar_n, sigma_a, u_threshold)
    ut = test_U_tilde(grid, sigma_a, settings.c, u_tilde_calibration, levels['U_tilde'])
    q = test_Q(grid, sigma2, settings.rho, calibrations.get('Q'), levels['Q'])
    v = test_V(grid, sigma2, settings.m, settings.m_prime, calibrations.get('V'), levels['V'])
    k = test_K(grid, calibrations.get('K'), levels['K'])

    report = TestReport(
        T=u.T, U=u.U, T_tilde=ut.T_tilde, U_tilde=ut.U_tilde, X=q.X, Q=q.Q, Z=v.Z, V=v.V, K=k.K,
        X_k=q.X_k, P_k=k.P_k, k_max=v.k_max, k_breve_max=k.k_breve_max, K_score=k.score,
        a_min=ut.a_min, sigma_A=sigma_a, sigma2=sigma2,
    )
    report.thresholds['U'] = u_threshold
    report.thresholds['U_tilde'] = u_tilde_threshold(levels['U_tilde'], u_tilde_calibration)
    report.thresholds['K'] = float(norm.ppf(1.0 - levels['K'] / 2.0))
    if 'U' in calibrations:
        report.thresholds['U_calibrated'] = calibrations['U'].threshold(1.0 - levels['U'])
    if 'U_tilde' in calibrations and u_tilde_calibration is None:
        report.thresholds['U_tilde_calibrated'] = u_tilde_threshold(levels['U_tilde'], calibrations['U_tilde'])
    for name, level in (('Q', levels['Q']), ('V', 1.0 - levels['V'])):
        if name in calibrations:
            report.thresholds[name] = calibrations[name].threshold(level)
    for name, calibration in calibrations.items():
        if name in STATISTICS and not (name == 'U_tilde' and u_tilde_calibration is None):
            report.p_values[name] = calibration.p_value(report.statistic(name))
    if u_tilde_calibration is None and not np.isnan(report.U_tilde):
        report.p_values['U_tilde'] = float(norm.sf(report.U_tilde))

    for name, result in (('U', u), ('U_tilde', ut), ('Q', q), ('V', v), ('K', k)):
        report.decisions[HYPOTHESIS_TAGS[name]] = result.decision
    report.classification = classify_voxel(report)
    return report


def supported_levels(reps: int, min_tail_count: int) -> np.ndarray:
    levels = np.round(np.arange(1, 1000) / 1000.0, 3)
    return levels[reps * np.minimum(levels, 1.0 - levels) >= min_tail_count]


def _null_replicate(model, scheme, noise_sigma, settings, seed, rep):
    sequence = np.random.SeedSequence(seed, spawn_key=(STREAM_CALIBRATION, rep))
    sample = acquire(model, scheme, noise_sigma, sequence)
    nd, _, grid = process_sample(sample, settings)
    report = run_tests(nd, grid, replace(settings, u_threshold='published', u_tilde_reference='gaussian'))
    values = {name: report.statistic(name) for name in STATISTICS}
    values.update(T_tilde=report.T_tilde, a_min=report.a_min, sigma_A=report.sigma_A)
    return values


def boundary_translation(t_tilde, a_min, sigma_A, c: float = 2.0) -> np.ndarray:
    """U_tilde of replicates whose T_tilde is shifted onto the c boundary.

    The shift is the a_min/sigma_A weighted mean of T_tilde, so the returned
    values are the test statistic itself and average to zero.
    """
    t_tilde, a_min, sigma_A = (np.asarray(v, dtype=float) for v in (t_tilde, a_min, sigma_A))
    weights = np.where(sigma_A > 0, a_min / np.where(sigma_A > 0, sigma_A, 1.0), np.nan)
    usable = np.isfinite(t_tilde) & np.isfinite(weights)
    if not np.any(usable) or weights[usable].sum() <= 0:
        return np.full(t_tilde.shape, np.nan)
    centre = float(np.average(t_tilde[usable], weights=weights[usable]))
    boundary = t_tilde - centre + (c - 1.0)
    return np.array([u_tilde_statistic(t, a, s, c) if ok else float('nan')
                     for t, a, s, ok in zip(boundary, a_min, sigma_A, usable)])


def null_model_for(null_model: str, seed: int):
    """The null model under the calibration's seeded random rotation"""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAM_ROTATION,)))
    return benchmark_model(null_model, random_rotation(rng))


def simulate_null(spec: NullSpec, reps: int, seed: int, workers: int = 1, backend: str = 'loky') -> Dict[str, np.ndarray]:
    """Statistic values over reps replicates of the null model.

    U_tilde replicates are translated onto the multi-modality boundary
    (see boundary_translation).
    """
    model = null_model_for(spec.null_model, seed)
    tasks = [(model, spec.scheme, spec.noise_sigma, spec.settings, seed, rep) for rep in range(reps)]
    rows = run_tasks(_null_replicate, tasks, workers, backend, desc=f"null {spec.null_model}")
    samples = {name: np.array([row[name] for row in rows]) for name in STATISTICS + ('T_tilde', 'a_min', 'sigma_A')}
    samples['U_tilde'] = boundary_translation(samples['T_tilde'], samples['a_min'], samples['sigma_A'],
                                              spec.settings.c)
    return samples


def check_replicates(statistic_tag: str, reps: int, min_tail_count: int):
    """Each tail used by the test must hold at least min_tail_count replicates"""
    level = DEFAULT_LEVELS[statistic_tag]
    if statistic_tag == 'K':
        level /= 2.0
    if reps * min(level, 1.0 - level) < min_tail_count:
        raise ConfigurationError(
            f"{reps} replicates are too few for the {level:g} tail of {statistic_tag} "
            f"(need at least {int(np.ceil(min_tail_count / level))})")


def calibrate_null(statistic_tag: str, null_spec: NullSpec, reps: int, seed: int, workers: int = 1,
                   backend: str = 'loky', min_tail_count: int = 50, samples=None) -> NullCalibration:
    """Empirical null quantiles of one statistic (samples may be passed in to share a simulation)"""
    if statistic_tag not in STATISTICS:
        raise ConfigurationError(f"Unknown statistic '{statistic_tag}'")
    check_replicates(statistic_tag, reps, min_tail_count)
    if samples is None:
        samples = simulate_null(null_spec, reps, seed, workers, backend)
    values = np.asarray(samples[statistic_tag], dtype=float)
    values = values[~np.isnan(values)]
    if values.size < reps:
        logger.warning(f"{reps - values.size} undefined {statistic_tag} replicates dropped from the null")
    if values.size == 0:
        raise DataError(f"All null replicates of {statistic_tag} are undefined")
    finite = values[np.isfinite(values)]

    levels = supported_levels(reps, min_tail_count)
    calibration = NullCalibration(
        statistic=statistic_tag, null_model=null_spec.null_model, null_spec=null_spec.digest(statistic_tag),
        noise_sigma=null_spec.noise_sigma, reps=reps, seed=seed,
        levels=levels, thresholds=np.maximum.accumulate(np.quantile(values, levels)),
        mean=float(finite.mean()) if finite.size else 0.0,
        std=float(finite.std(ddof=1)) if finite.size > 1 else 0.0,
        tail=TAILS[statistic_tag],
    )
    logger.info(f"Calibrated {statistic_tag} under {null_spec.null_model} at noise {null_spec.noise_sigma:g} "
                f"({reps} replicates, version {APP_VERSION})")
    return calibration


def calibrate_all(noise_sigma: float, scheme: AcquisitionScheme, settings: AnalysisSettings, reps: int,
                  seed: int, statistics=STATISTICS, workers: int = 1, backend: str = 'loky',
                  min_tail_count: int = 50) -> List[NullCalibration]:
    """Calibrate several statistics, simulating each null model once"""
    results = []
    by_model: Dict[str, List[str]] = {}
    for name in statistics:
        check_replicates(name, reps, min_tail_count)
        by_model.setdefault(NULL_MODELS[name], []).append(name)
    for null_model, names in by_model.items():
        spec = NullSpec(null_model, float(noise_sigma), scheme, settings)
        samples = simulate_null(spec, reps, seed, workers, backend)
        for name in names:
            results.append(calibrate_null(name, spec, reps, seed, workers, backend, min_tail_count, samples))
    order = {name: i for i, name in enumerate(STATISTICS)}
    return sorted(results, key=lambda c: order[c.statistic])
