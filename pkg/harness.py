"""
Experiment runner: rejection tables, fiber traces, synthetic volumes and voxelwise volume analysis
"""

import csv
import hashlib
import io
import logging
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from config import ExperimentConfig
from db_operations import completed_chunks, load_calibration, mark_chunk_done
from errors import ConfigurationError, DataError, MissingCalibrationError, QStructureError
from estimator import dominant_direction, fill_grid, process_sample
from geometry import hemisphere, icosphere, random_rotation
from parallel import run_tasks
from phantom import (
    MODEL_NAMES, AcquisitionScheme, HardiSample, acquire, benchmark_model, electrostatic_scheme,
    evolution_sequence, load_scheme, origin_value, save_scheme,
)
from stats import (
    FAIL, HYPOTHESIS_TAGS, LABELS, REJECT, STATISTICS, STREAM_ROTATION, NullSpec, run_tests, summaries,
)

logger = logging.getLogger(__name__)

STREAM_REJECTION = 1
STREAM_VOLUME = 3

MAP_STATISTICS = ('T', 'U', 'T_tilde', 'U_tilde', 'X', 'Q', 'Z', 'V', 'K')
LABEL_CODES = {'outside': 0, 'isotropic': 1, 'unimodal-prolate': 2, 'unimodal-scalene': 3,
               'unimodal-asymmetric': 4, 'multimodal': 5, 'undetermined': 6}
TRACE_COLUMNS = ('voxel', 'tau', 'tau_tilde', 'xi', 'zeta', 'kappa', 'gfa')
REJECTION_COLUMNS = ('model', 'noise', 'test', 'hypothesis', 'conditioning', 'rejected', 'denominator',
                  'fraction', 'undefined')


def model_code(name: str) -> int:
    return MODEL_NAMES.index(name) + 1


def _noise_key(noise_sigma: float) -> int:
    return int(round(noise_sigma * 1e9))


@lru_cache(maxsize=8)
def _generated_scheme(n: int, n0: int) -> AcquisitionScheme:
    return electrostatic_scheme(n, n0=n0)


def resolve_scheme(config: ExperimentConfig) -> AcquisitionScheme:
    """A direction count builds an electrostatic scheme; anything else is a scheme file"""
    if config.scheme.isdigit():
        return _generated_scheme(int(config.scheme), config.n0)
    return load_scheme(config.scheme)


def cell_rotation(seed: int, name: str, noise_sigma: float) -> np.ndarray:
    sequence = np.random.SeedSequence(seed, spawn_key=(STREAM_ROTATION, model_code(name), _noise_key(noise_sigma)))
    return random_rotation(np.random.default_rng(sequence))


def required_statistics(config: ExperimentConfig) -> List[str]:
    """Statistics whose stored tables the tests decide with under the configured settings"""
    names = ['Q', 'V', 'K']
    if config.settings.u_tilde_reference == 'calibrated':
        names.insert(0, 'U_tilde')
    if config.settings.u_threshold == 'calibrated':
        names.insert(0, 'U')
    return names


def load_calibration_set(config: ExperimentConfig, scheme: AcquisitionScheme, statistics=None,
                         optional=(), db=None) -> Dict[float, Dict[str, object]]:
    """Stored calibrations for every configured noise level, keyed by noise then statistic"""
    statistics = list(statistics or required_statistics(config))
    result = {}
    for noise in config.noise_levels:
        tables = {}
        for name in statistics + [s for s in optional if s not in statistics]:
            digest = NullSpec.for_statistic(name, noise, scheme, config.settings).digest(name)
            try:
                tables[name] = load_calibration(name, digest, noise, db=db)
            except MissingCalibrationError:
                if name in statistics:
                    raise
                logger.debug(f"No optional {name} calibration at noise {noise:g}")
        result[noise] = tables
    return result


def _no_calibrations(config: ExperimentConfig, scheme: AcquisitionScheme) -> Exception:
    """Error for an analysis that has no calibration at any noise level"""
    if not config.noise_levels:
        return ConfigurationError("No noise level configured, so no calibration can be selected; pass --noise")
    name, noise = required_statistics(config)[0], config.noise_levels[0]
    digest = NullSpec.for_statistic(name, noise, scheme, config.settings).digest(name)
    return MissingCalibrationError(name, digest, noise)


def _rejection_replicate(model, scheme, noise_sigma, settings, seed, code, rep, calibrations):
    sequence = np.random.SeedSequence(seed, spawn_key=(STREAM_REJECTION, code, _noise_key(noise_sigma), rep))
    sample = acquire(model, scheme, noise_sigma, sequence)
    nd, _, grid = process_sample(sample, settings)
    return run_tests(nd, grid, settings, calibrations).decisions


def _count(decisions, tag, among=None):
    pool = [d for d in decisions if among is None or among(d)]
    rejected = sum(1 for d in pool if d[tag] == REJECT)
    undefined = sum(1 for d in pool if d[tag] is None)
    return rejected, len(pool), undefined


def rejection_rows(name: str, noise_sigma: float, decisions) -> List[Dict]:
    """Rejection counts of one model/noise cell under sequential conditioning.

    Q is reported among U non-rejectors and, as a second row, among all
    replicates.
    """
    u_tag = HYPOTHESIS_TAGS['U']

    def u_rejected(d):
        return d[u_tag] == REJECT

    def u_failed(d):
        return d[u_tag] == FAIL

    plan = [('U', 'all', None), ('U_tilde', 'U rejected', u_rejected), ('V', 'U rejected', u_rejected),
            ('K', 'U rejected', u_rejected), ('Q', 'U not rejected', u_failed), ('Q', 'all', None)]
    rows = []
    for statistic, conditioning, among in plan:
        tag = HYPOTHESIS_TAGS[statistic]
        rejected, denominator, undefined = _count(decisions, tag, among)
        rows.append({
            'model': name, 'noise': noise_sigma, 'test': statistic, 'hypothesis': tag,
            'conditioning': conditioning, 'rejected': rejected, 'denominator': denominator,
            'fraction': rejected / denominator if denominator else float('nan'), 'undefined': undefined,
        })
    return rows


def format_csv(rows, columns) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator='\n')
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buffer.getvalue()


def format_rejections(rows) -> str:
    lines = [f"{'model':<6} {'noise':>8}  {'test':<8} {'hypothesis':<6} {'count':>11} {'fraction':>9}  conditioning",
             "-" * 72]
    for row in rows:
        count = f"{row['rejected']}/{row['denominator']}"
        lines.append(f"{row['model']:<6} {row['noise']:>8.4f}  {row['test']:<8} {row['hypothesis']:<6} "
                     f"{count:>11} {row['fraction']:>9.3f}  {row['conditioning']}")
    return "\n".join(lines) + "\n"


def run_rejection_study(config: ExperimentConfig, calibrations=None, db=None, output_dir=None) -> List[Dict]:
    """Monte Carlo rejection counts for each model and noise level; writes rejections.csv and rejections.txt"""
    scheme = resolve_scheme(config)
    if calibrations is None:
        calibrations = load_calibration_set(config, scheme, db=db)

    rows = []
    for name in config.models:
        if name not in MODEL_NAMES:
            raise DataError(f"Unknown model '{name}'")
        for noise in config.noise_levels:
            model = benchmark_model(name, cell_rotation(config.seed, name, noise))
            tasks = [(model, scheme, noise, config.settings, config.seed, model_code(name), rep,
                      calibrations.get(noise, {})) for rep in range(config.replicates)]
            decisions = run_tasks(_rejection_replicate, tasks, config.workers, config.backend,
                                  desc=f"{name} @ {noise:g}")
            cell = rejection_rows(name, noise, decisions)
            logger.info(f"{name} at noise {noise:g}: U rejected {cell[0]['rejected']}/{cell[0]['denominator']}")
            rows.extend(cell)

    output_dir = Path(output_dir or config.output or 'results')
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / 'rejections.csv').write_text(format_csv(rows, REJECTION_COLUMNS))
    (output_dir / 'rejections.txt').write_text(format_rejections(rows))
    return rows


class NormalizedModel:
    """An exact model divided by its value at the origin"""

    def __init__(self, model):
        self.model = model
        self.scale = origin_value(model)

    def evaluate(self, points) -> np.ndarray:
        return self.model.evaluate(points) / self.scale


def trace_summaries(model, N: int = 128, L: int = 64):
    """Noiseless summaries of an exact model evaluated directly on its circle grid"""
    fn = NormalizedModel(model)
    est = dominant_direction(fn, candidates=hemisphere(icosphere(3)), L=L)
    return summaries(fill_grid(fn, est, N))


def run_fiber_trace(kind: str, N: int = 128, output=None, L: int = 64):
    """Summaries along the forking or crossing voxel sequence, optionally written as CSV"""
    trace = [(label, trace_summaries(model, N, L)) for label, model in evolution_sequence(kind)]
    if output is not None:
        rows = [{'voxel': label, **{k: getattr(s, k) for k in TRACE_COLUMNS[1:]}} for label, s in trace]
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        Path(output).write_text(format_csv(rows, TRACE_COLUMNS))
        logger.info(f"{kind} trace with {len(trace)} voxels written to {output}")
    return trace


@dataclass(eq=False)
class VolumeDataset:
    """Voxel measurements laid out as (nx, ny, nz, n0 + n): b=0 values first"""

    dims: tuple
    scheme: AcquisitionScheme
    data: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        expected = self.dims + (self.scheme.n0 + self.scheme.n,)
        data = np.asarray(self.data, dtype=np.float32)
        if data.size != int(np.prod(expected)):
            raise DataError(f"Volume holds {data.size} values, expected {int(np.prod(expected))} for {expected}")
        self.data = data.reshape(expected)
        if self.mask is None:
            self.mask = np.ones(self.dims, dtype=bool)
        mask = np.asarray(self.mask)
        if mask.size != int(np.prod(self.dims)):
            raise DataError(f"Mask holds {mask.size} voxels, expected {self.dims}")
        self.mask = mask.reshape(self.dims).astype(bool)

    def sample(self, index) -> HardiSample:
        values = self.data[tuple(index)].astype(float)
        try:
            return HardiSample(values[self.scheme.n0:], values[:self.scheme.n0], self.scheme)
        except DataError as e:
            raise DataError(f"Voxel {tuple(int(i) for i in index)}: {e}") from e


def _read_header(path: Path) -> Dict[str, str]:
    if not path.exists():
        raise DataError(f"Header not found: {path}")
    entries = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split('=', 1))
        entries[key] = value
    return entries


def _write_header(path: Path, entries: Dict[str, object]):
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))


def _read_raw(path: Path, dtype) -> np.ndarray:
    if not path.exists():
        raise DataError(f"Data file not found: {path}")
    return np.fromfile(path, dtype=np.dtype(dtype).newbyteorder('<'))


def load_volume(header_path) -> VolumeDataset:
    """Read a volume header and its scheme, data and mask files (paths relative to the header)"""
    header_path = Path(header_path)
    header = _read_header(header_path)
    for key in ('dims', 'scheme', 'data'):
        if key not in header:
            raise DataError(f"{header_path}: missing '{key}'")
    try:
        dims = tuple(int(v) for v in header['dims'].split())
    except ValueError as e:
        raise DataError(f"{header_path}: malformed dims '{header['dims']}'") from e
    if len(dims) != 3:
        raise DataError(f"{header_path}: dims needs three sizes, got {dims}")

    base = header_path.parent
    scheme = load_scheme(base / header['scheme'])
    data = _read_raw(base / header['data'], '<f4')
    mask = _read_raw(base / header['mask'], 'u1') if header.get('mask') else None
    return VolumeDataset(dims, scheme, data, mask)


def save_volume(dataset: VolumeDataset, header_path) -> Path:
    header_path = Path(header_path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    stem = header_path.stem
    save_scheme(dataset.scheme, header_path.parent / f"{stem}_scheme.txt")
    dataset.data.astype('<f4').tofile(header_path.parent / f"{stem}.raw")
    dataset.mask.astype('u1').tofile(header_path.parent / f"{stem}_mask.raw")
    _write_header(header_path, {
        'dims': " ".join(str(d) for d in dataset.dims),
        'scheme': f"{stem}_scheme.txt",
        'data': f"{stem}.raw",
        'mask': f"{stem}_mask.raw",
    })
    return header_path


def write_map(values: np.ndarray, path, description: str) -> Path:
    """Flat little-endian map with a text header next to it"""
    path = Path(path)
    dtype = '<f4' if values.dtype.kind == 'f' else 'u1'
    values.astype(dtype).tofile(path.with_suffix('.raw'))
    _write_header(path.with_suffix('.hdr'), {
        'dims': " ".join(str(d) for d in values.shape),
        'dtype': 'float32' if dtype == '<f4' else 'uint8',
        'data': path.with_suffix('.raw').name,
        'description': description,
    })
    return path.with_suffix('.raw')


def read_map(path) -> np.ndarray:
    path = Path(path)
    header = _read_header(path.with_suffix('.hdr'))
    dims = tuple(int(v) for v in header['dims'].split())
    dtype = '<f4' if header.get('dtype', 'float32') == 'float32' else 'u1'
    return _read_raw(path.with_suffix('.raw'), dtype).reshape(dims)


def simulate_volume(config: ExperimentConfig, dims, header_path, noise_sigma=None) -> VolumeDataset:
    """Synthetic volume with the configured models in equal slabs along x"""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise DataError(f"Volume dims must be three positive sizes, got {dims}")
    noise = config.noise_levels[0] if noise_sigma is None else noise_sigma
    scheme = resolve_scheme(config)
    models = [benchmark_model(name, cell_rotation(config.seed, name, noise)) for name in config.models]

    data = np.empty(dims + (scheme.n0 + scheme.n,), dtype=np.float32)
    for flat, index in enumerate(np.ndindex(*dims)):
        model = models[index[0] * len(models) // dims[0]]
        sequence = np.random.SeedSequence(config.seed, spawn_key=(STREAM_VOLUME, flat))
        sample = acquire(model, scheme, noise, sequence)
        data[index] = np.concatenate([sample.b0_values, sample.raw_values])

    dataset = VolumeDataset(dims, scheme, data)
    save_volume(dataset, header_path)
    logger.info(f"Synthetic volume {dims} with models {','.join(config.models)} at noise {noise:g} "
                f"written to {header_path}")
    return dataset


def nearest_noise(sigma_star: float, noise_levels) -> float:
    levels = sorted(noise_levels)
    return levels[int(np.argmin([abs(level - sigma_star) for level in levels]))]


def _empty_voxel():
    values = {name: float('nan') for name in MAP_STATISTICS}
    values.update({f"p_{name}": float('nan') for name in STATISTICS})
    return values, LABEL_CODES['undetermined']


def _analyze_chunk(indices, samples, settings, calibrations):
    results = []
    for index, sample in zip(indices, samples):
        try:
            nd, _, grid = process_sample(sample, settings)
            noise = nearest_noise(nd.sigma_star, calibrations)
            report = run_tests(nd, grid, settings, calibrations[noise])
        except QStructureError as e:
            logger.warning(f"Voxel {tuple(int(i) for i in index)} left undetermined: {e}")
            results.append(_empty_voxel())
            continue
        values = {name: report.statistic(name) for name in MAP_STATISTICS}
        values.update({f"p_{name}": report.p_values.get(name, float('nan')) for name in STATISTICS})
        results.append((values, LABEL_CODES[report.classification]))
    return results


def run_key(dataset: VolumeDataset, config: ExperimentConfig, calibrations) -> str:
    h = hashlib.sha256(config.config_hash().encode())
    h.update(dataset.data.tobytes())
    h.update(dataset.mask.tobytes())
    for noise in sorted(calibrations):
        for name in sorted(calibrations[noise]):
            h.update(calibrations[noise][name].null_spec.encode())
    return h.hexdigest()


def analyze_volume(dataset: VolumeDataset, config: ExperimentConfig, calibrations=None, output_dir=None,
                   db=None) -> Dict[str, object]:
    """Test every masked voxel and write statistic, p-value and classification maps.

    Work is split into chunks of voxels; finished chunks are stored under
    chunks/ and recorded in the database so an interrupted run resumes.
    """
    if calibrations is None:
        calibrations = load_calibration_set(config, dataset.scheme, optional=('U', 'U_tilde'), db=db)
    if not calibrations:
        raise _no_calibrations(config, dataset.scheme)

    output_dir = Path(output_dir or config.output or 'results')
    chunk_dir = output_dir / 'chunks'
    chunk_dir.mkdir(parents=True, exist_ok=True)

    key = run_key(dataset, config, calibrations)
    voxels = np.argwhere(dataset.mask)
    chunks = [voxels[i:i + config.chunk_size] for i in range(0, len(voxels), config.chunk_size)]
    done = completed_chunks(key, db=db)
    pending = [i for i in range(len(chunks)) if i not in done or not Path(done[i]).exists()]
    if done:
        logger.info(f"Resuming run {key[:12]}: {len(chunks) - len(pending)}/{len(chunks)} chunks already done")

    batch = max(1, config.workers)
    for start in range(0, len(pending), batch):
        ids = pending[start:start + batch]
        tasks = [(chunks[i], [dataset.sample(v) for v in chunks[i]], config.settings, calibrations) for i in ids]
        for i, result in zip(ids, run_tasks(_analyze_chunk, tasks, config.workers, config.backend,
                                            desc="chunks")):
            path = chunk_dir / f"{key[:16]}_{i:06d}.npz"
            np.savez(path, indices=chunks[i],
                     labels=np.array([code for _, code in result], dtype=np.uint8),
                     **{name: np.array([values[name] for values, _ in result], dtype=np.float64)
                        for name in MAP_STATISTICS + tuple(f"p_{s}" for s in STATISTICS)})
            mark_chunk_done(key, i, path, len(chunks[i]), db=db)
            done[i] = str(path)

    maps = {name: np.full(dataset.dims, np.nan, dtype=np.float32)
            for name in MAP_STATISTICS + tuple(f"p_{s}" for s in STATISTICS)}
    labels = np.zeros(dataset.dims, dtype=np.uint8)
    for i in range(len(chunks)):
        with np.load(done[i]) as stored:
            idx = tuple(stored['indices'].T)
            labels[idx] = stored['labels']
            for name in maps:
                maps[name][idx] = stored[name]

    for name, values in maps.items():
        write_map(values, output_dir / name, f"voxelwise {name}")
    write_map(labels, output_dir / 'classification',
              "0 outside, " + ", ".join(f"{code} {label}" for label, code in LABEL_CODES.items() if code))

    names = {code: label for label, code in LABEL_CODES.items()}
    counts = Counter(names[int(code)] for code in labels[dataset.mask])
    label_counts = {label: counts.get(label, 0) for label in LABELS}
    logger.info(f"Analyzed {len(voxels)} voxels: {label_counts}")
    return {'maps': maps, 'classification': labels, 'label_counts': label_counts, 'run_key': key}
