"""
Worker pool for independent Monte Carlo replicates and voxel chunks
"""

import logging
import sys

from joblib import Parallel, delayed
from tqdm import tqdm

from config import resolve_workers

logger = logging.getLogger(__name__)


def run_tasks(func, tasks, workers=1, backend='loky', desc=None):
    """Apply func to every task tuple; results come back in task order"""
    tasks = list(tasks)
    workers = resolve_workers(workers)
    show_progress = desc is not None and sys.stderr.isatty()
    iterator = tqdm(tasks, desc=desc, leave=False) if show_progress else tasks

    if workers == 1:
        return [func(*task) for task in iterator]

    logger.debug(f"Running {len(tasks)} tasks on {workers} workers ({backend})")
    return Parallel(n_jobs=workers, backend=backend)(delayed(func)(*task) for task in iterator)
