"""
Sentry logging configuration for the q-space structure toolkit
"""

import os
import logging
import sentry_sdk
from sentry_sdk.integrations.logging import LoggingIntegration
from dotenv import load_dotenv
from functools import wraps

from config import APP_VERSION

load_dotenv()

logger = logging.getLogger(__name__)


def init_sentry():
    """Initialize Sentry SDK; returns False when no DSN is configured"""
    sentry_dsn = os.getenv('SENTRY_DSN')

    if not sentry_dsn:
        logger.debug("SENTRY_DSN not configured. Sentry logging is disabled.")
        return False

    sentry_logging = LoggingIntegration(
        level=logging.INFO,
        event_level=logging.ERROR
    )

    sentry_sdk.init(
        dsn=sentry_dsn,
        integrations=[sentry_logging],
        traces_sample_rate=float(os.getenv('SENTRY_TRACES_SAMPLE_RATE', '1.0')),
        environment=os.getenv('ENVIRONMENT', 'development'),
        release=f"qstructure@{os.getenv('APP_VERSION', APP_VERSION)}"
    )

    logger.info("Sentry initialized successfully")
    return True


def set_run_context(config):
    """Attach the resolved experiment configuration to every later event"""
    sentry_sdk.set_tag("config_hash", config.config_hash()[:12])
    sentry_sdk.set_context("experiment", {
        "models": ",".join(config.models),
        "noise_levels": [round(s, 6) for s in config.noise_levels],
        "scheme": config.scheme,
        "replicates": config.replicates,
        "seed": config.seed,
        "workers": config.workers,
        "backend": config.backend,
        "grid": config.settings.fingerprint(),
    })


def capture_exception(exception):
    """Capture and send exception to Sentry"""
    sentry_sdk.capture_exception(exception)
    logger.error(f"Exception captured: {exception}")


def log_experiment_event(event_type, config_hash, details=None):
    """Log a finished experiment step to Sentry"""
    with sentry_sdk.push_scope() as scope:
        scope.set_tag("event_type", event_type)
        scope.set_tag("config_hash", config_hash[:12])

        if details:
            scope.set_extra("details", details)

        message = f"Experiment event: {event_type}"
        if details:
            message += f" - {details}"

        sentry_sdk.capture_message(message, level='info')
        logger.info(f"[{event_type}] Config: {config_hash[:12]} - {details or 'No details'}")


def log_calibration_completed(config_hash, calibrations):
    log_experiment_event(
        event_type="calibration_completed",
        config_hash=config_hash,
        details=f"{len(calibrations)} null tables: "
                + ", ".join(f"{c.statistic}@{c.noise_sigma:g}" for c in calibrations)
    )


def log_rejection_study_completed(config_hash, rows):
    cells = {(r['model'], r['noise']) for r in rows}
    log_experiment_event(
        event_type="rejection_study_completed",
        config_hash=config_hash,
        details=f"{len(cells)} model/noise cells, {len(rows)} rows"
    )


def log_volume_analyzed(config_hash, voxel_count, label_counts):
    """Log a finished volume analysis with its label histogram"""
    log_experiment_event(
        event_type="volume_analyzed",
        config_hash=config_hash,
        details=f"{voxel_count} voxels - " + ", ".join(f"{k}: {v}" for k, v in label_counts.items())
    )


def sentry_track(command):
    """Run a CLI command inside a Sentry transaction, capturing what it raises"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            with sentry_sdk.start_transaction(op="command", name=command) as transaction:
                try:
                    return func(*args, **kwargs)
                except Exception as e:
                    transaction.set_status("internal_error")
                    with sentry_sdk.push_scope() as scope:
                        scope.set_tag("command", command)
                        capture_exception(e)
                    raise
        return wrapper
    return decorator
