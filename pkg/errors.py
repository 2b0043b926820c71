"""
Exception hierarchy for the q-space structure toolkit
"""


class QStructureError(Exception):
    """Base error for the toolkit"""
    pass


class DomainError(QStructureError):
    """Invalid numeric input (out-of-range parameter, bad rotation, negative noise)"""
    pass


class ConfigurationError(QStructureError):
    """Invalid configuration (grid size, test parameters, config files)"""
    pass


class DataError(QStructureError):
    """Invalid or inconsistent measurement data"""
    pass


class MissingCalibrationError(ConfigurationError):
    """No stored null calibration matches the requested test"""

    def __init__(self, statistic, null_spec, noise_sigma=None):
        self.statistic = statistic
        self.null_spec = null_spec
        self.noise_sigma = noise_sigma
        noise = f" at noise {noise_sigma:g}" if noise_sigma is not None else ""
        super().__init__(
            f"No calibration for statistic '{statistic}'{noise} (null spec {null_spec[:12]}). "
            f"Run the 'calibrate' command first."
        )
