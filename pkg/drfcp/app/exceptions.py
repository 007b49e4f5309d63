# app/exceptions.py
"""
Domain errors. Management commands translate each family into an exit code
(see ``EXIT_CODES``); library code raises them directly.
"""


class DrfcpError(Exception):
    """Base class for every error raised on purpose by drfcp."""

    exit_code = 1


class ConfigError(DrfcpError):
    exit_code = 2


class DataError(DrfcpError, ValueError):
    """Unreadable, malformed or degenerate input data."""

    exit_code = 3


class DivergenceError(FloatingPointError):
    """A loss or gradient became non-finite."""


class TrainingDivergence(DrfcpError):
    """Training aborted on a non-finite loss; ``history`` holds the epochs run so far."""

    exit_code = 4

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class MissingArtifact(DrfcpError, FileNotFoundError):
    exit_code = 5


class EstimatorError(DrfcpError, ValueError):
    """An uncertainty estimator cannot produce usable sigma values."""

    exit_code = 3


class MetricError(DrfcpError, ValueError):
    exit_code = 3


EXIT_CODES = {
    "ok": 0,
    "config": ConfigError.exit_code,
    "data": DataError.exit_code,
    "divergence": TrainingDivergence.exit_code,
    "missing_artifact": MissingArtifact.exit_code,
}
