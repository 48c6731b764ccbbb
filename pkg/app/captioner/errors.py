class FusecapError(Exception):
    """Base class for failures the CLI reports with a dedicated exit code."""

    exit_code = 1


class ConfigError(FusecapError):
    """Invalid run configuration, fusion specification or command usage."""

    exit_code = 2


class DataError(FusecapError):
    """Manifest, image codec or feature-file problems."""

    exit_code = 2


class NumericError(FusecapError):
    """Non-finite loss or gradient during training."""

    exit_code = 3

    def __init__(self, message: str, step: int = -1):
        super().__init__(message)
        self.step = step
