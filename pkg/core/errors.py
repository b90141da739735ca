class NoiseLabError(Exception):
    """Base error. `exit_code` is what the CLI exits with when this escapes a command."""
    exit_code = 1


class ConfigError(NoiseLabError):
    """Invalid configuration or parameter values."""
    exit_code = 1


class DataError(NoiseLabError):
    """Malformed or inconsistent data (bad cells, unknown features, shape mismatches)."""
    exit_code = 2


class UnknownFeatureError(DataError):
    def __init__(self, feature: str, available=None):
        self.feature = feature
        message = f"Unknown feature '{feature}'"
        if available is not None:
            message += f" (table has {len(available)} features)"
        super().__init__(message)


class StorageError(NoiseLabError):
    """A path could not be read or written."""
    exit_code = 3
