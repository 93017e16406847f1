"""Exception types shared across the toolkit."""


class DiffInspectError(Exception):
    """Base class for all toolkit errors."""


class DataValidationError(DiffInspectError):
    """An annotation file, dataset or image violated a structural invariant."""


class ConfigError(DiffInspectError):
    """A config file or registry lookup was invalid."""


class TrainingError(DiffInspectError):
    """Training hit a non-recoverable numeric condition (non-finite loss)."""
