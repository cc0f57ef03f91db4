"""Exception types shared across the package."""


class UnlearnAugError(Exception):
    """Base class for all package errors."""


class DimensionError(UnlearnAugError, ValueError):
    """Tensor or batch shapes do not line up."""


class InputError(UnlearnAugError, ValueError):
    """An argument is outside its valid domain."""


class UsageError(UnlearnAugError, RuntimeError):
    """An API was called in a state where it cannot run."""


class FormatError(UnlearnAugError, ValueError):
    """A file on disk does not have the expected layout."""


class TrainingError(UnlearnAugError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


class FitError(UnlearnAugError, RuntimeError):
    """The membership-inference attacker could not be fitted."""


class ConfigError(UnlearnAugError, ValueError):
    """Experiment configuration failed validation."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
