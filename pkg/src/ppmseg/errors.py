"""Exception hierarchy shared across the package."""


class PPMSegError(Exception):
    """Base class for all errors raised by ppmseg."""


class ShapeError(PPMSegError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ContractError(PPMSegError, ValueError):
    """A documented precondition was violated."""


class ConfigError(PPMSegError, ValueError):
    """Invalid model, training or run configuration."""


class FormatError(PPMSegError):
    """A checkpoint file is corrupt or does not match the expected layout."""


class IngestionError(PPMSegError):
    """A dataset directory could not be read."""


class TrainingError(PPMSegError):
    """Training aborted, e.g. because a gradient became non-finite."""
