"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A block, model, or command was configured inconsistently."""


class ShapeError(ValueError):
    """Tensor shapes passed to an operation do not line up."""


class DatasetError(RuntimeError):
    """A dataset on disk is incomplete or malformed; message lists the problems."""
