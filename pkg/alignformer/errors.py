"""Exception hierarchy shared by the library and the command line."""


class AlignFormerError(Exception):
    """Base class for every error raised by alignformer."""

    exit_code = 1


class ConfigError(AlignFormerError):
    """Invalid configuration, override or usage."""

    exit_code = 2


class ShapeError(ConfigError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DatasetError(AlignFormerError):
    """A dataset or artifact file could not be read."""

    exit_code = 3


class CheckpointError(AlignFormerError):
    """A checkpoint is missing, corrupt or incompatible."""

    exit_code = 2


class EvaluationError(AlignFormerError):
    """Evaluation inputs are unusable."""

    exit_code = 2


class NumericalError(AlignFormerError):
    """A loss or gradient became non-finite during training."""

    exit_code = 4

    def __init__(self, message, *, epoch=None, scene_id=None):
        """Record where the failure happened."""
        super().__init__(message)
        self.epoch = epoch
        self.scene_id = scene_id
