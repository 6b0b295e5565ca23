class SmoothSaliencyError(Exception):
    """Root of every error raised by this package."""


class DimensionError(SmoothSaliencyError, ValueError):
    pass


class UsageError(SmoothSaliencyError):
    pass


class ConfigError(SmoothSaliencyError):
    pass


class TensorFormatError(SmoothSaliencyError):
    pass


class CheckpointError(SmoothSaliencyError):
    pass


class TrainingError(SmoothSaliencyError):
    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
