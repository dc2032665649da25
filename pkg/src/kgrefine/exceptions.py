class DataFormatError(ValueError):
    """Malformed triple, description or config input."""


class ArtifactError(RuntimeError):
    """A persisted artifact is missing, corrupt or from a different run config."""


class TrainingDivergedError(FloatingPointError):
    """Loss or gradient became non-finite during optimisation."""

    def __init__(self, message, step=None, example_ids=None):
        super().__init__(message)
        self.step = step
        self.example_ids = example_ids
