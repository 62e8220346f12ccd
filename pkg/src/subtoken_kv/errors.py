"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad key, bad value, or inconsistent settings."""


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, truncated, or structurally invalid."""


class GradCheckError(RuntimeError):
    """Finite-difference oracle hit a non-finite value or a malformed target."""


class TrainingDiverged(RuntimeError):
    """A loss term became non-finite during training."""

    def __init__(self, step: int, term: str, value: float) -> None:
        super().__init__(f"non-finite {term} ({value!r}) at step {step}")
        self.step = step
        self.term = term
        self.value = value
