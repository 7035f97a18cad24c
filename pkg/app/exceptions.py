# app/exceptions.py
class SimulatorError(Exception):
    """Base exception for any simulator failure."""

    def __init__(self, message: str = "") -> None:
        super().__init__(message)
        self.message = message            # keeps mypy / IDE happy

    def __str__(self) -> str:             # nice display in CLI / logs
        return self.message or self.__class__.__name__


class ValidationError(SimulatorError):
    """Raised when input validation fails."""


class ConfigError(ValidationError):
    """Raised when the experiment config file holds an invalid value."""


class PredictorError(SimulatorError):
    """Raised when an unknown predictor is requested or a model file is unusable."""


class TrainingError(SimulatorError):
    """Raised on insufficient training data or a diverging loss."""


class TransitionError(SimulatorError):
    """Raised when the procedure state machine is asked to take an illegal edge."""


class ProcedureAbort(SimulatorError):
    """Raised inside a phase to stop the procedure; carries the phase tag."""

    def __init__(self, phase: str, reason: str) -> None:
        super().__init__(f"[{phase}] {reason}")
        self.phase = phase
        self.reason = reason


class ArtifactError(SimulatorError):
    """Raised on missing, unreadable, empty or mixed-provenance artifacts."""
