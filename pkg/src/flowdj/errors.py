"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: validation problems exit 2,
numeric failures exit 3, integrity failures exit 4.
"""


class FlowDJError(Exception):
    """Base class for all package errors."""


class InvalidArgument(FlowDJError, ValueError):
    """A caller-supplied argument violates a precondition."""


class DomainError(FlowDJError, ValueError):
    """An evaluation point lies outside a field's or density's domain."""


class TrainingDiverged(FlowDJError, RuntimeError):
    """A non-finite loss, gradient, or weight appeared during training."""

    def __init__(self, message: str, step_index: int):
        super().__init__(f"{message} (step {step_index})")
        self.step_index = step_index


class IntegrationDiverged(FlowDJError, RuntimeError):
    """A non-finite state appeared while integrating an ODE."""

    def __init__(self, message: str, step_index: int):
        super().__init__(f"{message} (step {step_index})")
        self.step_index = step_index


class UnsupportedVersion(FlowDJError, ValueError):
    """Checkpoint format version not understood by this build."""


class CorruptCheckpoint(FlowDJError, ValueError):
    """Checkpoint failed its integrity digest or could not be parsed."""


class DegenerateGridPoint(FlowDJError, RuntimeError):
    """Every sample at a diagnostic grid point was skipped."""


class IntegrityFailure(FlowDJError, RuntimeError):
    """A manifest-listed output no longer matches its recorded digest."""
