"""Exception hierarchy shared by every module.

The CLI maps each class onto a distinct exit code (see ``dryrecover.cli``).
"""


class DryRecoverError(Exception):
    """Base class for toolkit errors."""


class ValidationError(DryRecoverError, ValueError):
    """Input violates a documented precondition or invariant."""


class AudioIOError(DryRecoverError, OSError):
    """File could not be read or written."""


class TrainingDivergedError(DryRecoverError, RuntimeError):
    """A loss became non-finite during optimisation."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
