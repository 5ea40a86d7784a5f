"""
Exception hierarchy for the loract toolkit.
Every error raised on purpose by the library derives from LoractError.
"""


class LoractError(Exception):
    """Base class for loract errors."""


class ContractViolation(LoractError, ValueError):
    """A precondition or shape contract of an operation was not met."""


class DomainError(LoractError, ValueError):
    """Input is well-formed but mathematically undefined for the operation."""


class ConvergenceError(LoractError, RuntimeError):
    """An iterative kernel hit its iteration cap."""

    def __init__(self, message, residual, sweeps):
        super().__init__(f"{message} (residual={residual:.3e}, sweeps={sweeps})")
        self.residual = residual
        self.sweeps = sweeps


class CompressionError(LoractError):
    """Decomposition of a saved activation failed."""

    def __init__(self, label, cause):
        super().__init__(f"compression of activation '{label}' failed: {cause}")
        self.label = label
        self.cause = cause


class TapeError(LoractError):
    """Internal invariant of the autodiff tape was violated."""


class TrainingDiverged(LoractError):
    """Training produced a non-finite loss."""

    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class ConfigError(LoractError):
    """Run configuration could not be loaded or validated."""


class FixtureError(LoractError):
    """A matrix fixture file could not be read or written."""
