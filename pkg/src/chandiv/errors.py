"""Exception types shared across the package."""


class ChandivError(Exception):
    """Base class for all package errors."""


class ShapeError(ChandivError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ChandivError, ValueError):
    """A call violates an operation's contract (non-scalar loss, bad head, ...)."""


class ConfigError(ChandivError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class FormatError(ChandivError, ValueError):
    """A file does not follow its binary or text format."""


class TrainingDiverged(ChandivError, RuntimeError):
    """Training produced a non-finite loss.

    Carries enough context to locate the failing step.
    """

    def __init__(self, epoch: int, batch: int, lr: float, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}, lr {lr:g}"
        )
